//! Port-Hamiltonian system models.
//!
//! A port-Hamiltonian ODE couples a skew-symmetric energy-routing matrix `J`,
//! a positive semi-definite dissipation matrix `R` and a port matrix `B`
//! through the gradient of a Hamiltonian `H`:
//!
//! ```text
//! x' = (J(x) - R(x)) ∇H(x) + B(x) u(t),      y = B(x)ᵀ ∇H(x)
//! ```
//!
//! This module defines the quadratic ([`QuadraticPHSystem`], `H = ½ xᵀQx`)
//! and general nonlinear ([`NonlinearPHSystem`]) models, structural
//! validation, the congruence transform `x̃ = Q^{1/2} x` that normalizes the
//! energy weight to the identity, and the discrete energy ledger used to
//! audit dissipativity of computed trajectories.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Relative tolerance for structural checks (skewness, semi-definiteness).
pub const STRUCTURE_TOL: f64 = 1e-12;

/// Largest dimension for which dense eigenvalue-based checks are used.
/// Above this, semi-definiteness falls back to a shifted Cholesky probe.
pub const DENSE_EIG_LIMIT: usize = 2000;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Max-entry defect of `J + Jᵀ`.
fn skew_defect(m: &DMatrix<f64>) -> f64 {
    let mut defect = 0.0f64;
    for i in 0..m.nrows() {
        for k in i..m.ncols() {
            defect = defect.max((m[(i, k)] + m[(k, i)]).abs());
        }
    }
    defect
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut defect = 0.0f64;
    for i in 0..m.nrows() {
        for k in (i + 1)..m.ncols() {
            defect = defect.max((m[(i, k)] - m[(k, i)]).abs());
        }
    }
    defect
}

/// One failed structural invariant, with the measured defect.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureViolation {
    pub matrix: &'static str,
    pub property: &'static str,
    pub defect: f64,
}

impl fmt::Display for StructureViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} violates {} (defect {:.3e})",
            self.matrix, self.property, self.defect
        )
    }
}

/// Smallest eigenvalue of the symmetric part of `m`, or a Cholesky-based
/// semi-definiteness probe for large dimensions (returns an interval bound
/// rather than the exact eigenvalue there).
fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    if n <= DENSE_EIG_LIMIT {
        let eig = sym.symmetric_eigenvalues();
        eig.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        let shift = STRUCTURE_TOL * max_abs(&sym).max(1.0);
        let shifted = &sym + DMatrix::identity(n, n) * shift;
        if shifted.cholesky().is_some() {
            0.0
        } else {
            -2.0 * shift
        }
    }
}

// ---------------------------------------------------------------------------
// Quadratic systems
// ---------------------------------------------------------------------------

/// Linear port-Hamiltonian system with constant structure matrices and
/// quadratic Hamiltonian `H(x) = ½ xᵀ Q x`, so `∇H(x) = Q x`.
#[derive(Clone, Debug)]
pub struct QuadraticPHSystem {
    n: usize,
    d: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl QuadraticPHSystem {
    /// Builds a system from its structure matrices. Dimensions must be
    /// consistent (`J`, `R`, `Q` square `n×n`, `B` of shape `n×d`); this is a
    /// structural error, not a [`StructureViolation`].
    pub fn new(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        let n = j.nrows();
        if j.ncols() != n {
            return Err(Error::Dimension(format!(
                "J must be square, got {}x{}",
                j.nrows(),
                j.ncols()
            )));
        }
        for (name, m) in [("R", &r), ("Q", &q)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B must have {n} rows, got {}",
                b.nrows()
            )));
        }
        let d = b.ncols();
        Ok(Self { n, d, j, r, b, q })
    }

    /// System without ports (`d = 0`).
    pub fn closed(j: DMatrix<f64>, r: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = j.nrows();
        Self::new(j, r, DMatrix::zeros(n, 0), q)
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn port_dim(&self) -> usize {
        self.d
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Checks the structural invariants: `J` skew-symmetric, `R` symmetric
    /// positive semi-definite, `Q` symmetric positive definite. Returns one
    /// entry per violated property; empty means the system is valid.
    pub fn validate_structure(&self) -> Vec<StructureViolation> {
        let mut violations = Vec::new();

        let j_scale = max_abs(&self.j);
        let defect = skew_defect(&self.j);
        if defect > STRUCTURE_TOL * j_scale {
            violations.push(StructureViolation {
                matrix: "J",
                property: "skew-symmetry",
                defect,
            });
        }

        let r_scale = max_abs(&self.r);
        let r_sym_defect = symmetry_defect(&self.r);
        if r_sym_defect > STRUCTURE_TOL * r_scale {
            violations.push(StructureViolation {
                matrix: "R",
                property: "symmetry",
                defect: r_sym_defect,
            });
        }
        let r_min = min_symmetric_eigenvalue(&self.r);
        if r_min < -STRUCTURE_TOL * r_scale {
            violations.push(StructureViolation {
                matrix: "R",
                property: "positive semi-definiteness",
                defect: -r_min,
            });
        }

        let q_scale = max_abs(&self.q);
        let q_sym_defect = symmetry_defect(&self.q);
        if q_sym_defect > STRUCTURE_TOL * q_scale {
            violations.push(StructureViolation {
                matrix: "Q",
                property: "symmetry",
                defect: q_sym_defect,
            });
        }
        let q_min = min_symmetric_eigenvalue(&self.q);
        if q_min <= 0.0 {
            violations.push(StructureViolation {
                matrix: "Q",
                property: "positive definiteness",
                defect: -q_min,
            });
        }

        violations
    }
}

// ---------------------------------------------------------------------------
// Nonlinear systems
// ---------------------------------------------------------------------------

type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Port-Hamiltonian system with state-dependent structure matrices and a
/// general Hamiltonian, given as callbacks.
#[derive(Clone)]
pub struct NonlinearPHSystem {
    n: usize,
    d: usize,
    j_of: MatrixFn,
    r_of: MatrixFn,
    b_of: MatrixFn,
    h_of: ScalarFn,
    grad_h_of: VectorFn,
}

impl NonlinearPHSystem {
    pub fn new(
        n: usize,
        d: usize,
        j_of: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        r_of: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        b_of: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        h_of: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad_h_of: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            d,
            j_of: Arc::new(j_of),
            r_of: Arc::new(r_of),
            b_of: Arc::new(b_of),
            h_of: Arc::new(h_of),
            grad_h_of: Arc::new(grad_h_of),
        }
    }

    /// On-demand structural check at a specific state.
    pub fn validate_structure_at(&self, x: &DVector<f64>) -> Vec<StructureViolation> {
        let mut violations = Vec::new();
        let j = (self.j_of)(x);
        let defect = skew_defect(&j);
        if defect > STRUCTURE_TOL * max_abs(&j) {
            violations.push(StructureViolation {
                matrix: "J(x)",
                property: "skew-symmetry",
                defect,
            });
        }
        let r = (self.r_of)(x);
        let r_min = min_symmetric_eigenvalue(&r);
        if r_min < -STRUCTURE_TOL * max_abs(&r) {
            violations.push(StructureViolation {
                matrix: "R(x)",
                property: "positive semi-definiteness",
                defect: -r_min,
            });
        }
        violations
    }

    /// Largest relative deviation between `grad_h_of` and central finite
    /// differences of `h_of` at `x` (step `1e-6 · (1 + ‖x‖)`).
    pub fn gradient_defect(&self, x: &DVector<f64>) -> f64 {
        let step = 1e-6 * (1.0 + x.norm());
        let grad = (self.grad_h_of)(x);
        let scale = grad.norm().max(1.0);
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let fd = ((self.h_of)(&xp) - (self.h_of)(&xm)) / (2.0 * step);
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Common evaluation interface
// ---------------------------------------------------------------------------

/// Evaluation interface shared by quadratic and nonlinear models. All
/// methods are pure; implementations are immutable after construction and
/// safe to share across threads.
pub trait PhSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn port_dim(&self) -> usize;
    fn j_at(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn r_at(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn b_at(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn hamiltonian(&self, x: &DVector<f64>) -> f64;
    fn grad_hamiltonian(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Average-vector-field discrete gradient `∇̄H(x0, x1)`.
    ///
    /// Satisfies `∇̄H(x, x) = ∇H(x)` exactly, and the secant condition
    /// `∇̄H(x0, x1)ᵀ (x1 - x0) = H(x1) - H(x0)` exactly for quadratic `H`
    /// (up to the quadrature's exactness degree otherwise).
    fn discrete_gradient(&self, x0: &DVector<f64>, x1: &DVector<f64>, nodes: usize)
        -> DVector<f64>;

    /// Output map `y = B(x)ᵀ ∇H(x)`.
    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.b_at(x).transpose() * self.grad_hamiltonian(x)
    }

    /// Full right-hand side `(J - R) ∇H + B u(t)`.
    fn rhs(&self, x: &DVector<f64>, t: f64, u: &InputSignal) -> DVector<f64> {
        let grad = self.grad_hamiltonian(x);
        let mut f = (self.j_at(x) - self.r_at(x)) * &grad;
        if self.port_dim() > 0 {
            f += self.b_at(x) * u.at(t);
        }
        f
    }

    /// Dense access to the quadratic model, when this is one. Integrators use
    /// it to assemble analytic Newton matrices instead of finite differences.
    fn as_quadratic(&self) -> Option<&QuadraticPHSystem> {
        None
    }
}

impl PhSystem for QuadraticPHSystem {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn port_dim(&self) -> usize {
        self.d
    }

    fn j_at(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.j.clone()
    }

    fn r_at(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.r.clone()
    }

    fn b_at(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x))
    }

    fn grad_hamiltonian(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }

    fn discrete_gradient(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        _nodes: usize,
    ) -> DVector<f64> {
        // AVF of a quadratic Hamiltonian is the midpoint gradient, exactly.
        &self.q * ((x0 + x1) * 0.5)
    }

    fn as_quadratic(&self) -> Option<&QuadraticPHSystem> {
        Some(self)
    }
}

impl PhSystem for NonlinearPHSystem {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn port_dim(&self) -> usize {
        self.d
    }

    fn j_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.j_of)(x)
    }

    fn r_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.r_of)(x)
    }

    fn b_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.b_of)(x)
    }

    fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        (self.h_of)(x)
    }

    fn grad_hamiltonian(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_h_of)(x)
    }

    fn discrete_gradient(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        nodes: usize,
    ) -> DVector<f64> {
        // Gauss-Legendre approximation of ∫₀¹ ∇H((1-ξ)x0 + ξx1) dξ.
        let (xs, ws) = quadrature::gauss_legendre_on(nodes, 0.0, 1.0);
        let mut acc = DVector::zeros(self.n);
        for (xi, w) in xs.iter().zip(&ws) {
            let point = x0 * (1.0 - xi) + x1 * *xi;
            acc += (self.grad_h_of)(&point) * *w;
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// States, inputs, step results
// ---------------------------------------------------------------------------

/// State vector together with the physical time it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub x: DVector<f64>,
    pub t: f64,
}

impl State {
    pub fn new(x: DVector<f64>, t: f64) -> Self {
        Self { x, t }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

/// State augmented with the splitting clock `s`.
///
/// `s` carries the physical time seen by the input signal: dissipative
/// subflows advance it (`s' = 1`), conservative subflows freeze it
/// (`s' = 0`). It is initialized to the trajectory start time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAugmentedState {
    pub x: DVector<f64>,
    pub s: f64,
}

impl TimeAugmentedState {
    pub fn new(x: DVector<f64>, s: f64) -> Self {
        Self { x, s }
    }
}

/// Input signal `u: t → ℝᵈ`, defined on the whole integration interval.
#[derive(Clone)]
pub struct InputSignal {
    d: usize,
    u_of: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    description: String,
}

impl InputSignal {
    pub fn from_fn(
        d: usize,
        description: impl Into<String>,
        u_of: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            u_of: Arc::new(u_of),
            description: description.into(),
        }
    }

    /// The zero signal (also used for closed systems, `d = 0`).
    pub fn zero(d: usize) -> Self {
        Self::from_fn(d, "zero input", move |_| DVector::zeros(d))
    }

    pub fn constant(value: DVector<f64>) -> Self {
        let d = value.len();
        Self::from_fn(d, "constant input", move |_| value.clone())
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let u = (self.u_of)(t);
        assert_eq!(u.len(), self.d, "input signal returned wrong dimension");
        u
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InputSignal")
            .field("d", &self.d)
            .field("description", &self.description)
            .finish()
    }
}

/// Discrete energy ledger of one step: `dissipated ≥ 0` is the energy lost
/// to `R`, `supplied` the energy delivered through the ports.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBalance {
    pub dissipated: f64,
    pub supplied: f64,
}

impl EnergyBalance {
    pub fn accumulate(&mut self, other: EnergyBalance) {
        self.dissipated += other.dissipated;
        self.supplied += other.supplied;
    }
}

/// Result of one (sub)step: new state, output, Hamiltonian value and the
/// step's energy ledger.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: State,
    pub output: DVector<f64>,
    pub hamiltonian: f64,
    pub energy: EnergyBalance,
}

impl StepResult {
    /// Snapshot of a state with an empty ledger (used for trajectory heads).
    pub fn snapshot<S: PhSystem + ?Sized>(sys: &S, state: State) -> Self {
        let output = sys.output(&state.x);
        let hamiltonian = sys.hamiltonian(&state.x);
        Self {
            state,
            output,
            hamiltonian,
            energy: EnergyBalance::default(),
        }
    }
}

/// Discrete dissipativity audit of a trajectory:
/// `H(end) - H(start) ≤ Σ supplied` within tolerance.
#[derive(Clone, Copy, Debug)]
pub struct DissipativityReport {
    /// `H(end) - H(start)`.
    pub lhs: f64,
    /// Supplied-energy bound, accumulated with the same quadrature the
    /// integrator used for `u`.
    pub bound: f64,
    pub satisfied: bool,
}

/// Audits the dissipativity inequality over a recorded trajectory.
pub fn dissipativity_ledger(steps: &[StepResult]) -> DissipativityReport {
    assert!(!steps.is_empty(), "trajectory must be nonempty");
    let lhs = steps.last().unwrap().hamiltonian - steps[0].hamiltonian;
    let bound: f64 = steps.iter().map(|s| s.energy.supplied).sum();
    DissipativityReport {
        lhs,
        bound,
        satisfied: lhs <= bound + 1e-10 * (1.0 + bound.abs()),
    }
}

// ---------------------------------------------------------------------------
// Congruence transform
// ---------------------------------------------------------------------------

/// How the principal square root was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SquareRootProvenance {
    Eigendecomposition,
    Diagonal,
}

/// Principal square root `Q^{1/2}` of an SPD energy weight, together with its
/// inverse. Mapping `x̃ = Q^{1/2} x` turns `H = ½ xᵀQx` into `½ ‖x̃‖²`.
#[derive(Clone, Debug)]
pub struct CongruenceTransform {
    q_half: DMatrix<f64>,
    q_half_inv: DMatrix<f64>,
    provenance: SquareRootProvenance,
}

impl CongruenceTransform {
    /// Builds the transform from an SPD matrix `Q`. Diagonal matrices take
    /// the entrywise square-root shortcut; everything else goes through a
    /// symmetric eigendecomposition (the symmetric principal root is required
    /// for `Q^{1/2} J Q^{1/2}` to stay skew).
    pub fn from_spd(q: &DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        if q.ncols() != n {
            return Err(Error::Dimension(format!(
                "Q must be square, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let sym_defect = symmetry_defect(q);
        if sym_defect > STRUCTURE_TOL * max_abs(q).max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "Q must be symmetric (defect {sym_defect:.3e})"
            )));
        }

        let off_diag = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| q[(i, k)].abs())
            .fold(0.0f64, f64::max);

        if off_diag == 0.0 {
            let min_diag = (0..n).map(|i| q[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_diag <= 0.0 {
                return Err(Error::NotPositiveDefinite { min_eig: min_diag });
            }
            let mut q_half = DMatrix::zeros(n, n);
            let mut q_half_inv = DMatrix::zeros(n, n);
            for i in 0..n {
                let root = q[(i, i)].sqrt();
                q_half[(i, i)] = root;
                q_half_inv[(i, i)] = 1.0 / root;
            }
            return Ok(Self {
                q_half,
                q_half_inv,
                provenance: SquareRootProvenance::Diagonal,
            });
        }

        let eig = q.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eig });
        }
        let u = &eig.eigenvectors;
        let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let inv_roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
        let q_half = u * roots * u.transpose();
        let q_half_inv = u * inv_roots * u.transpose();
        Ok(Self {
            q_half,
            q_half_inv,
            provenance: SquareRootProvenance::Eigendecomposition,
        })
    }

    pub fn q_half(&self) -> &DMatrix<f64> {
        &self.q_half
    }

    pub fn q_half_inv(&self) -> &DMatrix<f64> {
        &self.q_half_inv
    }

    pub fn provenance(&self) -> SquareRootProvenance {
        self.provenance
    }

    /// `x̃ = Q^{1/2} x`.
    pub fn to_tilde(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q_half * x
    }

    /// `x = Q^{-1/2} x̃`.
    pub fn from_tilde(&self, x_tilde: &DVector<f64>) -> DVector<f64> {
        &self.q_half_inv * x_tilde
    }
}

/// Applies the congruence to the whole system:
/// `J̃ = Q^{1/2} J Q^{1/2}`, `R̃ = Q^{1/2} R Q^{1/2}`, `B̃ = Q^{1/2} B`,
/// `Q̃ = I`, so the transformed Hamiltonian is `½ ‖x̃‖²`.
///
/// The transform must have been built from `sys.q()`; this is verified on a
/// probe vector.
pub fn transform_system(
    sys: &QuadraticPHSystem,
    ct: &CongruenceTransform,
) -> Result<QuadraticPHSystem> {
    let n = sys.state_dim();
    if ct.q_half.nrows() != n {
        return Err(Error::Dimension(format!(
            "transform is {}-dimensional, system is {n}-dimensional",
            ct.q_half.nrows()
        )));
    }
    // Probe (Q^{1/2})² v ≈ Q v on a fixed vector.
    let probe = DVector::from_fn(n, |i, _| 1.0 + i as f64 / n as f64);
    let via_root = &ct.q_half * (&ct.q_half * &probe);
    let direct = sys.q() * &probe;
    let defect = (&via_root - &direct).norm() / direct.norm().max(1.0);
    if defect > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "congruence transform does not match the system's Q (probe defect {defect:.3e})"
        )));
    }

    let q_half = &ct.q_half;
    let j_tilde = q_half * sys.j() * q_half;
    let r_tilde = q_half * sys.r() * q_half;
    let b_tilde = q_half * sys.b();
    QuadraticPHSystem::new(j_tilde, r_tilde, b_tilde, DMatrix::identity(n, n))
}

// ---------------------------------------------------------------------------
// Serialization schema
// ---------------------------------------------------------------------------

/// On-disk description of a quadratic system: explicit row-major matrices or
/// a named benchmark generator with parameter overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Generator {
        generator: String,
        #[serde(default)]
        params: serde_json::Value,
    },
    Explicit(ExplicitSystem),
}

/// Row-major matrix payload of [`SystemSpec::Explicit`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplicitSystem {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "J")]
    pub j: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
}

impl ExplicitSystem {
    pub fn into_system(self) -> Result<QuadraticPHSystem> {
        let n = self.n;
        let d = self.d;
        for (name, data, len) in [
            ("J", &self.j, n * n),
            ("R", &self.r, n * n),
            ("B", &self.b, n * d),
            ("Q", &self.q, n * n),
        ] {
            if data.len() != len {
                return Err(Error::Dimension(format!(
                    "{name} must hold {len} entries, got {}",
                    data.len()
                )));
            }
        }
        QuadraticPHSystem::new(
            DMatrix::from_row_slice(n, n, &self.j),
            DMatrix::from_row_slice(n, n, &self.r),
            DMatrix::from_row_slice(n, d, &self.b),
            DMatrix::from_row_slice(n, n, &self.q),
        )
    }
}

impl QuadraticPHSystem {
    pub fn to_explicit(&self) -> ExplicitSystem {
        let flat = |m: &DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for k in 0..m.ncols() {
                    out.push(m[(i, k)]);
                }
            }
            out
        };
        ExplicitSystem {
            n: self.n,
            d: self.d,
            j: flat(&self.j),
            r: flat(&self.r),
            b: flat(&self.b),
            q: flat(&self.q),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn canonical_2d() -> QuadraticPHSystem {
        QuadraticPHSystem::closed(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn canonical_skew_system_is_valid() {
        assert!(canonical_2d().validate_structure().is_empty());
    }

    #[test]
    fn symmetric_j_reports_skewness_defect_two() {
        let sys = QuadraticPHSystem::closed(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let violations = sys.validate_structure();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].matrix, "J");
        assert_eq!(violations[0].property, "skew-symmetry");
        assert_relative_eq!(violations[0].defect, 2.0);
    }

    #[test]
    fn dimension_mismatch_is_a_structural_error() {
        let err = QuadraticPHSystem::closed(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 3),
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn indefinite_r_is_flagged() {
        let sys = QuadraticPHSystem::closed(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let violations = sys.validate_structure();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].matrix, "R");
        assert_relative_eq!(violations[0].defect, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn hamiltonian_values() {
        let sys = canonical_2d();
        assert_eq!(sys.hamiltonian(&DVector::zeros(2)), 0.0);
        // ½ (3² + 4²) = 12.5
        let x = DVector::from_row_slice(&[3.0, 4.0]);
        assert_relative_eq!(sys.hamiltonian(&x), 12.5);
    }

    #[test]
    fn hamiltonian_with_two_mass_weight() {
        // Q = diag(10, 10, 1000, 1/200, 1/200), x = e3 -> ½·1000 = 500.
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[
            10.0, 10.0, 1000.0, 0.005, 0.005,
        ]));
        let sys = QuadraticPHSystem::closed(DMatrix::zeros(5, 5), DMatrix::zeros(5, 5), q).unwrap();
        let mut x = DVector::zeros(5);
        x[2] = 1.0;
        assert_relative_eq!(sys.hamiltonian(&x), 500.0);
    }

    #[test]
    fn output_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // B = 0 -> zero output
        let sys = QuadraticPHSystem::new(
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 2),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let x = random_vector(&mut rng, 3);
        assert_eq!(sys.output(&x), DVector::zeros(2));

        // B = I, Q = I -> y = x
        let sys = QuadraticPHSystem::new(
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 3),
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let x = random_vector(&mut rng, 3);
        assert_relative_eq!(sys.output(&x), x);
    }

    #[test]
    fn output_matches_dense_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let q = DMatrix::from_diagonal(&DVector::from_fn(5, |_, _| rng.gen_range(0.5..2.0)));
        let sys =
            QuadraticPHSystem::new(DMatrix::zeros(5, 5), DMatrix::zeros(5, 5), b.clone(), q.clone())
                .unwrap();
        let x = random_vector(&mut rng, 5);
        let y = sys.output(&x);
        // Independent elementwise product: y_k = Σ_i B[i,k] (Q x)_i.
        for k in 0..2 {
            let mut want = 0.0;
            for i in 0..5 {
                let mut qx = 0.0;
                for l in 0..5 {
                    qx += q[(i, l)] * x[l];
                }
                want += b[(i, k)] * qx;
            }
            assert_relative_eq!(y[k], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn congruence_identity_and_diagonal() {
        let ct = CongruenceTransform::from_spd(&DMatrix::identity(3, 3)).unwrap();
        assert_relative_eq!(ct.q_half(), &DMatrix::identity(3, 3));
        assert_eq!(ct.provenance(), SquareRootProvenance::Diagonal);

        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]));
        let ct = CongruenceTransform::from_spd(&q).unwrap();
        assert_relative_eq!(
            ct.q_half(),
            &DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 3.0]))
        );
    }

    #[test]
    fn congruence_rejects_indefinite_q() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        match CongruenceTransform::from_spd(&q) {
            Err(Error::NotPositiveDefinite { min_eig }) => {
                assert_relative_eq!(min_eig, -1.0, epsilon = 1e-12)
            }
            other => panic!("expected definiteness error, got {other:?}"),
        }
    }

    #[test]
    fn congruence_invariants_on_dense_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let q = &a * a.transpose() + DMatrix::identity(6, 6);
        let ct = CongruenceTransform::from_spd(&q).unwrap();
        assert_eq!(ct.provenance(), SquareRootProvenance::Eigendecomposition);
        let q_rebuilt = ct.q_half() * ct.q_half();
        assert!((q_rebuilt - &q).norm() <= 1e-10 * q.norm());
        let eye = ct.q_half_inv() * ct.q_half();
        assert!((eye - DMatrix::identity(6, 6)).norm() <= 1e-10);
        assert!(symmetry_defect(ct.q_half()) <= 1e-12 * max_abs(ct.q_half()));
    }

    #[test]
    fn transform_with_identity_q_is_identity() {
        let sys = canonical_2d();
        let ct = CongruenceTransform::from_spd(sys.q()).unwrap();
        let t = transform_system(&sys, &ct).unwrap();
        assert_relative_eq!(t.j(), sys.j());
        assert_relative_eq!(t.r(), sys.r());
    }

    #[test]
    fn transform_rejects_mismatched_transform() {
        let sys = canonical_2d();
        let ct = CongruenceTransform::from_spd(&DMatrix::from_diagonal(
            &DVector::from_row_slice(&[4.0, 4.0]),
        ))
        .unwrap();
        assert!(transform_system(&sys, &ct).is_err());
    }

    #[test]
    fn transform_preserves_skewness_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let j = &a - a.transpose();
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = &g * g.transpose() + DMatrix::identity(n, n) * 0.5;
            let sys =
                QuadraticPHSystem::closed(j, DMatrix::zeros(n, n), q).unwrap();
            let ct = CongruenceTransform::from_spd(sys.q()).unwrap();
            let t = transform_system(&sys, &ct).unwrap();
            let j_tilde = t.j();
            assert!(skew_defect(j_tilde) <= 1e-12 * max_abs(j_tilde).max(1.0));

            // ½‖Q^{1/2}x‖² == ½xᵀQx
            for _ in 0..5 {
                let x = random_vector(&mut rng, n);
                let h_orig = sys.hamiltonian(&x);
                let h_tilde = t.hamiltonian(&ct.to_tilde(&x));
                assert_relative_eq!(h_orig, h_tilde, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_form_of_skew_matrix_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = DMatrix::from_fn(7, 7, |_, _| rng.gen_range(-1.0..1.0));
        let j = &a - a.transpose();
        let scale = max_abs(&j);
        for _ in 0..100 {
            let x = random_vector(&mut rng, 7);
            let v = x.dot(&(&j * &x)).abs();
            assert!(v <= 1e-12 * scale * x.norm_squared());
        }
    }

    #[test]
    fn nonlinear_gradient_defect_small_for_consistent_pair() {
        // Pendulum: H = p²/2 + (1 - cos q).
        let sys = NonlinearPHSystem::new(
            2,
            0,
            |_| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            |_| DMatrix::zeros(2, 2),
            |_| DMatrix::zeros(2, 0),
            |x| 0.5 * x[1] * x[1] + (1.0 - x[0].cos()),
            |x| DVector::from_row_slice(&[x[0].sin(), x[1]]),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_vector(&mut rng, 2) * 2.0;
            assert!(sys.gradient_defect(&x) <= 1e-6);
        }
        assert!(sys.validate_structure_at(&DVector::zeros(2)).is_empty());
    }

    #[test]
    fn nonlinear_gradient_defect_detects_wrong_gradient() {
        let sys = NonlinearPHSystem::new(
            1,
            0,
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 0),
            |x| x[0].powi(4),
            |x| DVector::from_row_slice(&[2.0 * x[0]]), // wrong on purpose
        );
        let x = DVector::from_row_slice(&[1.5]);
        assert!(sys.gradient_defect(&x) > 1e-2);
    }

    #[test]
    fn explicit_schema_round_trip() {
        let sys = canonical_2d();
        let json = serde_json::to_string(&SystemSpec::Explicit(sys.to_explicit())).unwrap();
        let parsed: SystemSpec = serde_json::from_str(&json).unwrap();
        match parsed {
            SystemSpec::Explicit(e) => {
                let back = e.into_system().unwrap();
                assert_relative_eq!(back.j(), sys.j());
                assert_relative_eq!(back.q(), sys.q());
            }
            _ => panic!("expected explicit spec"),
        }
    }

    #[test]
    fn generator_schema_parses() {
        let json = r#"{"generator": "two_mass", "params": {"m1": 100.0}}"#;
        let parsed: SystemSpec = serde_json::from_str(json).unwrap();
        match parsed {
            SystemSpec::Generator { generator, params } => {
                assert_eq!(generator, "two_mass");
                assert_eq!(params["m1"], 100.0);
            }
            _ => panic!("expected generator spec"),
        }
    }

    #[test]
    fn ledger_trivial_conservation() {
        let sys = canonical_2d();
        let x = DVector::from_row_slice(&[1.0, 0.0]);
        let steps = vec![
            StepResult::snapshot(&sys, State::new(x.clone(), 0.0)),
            StepResult::snapshot(&sys, State::new(x, 1.0)),
        ];
        let report = dissipativity_ledger(&steps);
        assert_eq!(report.lhs, 0.0);
        assert_eq!(report.bound, 0.0);
        assert!(report.satisfied);
    }
}
