//! Benchmark systems: the damped two-mass oscillator and the single
//! mass-spring-damper chain, plus reference-solution oracles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{exact_linear_flow, FlowPart, DENSE_FLOW_LIMIT};
use crate::krylov::{estimate_skew_spectral_radius, LinearOperator, OperatorProperties};
use crate::phs::{InputSignal, QuadraticPHSystem, SystemSpec};

// ---------------------------------------------------------------------------
// Two-mass oscillator
// ---------------------------------------------------------------------------

/// Two masses, each tied to a wall by a damped spring (`K₁, r₁` and
/// `K₂, r₂`) and coupled to each other by a spring `K`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TwoMassParams {
    #[serde(default = "defaults::m1")]
    pub m1: f64,
    #[serde(default = "defaults::m2")]
    pub m2: f64,
    #[serde(default = "defaults::k1")]
    pub k1: f64,
    #[serde(default = "defaults::k2")]
    pub k2: f64,
    #[serde(default = "defaults::k")]
    pub k: f64,
    #[serde(default = "defaults::r1")]
    pub r1: f64,
    #[serde(default = "defaults::r2")]
    pub r2: f64,
}

mod defaults {
    pub fn m1() -> f64 {
        200.0
    }
    pub fn m2() -> f64 {
        200.0
    }
    pub fn k1() -> f64 {
        10.0
    }
    pub fn k2() -> f64 {
        1000.0
    }
    pub fn k() -> f64 {
        10.0
    }
    pub fn r1() -> f64 {
        5.0
    }
    pub fn r2() -> f64 {
        2.0
    }
}

impl Default for TwoMassParams {
    fn default() -> Self {
        Self {
            m1: defaults::m1(),
            m2: defaults::m2(),
            k1: defaults::k1(),
            k2: defaults::k2(),
            k: defaults::k(),
            r1: defaults::r1(),
            r2: defaults::r2(),
        }
    }
}

impl TwoMassParams {
    fn validate(&self) -> Result<()> {
        let entries = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("K1", self.k1),
            ("K2", self.k2),
            ("K", self.k),
            ("r1", self.r1),
            ("r2", self.r2),
        ];
        for (name, v) in entries {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "two-mass parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the five-state two-mass oscillator with state
/// `x = (q₁, q₁-q₂, q₂, p₁, p₂)`, no ports:
/// `R = diag(0,0,0,r₁,r₂)`, `Q = diag(K₁, K, K₂, 1/m₁, 1/m₂)` and the
/// constant ±1 coupling pattern in `J`.
pub fn build_two_mass(params: &TwoMassParams) -> Result<QuadraticPHSystem> {
    params.validate()?;
    let j = DMatrix::from_row_slice(
        5,
        5,
        &[
            0.0, 0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, -1.0, //
            0.0, 0.0, 0.0, 0.0, 1.0, //
            -1.0, -1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, -1.0, 0.0, 0.0,
        ],
    );
    let r = DMatrix::from_diagonal(&DVector::from_row_slice(&[
        0.0, 0.0, 0.0, params.r1, params.r2,
    ]));
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[
        params.k1,
        params.k,
        params.k2,
        1.0 / params.m1,
        1.0 / params.m2,
    ]));
    QuadraticPHSystem::closed(j, r, q)
}

// ---------------------------------------------------------------------------
// Mass-spring-damper chain
// ---------------------------------------------------------------------------

/// Wall-anchored chain of `n_cells` identical mass-spring-damper cells.
/// Per-cell state is (spring elongation, momentum), interleaved, so the
/// state dimension is `N = 2·n_cells`, `Q` is diagonal and `J` is banded.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MsdChainParams {
    #[serde(default = "msd_defaults::n_cells")]
    pub n_cells: usize,
    #[serde(default = "msd_defaults::mass")]
    pub mass: f64,
    #[serde(default = "msd_defaults::stiffness")]
    pub stiffness: f64,
    #[serde(default = "msd_defaults::damping")]
    pub damping: f64,
    #[serde(default)]
    pub input_ports: usize,
}

mod msd_defaults {
    pub fn n_cells() -> usize {
        500
    }
    pub fn mass() -> f64 {
        1.0
    }
    /// Calibrated so the default chain (N = 1000) has spectral radius 10.
    pub fn stiffness() -> f64 {
        let n = (2 * n_cells()) as f64;
        let rho = 10.0 / (2.0 * (std::f64::consts::PI / (n + 1.0)).cos());
        rho * rho * mass()
    }
    pub fn damping() -> f64 {
        0.1
    }
}

impl Default for MsdChainParams {
    fn default() -> Self {
        Self {
            n_cells: msd_defaults::n_cells(),
            mass: msd_defaults::mass(),
            stiffness: msd_defaults::stiffness(),
            damping: msd_defaults::damping(),
            input_ports: 0,
        }
    }
}

/// The chain as a system family: dense assembly for desk-scale dimensions
/// and a matrix-free transformed conservative operator for large ones.
#[derive(Clone, Debug)]
pub struct MsdChain {
    params: MsdChainParams,
}

/// Builds a chain after validating its parameters.
pub fn build_msd_chain(params: &MsdChainParams) -> Result<MsdChain> {
    MsdChain::new(*params)
}

impl MsdChain {
    pub fn new(params: MsdChainParams) -> Result<Self> {
        if params.n_cells == 0 {
            return Err(Error::InvalidArgument("chain needs at least one cell".into()));
        }
        for (name, v) in [("mass", params.mass), ("stiffness", params.stiffness)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "chain parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(params.damping >= 0.0) || !params.damping.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "chain damping must be nonnegative and finite, got {}",
                params.damping
            )));
        }
        if params.input_ports > params.n_cells {
            return Err(Error::InvalidArgument(format!(
                "cannot actuate {} masses in a chain of {}",
                params.input_ports, params.n_cells
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &MsdChainParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        2 * self.params.n_cells
    }

    /// Coupling rate `√(k/m)` of the transformed operator.
    fn coupling(&self) -> f64 {
        (self.params.stiffness / self.params.mass).sqrt()
    }

    /// Dense assembly of the chain (desk scale only).
    pub fn to_quadratic(&self) -> Result<QuadraticPHSystem> {
        let n = self.state_dim();
        if n > DENSE_FLOW_LIMIT {
            return Err(Error::TooLarge {
                n,
                limit: DENSE_FLOW_LIMIT,
            });
        }
        let nc = self.params.n_cells;
        let mut j = DMatrix::zeros(n, n);
        let mut r = DMatrix::zeros(n, n);
        let mut q = DMatrix::zeros(n, n);
        for i in 0..nc {
            let e = 2 * i;
            let p = 2 * i + 1;
            // elongation row: ė_i = (∇H)_{p_i} - (∇H)_{p_{i-1}}
            j[(e, p)] = 1.0;
            j[(p, e)] = -1.0;
            if i > 0 {
                let p_prev = 2 * i - 1;
                j[(e, p_prev)] = -1.0;
                j[(p_prev, e)] = 1.0;
            }
            r[(p, p)] = self.params.damping;
            q[(e, e)] = self.params.stiffness;
            q[(p, p)] = 1.0 / self.params.mass;
        }
        let mut b = DMatrix::zeros(n, self.params.input_ports);
        for port in 0..self.params.input_ports {
            b[(2 * port + 1, port)] = 1.0;
        }
        QuadraticPHSystem::new(j, r, b, q)
    }

    /// Matrix-free transformed conservative operator `J̃ = Q^{1/2} J Q^{1/2}`:
    /// tridiagonal with `+√(k/m)` above and `-√(k/m)` below the diagonal.
    pub fn conservative_operator(&self) -> MsdTildeOperator {
        MsdTildeOperator {
            n: self.state_dim(),
            coupling: self.coupling(),
        }
    }

    /// Spectral radius of `J̃`: dense eigensolve for small chains, Krylov
    /// (power-type) estimation on `-J̃²` for large ones.
    pub fn spectral_radius(&self) -> f64 {
        let op = self.conservative_operator();
        if op.n <= 400 {
            let dense = op.to_dense();
            let s = -(&dense * &dense);
            let lam_max = s
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .max(0.0);
            lam_max.sqrt()
        } else {
            estimate_skew_spectral_radius(&op, 400)
        }
    }

    /// Uniformly rescales the stiffness so the transformed conservative
    /// operator has the requested spectral radius (`J̃ ∝ √k`, so the factor
    /// is `(target/ρ)²`).
    pub fn scale_to_spectral_radius(&self, target: f64) -> Result<MsdChain> {
        if !(target > 0.0) || !target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "target spectral radius must be positive, got {target}"
            )));
        }
        let rho = self.spectral_radius();
        if !(rho > 0.0) {
            return Err(Error::InvalidArgument(
                "degenerate chain: spectral radius is zero, target unreachable".into(),
            ));
        }
        let factor = target / rho;
        let mut params = self.params;
        params.stiffness *= factor * factor;
        MsdChain::new(params)
    }
}

/// Matrix-free `J̃` of a uniform chain.
#[derive(Clone, Debug)]
pub struct MsdTildeOperator {
    n: usize,
    coupling: f64,
}

impl MsdTildeOperator {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n - 1 {
            m[(i, i + 1)] = self.coupling;
            m[(i + 1, i)] = -self.coupling;
        }
        m
    }

    /// Closed-form spectral radius of the tridiagonal Toeplitz operator:
    /// `2·√(k/m)·cos(π/(N+1))`.
    pub fn analytic_spectral_radius(&self) -> f64 {
        2.0 * self.coupling * (std::f64::consts::PI / (self.n as f64 + 1.0)).cos()
    }
}

impl LinearOperator for MsdTildeOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let c = self.coupling;
        let n = self.n;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            if i + 1 < n {
                acc += c * v[i + 1];
            }
            if i > 0 {
                acc -= c * v[i - 1];
            }
            out[i] = acc;
        }
        out
    }

    fn properties(&self) -> OperatorProperties {
        OperatorProperties::SKEW
    }
}

// ---------------------------------------------------------------------------
// Reference solutions and registry
// ---------------------------------------------------------------------------

/// Ground-truth solution of a linear system at `t_eval` via the dense matrix
/// exponential of `(J-R)Q` (plus the variation-of-constants input integral).
/// Documented accuracy is 1e-12 relative; dimensions above 2000 are rejected
/// (fall back to a fine-step midpoint integration there).
pub fn reference_solution(
    sys: &QuadraticPHSystem,
    x0: &DVector<f64>,
    t0: f64,
    t_eval: f64,
    u: &InputSignal,
    quad_nodes: usize,
) -> Result<DVector<f64>> {
    exact_linear_flow(sys, x0, t0, t_eval - t0, FlowPart::Full, u, quad_nodes)
}

/// A resolved benchmark system: dense model or chain family.
pub enum BenchmarkSystem {
    Dense(QuadraticPHSystem),
    Chain(MsdChain),
}

#[derive(Deserialize)]
struct MsdGeneratorParams {
    #[serde(flatten)]
    chain: MsdChainParams,
    /// Optional calibration: rescale stiffness until `ρ(J̃)` hits this value.
    #[serde(default)]
    target_radius: Option<f64>,
}

/// Resolves an on-disk system description. Generator names: `two_mass`,
/// `msd_chain`.
pub fn build_from_spec(spec: &SystemSpec) -> Result<BenchmarkSystem> {
    match spec {
        SystemSpec::Explicit(e) => Ok(BenchmarkSystem::Dense(e.clone().into_system()?)),
        SystemSpec::Generator { generator, params } => {
            let params = if params.is_null() {
                serde_json::Value::Object(serde_json::Map::new())
            } else {
                params.clone()
            };
            match generator.as_str() {
                "two_mass" => {
                    let p: TwoMassParams = serde_json::from_value(params)
                        .map_err(|e| Error::Config(format!("two_mass params: {e}")))?;
                    Ok(BenchmarkSystem::Dense(build_two_mass(&p)?))
                }
                "msd_chain" => {
                    let p: MsdGeneratorParams = serde_json::from_value(params)
                        .map_err(|e| Error::Config(format!("msd_chain params: {e}")))?;
                    let mut chain = MsdChain::new(p.chain)?;
                    if let Some(target) = p.target_radius {
                        chain = chain.scale_to_spectral_radius(target)?;
                    }
                    Ok(BenchmarkSystem::Chain(chain))
                }
                other => Err(Error::Config(format!(
                    "unknown benchmark generator '{other}' (expected two_mass or msd_chain)"
                ))),
            }
        }
    }
}
