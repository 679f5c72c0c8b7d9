//! Krylov solvers for the midpoint update systems.
//!
//! Two routes solve `(I - (h/2) J̃) x̃₁ = (I + (h/2) J̃) x̃₀`:
//!
//! * [`gmres`] — unrestarted GMRES on the shifted matrix. Optimal residuals,
//!   but the iterates have no reason to preserve `‖x̃₀‖`.
//! * [`cayley_arnoldi`] — evaluates the Cayley map of the skew operator
//!   projected onto the Krylov subspace. Because the projected matrix is
//!   again skew-symmetric, its Cayley transform is orthogonal and every
//!   iterate has the same 2-norm as `x̃₀`, i.e. the same energy.
//!
//! Both record per-iteration residual and iterate norms so runs can be
//! compared apples-to-apples.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Structural flags a [`LinearOperator`] may advertise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OperatorProperties {
    pub skew_symmetric: bool,
    pub symmetric_positive_definite: bool,
}

impl OperatorProperties {
    pub const GENERAL: Self = Self {
        skew_symmetric: false,
        symmetric_positive_definite: false,
    };
    pub const SKEW: Self = Self {
        skew_symmetric: true,
        symmetric_positive_definite: false,
    };
    pub const SPD: Self = Self {
        skew_symmetric: false,
        symmetric_positive_definite: true,
    };
}

/// Matrix-free linear operator `v ↦ A v`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn properties(&self) -> OperatorProperties {
        OperatorProperties::GENERAL
    }
    /// Dense form, when one exists; direct solvers require it.
    fn as_dense(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// Dense-matrix-backed operator.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    a: DMatrix<f64>,
    props: OperatorProperties,
}

impl DenseOperator {
    pub fn new(a: DMatrix<f64>, props: OperatorProperties) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "operator must be square");
        Self { a, props }
    }

    pub fn general(a: DMatrix<f64>) -> Self {
        Self::new(a, OperatorProperties::GENERAL)
    }

    pub fn skew(a: DMatrix<f64>) -> Self {
        Self::new(a, OperatorProperties::SKEW)
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.a * v
    }

    fn properties(&self) -> OperatorProperties {
        self.props
    }

    fn as_dense(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a)
    }
}

/// Closure-backed operator for matrix-free use.
pub struct FnOperator<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    dim: usize,
    f: F,
    props: OperatorProperties,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> FnOperator<F> {
    pub fn new(dim: usize, props: OperatorProperties, f: F) -> Self {
        Self { dim, f, props }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.f)(v)
    }

    fn properties(&self) -> OperatorProperties {
        self.props
    }
}

/// Statistical linearity probe: largest relative defect of
/// `A(αu + βv) - αAu - βAv` over random trials.
pub fn linearity_defect(op: &dyn LinearOperator, seed: u64, trials: usize) -> f64 {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = op.dim();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let (alpha, beta): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let lhs = op.apply(&(&u * alpha + &v * beta));
        let rhs = op.apply(&u) * alpha + op.apply(&v) * beta;
        let scale = lhs.norm().max(rhs.norm()).max(1.0);
        worst = worst.max((lhs - rhs).norm() / scale);
    }
    worst
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-iteration diagnostics of a Krylov solve. Index `k` of the vectors
/// corresponds to iteration `k + 1`.
#[derive(Clone, Debug)]
pub struct KrylovReport {
    /// Full iterates, when requested via the solver options.
    pub iterates_kept: Option<Vec<DVector<f64>>>,
    pub residual_norms: Vec<f64>,
    pub iterate_norms: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl KrylovReport {
    fn new(keep_iterates: bool) -> Self {
        Self {
            iterates_kept: keep_iterates.then(Vec::new),
            residual_norms: Vec::new(),
            iterate_norms: Vec::new(),
            converged: false,
            iterations: 0,
        }
    }

    fn record(&mut self, residual: f64, iterate: &DVector<f64>) {
        self.residual_norms.push(residual);
        self.iterate_norms.push(iterate.norm());
        self.iterations += 1;
        if let Some(kept) = &mut self.iterates_kept {
            kept.push(iterate.clone());
        }
    }

    /// Writes `iteration,residual_norm,iterate_norm` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "iteration,residual_norm,iterate_norm")?;
        for (k, (r, x)) in self
            .residual_norms
            .iter()
            .zip(&self.iterate_norms)
            .enumerate()
        {
            writeln!(w, "{},{},{}", k + 1, r, x)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// GMRES
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct GmresOptions {
    pub keep_iterates: bool,
}

/// Unrestarted GMRES with modified Gram-Schmidt and Givens rotations, zero
/// initial guess. Returns the iterate once `‖b - Ax‖ ≤ tol·‖b‖`, or the last
/// iterate with `converged = false` after `maxit` iterations.
///
/// The iterate (and its 2-norm) is formed at every iteration so the report
/// is directly comparable with [`cayley_arnoldi`].
pub fn gmres(
    a: &dyn LinearOperator,
    b: &DVector<f64>,
    tol: f64,
    maxit: usize,
) -> Result<(DVector<f64>, KrylovReport)> {
    gmres_with(a, b, tol, maxit, GmresOptions::default())
}

pub fn gmres_with(
    a: &dyn LinearOperator,
    b: &DVector<f64>,
    tol: f64,
    maxit: usize,
    opts: GmresOptions,
) -> Result<(DVector<f64>, KrylovReport)> {
    let n = a.dim();
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "rhs has length {}, operator dimension is {n}",
            b.len()
        )));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("gmres: tol must be positive".into()));
    }
    if maxit == 0 {
        return Err(Error::InvalidArgument("gmres: maxit must be >= 1".into()));
    }

    let mut report = KrylovReport::new(opts.keep_iterates);
    let beta = b.norm();
    if beta == 0.0 {
        report.converged = true;
        return Ok((DVector::zeros(n), report));
    }

    let mut basis: Vec<DVector<f64>> = vec![b / beta];
    // Columns of the Hessenberg matrix, rotated in place to upper triangular.
    let mut h_cols: Vec<Vec<f64>> = Vec::new();
    let mut givens: Vec<(f64, f64)> = Vec::new();
    let mut g = vec![beta];

    let mut best = DVector::zeros(n);
    for k in 0..maxit {
        let mut w = a.apply(&basis[k]);
        let mut col = vec![0.0; k + 2];
        for (j, v) in basis.iter().enumerate() {
            let hjk = v.dot(&w);
            w.axpy(-hjk, v, 1.0);
            col[j] = hjk;
        }
        let h_next = w.norm();
        col[k + 1] = h_next;

        // Apply the accumulated rotations to the new column.
        for (j, &(c, s)) in givens.iter().enumerate() {
            let t = c * col[j] + s * col[j + 1];
            col[j + 1] = -s * col[j] + c * col[j + 1];
            col[j] = t;
        }
        // New rotation zeroing the subdiagonal entry.
        let r = col[k].hypot(col[k + 1]);
        let (c, s) = if r == 0.0 { (1.0, 0.0) } else { (col[k] / r, col[k + 1] / r) };
        col[k] = r;
        col[k + 1] = 0.0;
        givens.push((c, s));
        g.push(-s * g[k]);
        g[k] *= c;
        h_cols.push(col);

        // Current iterate: back-substitute R y = g, then x = V y.
        let mut y = vec![0.0; k + 1];
        for i in (0..=k).rev() {
            let mut acc = g[i];
            for j in (i + 1)..=k {
                acc -= h_cols[j][i] * y[j];
            }
            let diag = h_cols[i][i];
            if diag == 0.0 {
                return Err(Error::KrylovBreakdown {
                    iteration: k + 1,
                    residual: g[k + 1].abs(),
                });
            }
            y[i] = acc / diag;
        }
        let mut x = DVector::zeros(n);
        for (j, v) in basis.iter().enumerate() {
            x.axpy(y[j], v, 1.0);
        }

        let residual = g[k + 1].abs();
        report.record(residual, &x);
        best = x;

        if residual <= tol * beta {
            report.converged = true;
            return Ok((best, report));
        }

        if h_next <= 1e-14 * beta {
            // Invariant subspace reached but the residual is still above the
            // target: genuine breakdown.
            return Err(Error::KrylovBreakdown {
                iteration: k + 1,
                residual,
            });
        }
        basis.push(w / h_next);
    }

    Ok((best, report))
}

// ---------------------------------------------------------------------------
// Cayley-Arnoldi for skew-symmetric operators
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct CayleyArnoldiOptions {
    /// One pass of classical Gram-Schmidt against the whole basis per
    /// iteration. Short recurrences lose orthogonality in finite precision;
    /// the norm-preservation guarantee needs a clean basis.
    pub reorthogonalize: bool,
    pub keep_iterates: bool,
}

impl Default for CayleyArnoldiOptions {
    fn default() -> Self {
        Self {
            reorthogonalize: true,
            keep_iterates: false,
        }
    }
}

/// Skew-symmetric Lanczos process: `A V_k = V_k T_k + β_k v_{k+1} e_kᵀ` with
/// `T_k` tridiagonal and skew-symmetric (zero diagonal, `T[j+1,j] = β_j`,
/// `T[j,j+1] = -β_j`).
pub(crate) struct SkewLanczos<'a> {
    op: &'a dyn LinearOperator,
    pub basis: Vec<DVector<f64>>,
    pub betas: Vec<f64>,
    reorthogonalize: bool,
    pub exhausted: bool,
}

impl<'a> SkewLanczos<'a> {
    pub fn new(op: &'a dyn LinearOperator, v0: DVector<f64>, reorthogonalize: bool) -> Self {
        Self {
            op,
            basis: vec![v0],
            betas: Vec::new(),
            reorthogonalize,
            exhausted: false,
        }
    }

    /// Extends the basis by one vector. Returns `false` on breakdown
    /// (invariant subspace found).
    pub fn extend(&mut self) -> bool {
        if self.exhausted {
            return false;
        }
        let k = self.basis.len();
        let mut w = self.op.apply(&self.basis[k - 1]);
        let raw_scale = w.norm();
        // Short recurrence: diagonal of T is zero, superdiagonal is -β_{k-2}.
        if k >= 2 {
            let beta_prev = self.betas[k - 2];
            w.axpy(beta_prev, &self.basis[k - 2], 1.0);
        }
        if self.reorthogonalize {
            for v in &self.basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        } else {
            // Still remove the component along v_{k-1}; exact arithmetic puts
            // nothing there (skew diagonal) but roundoff does.
            let c = self.basis[k - 1].dot(&w);
            w.axpy(-c, &self.basis[k - 1], 1.0);
        }
        let beta = w.norm();
        if beta <= 1e-13 * raw_scale.max(1e-300) || beta == 0.0 {
            self.exhausted = true;
            return false;
        }
        self.betas.push(beta);
        self.basis.push(w / beta);
        true
    }

    /// Dense projected matrix `T_k` for the current basis size.
    pub fn projected(&self, k: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(k, k);
        for j in 0..k.saturating_sub(1) {
            t[(j + 1, j)] = self.betas[j];
            t[(j, j + 1)] = -self.betas[j];
        }
        t
    }
}

/// Residual 2-norm of the midpoint update system for a candidate `x`:
/// `‖(I + (h/2) J̃) x̃₀ - (I - (h/2) J̃) x‖₂`.
pub fn residual_of_cayley_system(
    j_tilde: &dyn LinearOperator,
    h: f64,
    x_candidate: &DVector<f64>,
    x0: &DVector<f64>,
) -> f64 {
    let half = 0.5 * h;
    let rhs = x0 + j_tilde.apply(x0) * half;
    let lhs = x_candidate - j_tilde.apply(x_candidate) * half;
    (rhs - lhs).norm()
}

/// Residual tolerance `h²` used in the multistep drift experiment: the
/// underlying integrator is order two, so solving more accurately than the
/// discretization error buys nothing.
pub fn stopping_rule_h2(h: f64) -> f64 {
    h * h
}

/// Structure-preserving evaluation of the Cayley-transform update
/// `x̃₁ = (I - (h/2) J̃)⁻¹ (I + (h/2) J̃) x̃₀` for skew-symmetric `J̃`.
///
/// The `k`-th iterate is `‖x̃₀‖ · V_k (I - (h/2)T_k)⁻¹ (I + (h/2)T_k) e₁`
/// with `T_k = V_kᵀ J̃ V_k` the skew tridiagonal projection. The Cayley map
/// of a skew matrix is orthogonal, so every iterate has the 2-norm of `x̃₀`
/// up to the orthonormality of the basis.
///
/// The stopping test compares the explicitly computed residual of the
/// midpoint system against `tol · ‖(I + (h/2)J̃) x̃₀‖`.
pub fn cayley_arnoldi(
    j_tilde: &dyn LinearOperator,
    x0: &DVector<f64>,
    h: f64,
    tol: f64,
    maxit: usize,
) -> Result<(DVector<f64>, KrylovReport)> {
    cayley_arnoldi_with(j_tilde, x0, h, tol, maxit, CayleyArnoldiOptions::default())
}

pub fn cayley_arnoldi_with(
    j_tilde: &dyn LinearOperator,
    x0: &DVector<f64>,
    h: f64,
    tol: f64,
    maxit: usize,
    opts: CayleyArnoldiOptions,
) -> Result<(DVector<f64>, KrylovReport)> {
    let n = j_tilde.dim();
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "start vector has length {}, operator dimension is {n}",
            x0.len()
        )));
    }
    if !j_tilde.properties().skew_symmetric {
        return Err(Error::InvalidArgument(
            "cayley_arnoldi requires an operator flagged skew-symmetric".into(),
        ));
    }
    if maxit == 0 {
        return Err(Error::InvalidArgument("cayley_arnoldi: maxit must be >= 1".into()));
    }
    let beta0 = x0.norm();
    if beta0 == 0.0 {
        return Err(Error::InvalidArgument(
            "cayley_arnoldi: start vector must be nonzero".into(),
        ));
    }

    let half = 0.5 * h;
    let rhs = x0 + j_tilde.apply(x0) * half;
    let rhs_norm = rhs.norm();

    let mut report = KrylovReport::new(opts.keep_iterates);
    let mut lanczos = SkewLanczos::new(j_tilde, x0 / beta0, opts.reorthogonalize);

    let mut last = x0.clone();
    for k in 1..=maxit {
        // Small Cayley solve: (I - (h/2)T_k) y = (I + (h/2)T_k) β₀e₁.
        let t = lanczos.projected(k);
        let lhs_small = DMatrix::identity(k, k) - &t * half;
        let mut rhs_small = DVector::zeros(k);
        rhs_small[0] = beta0;
        rhs_small += &t * {
            let mut e1 = DVector::zeros(k);
            e1[0] = beta0;
            e1 * half
        };
        let y = lhs_small
            .lu()
            .solve(&rhs_small)
            .ok_or(Error::KrylovBreakdown {
                iteration: k,
                residual: f64::NAN,
            })?;

        let mut x = DVector::zeros(n);
        for (j, v) in lanczos.basis.iter().take(k).enumerate() {
            x.axpy(y[j], v, 1.0);
        }

        let residual = (&rhs - (&x - j_tilde.apply(&x) * half)).norm();
        report.record(residual, &x);
        last = x;

        if residual <= tol * rhs_norm {
            report.converged = true;
            return Ok((last, report));
        }

        if k < maxit && !lanczos.extend() {
            // Krylov space exhausted: the projected problem is exact.
            if residual <= (tol * rhs_norm).max(1e-12 * rhs_norm) {
                report.converged = true;
                return Ok((last, report));
            }
            return Err(Error::KrylovBreakdown {
                iteration: k,
                residual,
            });
        }
    }

    Ok((last, report))
}

// ---------------------------------------------------------------------------
// Extreme-eigenvalue estimation for skew operators
// ---------------------------------------------------------------------------

/// Estimates the spectral radius of a skew-symmetric operator, i.e. the
/// largest `|ω|` among its eigenvalues `±iω`, by a Krylov (power-type)
/// iteration on the symmetric PSD operator `J̃ᵀJ̃ = -J̃²`.
pub fn estimate_skew_spectral_radius(op: &dyn LinearOperator, maxit: usize) -> f64 {
    use rand::prelude::*;
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let start = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let start_norm = start.norm();

    // Symmetric Lanczos on S = -J̃² with full reorthogonalization.
    let mut basis: Vec<DVector<f64>> = vec![start / start_norm];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut prev_estimate = 0.0f64;
    let kmax = maxit.min(n);
    for k in 0..kmax {
        let v = &basis[k];
        let mut w = -op.apply(&op.apply(v));
        let alpha = v.dot(&w);
        alphas.push(alpha);
        w.axpy(-alpha, v, 1.0);
        if k > 0 {
            let beta_prev = betas[k - 1];
            let prev = basis[k - 1].clone();
            w.axpy(-beta_prev, &prev, 1.0);
        }
        for v in &basis {
            let c = v.dot(&w);
            w.axpy(-c, v, 1.0);
        }
        let beta = w.norm();

        // Ritz estimate every few steps; stop once it stagnates.
        if k % 5 == 4 || beta <= 1e-300 || k + 1 == kmax {
            let m = alphas.len();
            let mut t = DMatrix::zeros(m, m);
            for i in 0..m {
                t[(i, i)] = alphas[i];
                if i + 1 < m {
                    t[(i, i + 1)] = betas[i];
                    t[(i + 1, i)] = betas[i];
                }
            }
            let lam_max = t
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .max(0.0);
            let estimate = lam_max.sqrt();
            if beta <= 1e-300 {
                return estimate;
            }
            if (estimate - prev_estimate).abs() <= 1e-12 * estimate.max(1e-300) {
                return estimate;
            }
            prev_estimate = estimate;
        }

        betas.push(beta);
        basis.push(w / beta);
    }
    prev_estimate
}
