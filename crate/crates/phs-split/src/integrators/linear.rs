//! Substep solvers for linear systems in transformed coordinates (`Q̃ = I`).
//!
//! The conservative midpoint update is the Cayley-transform system
//! `(I - (h/2)J̃) x̃₁ = (I + (h/2)J̃) x̃₀`; the dissipative one has the SPD
//! iteration matrix `I + (τ/2)R̃` for substep length `τ`. Exact flows via the
//! dense matrix exponential serve both as substep integrators and as
//! reference oracles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{
    cayley_arnoldi, gmres, FnOperator, KrylovReport, LinearOperator, OperatorProperties,
};
use crate::phs::{InputSignal, QuadraticPHSystem};
use crate::quadrature;

/// Largest dimension for dense matrix exponentials and direct solves.
pub const DENSE_FLOW_LIMIT: usize = 2000;

/// Which linear solver backs the conservative midpoint update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearSolverChoice {
    Direct,
    Gmres {
        #[serde(default = "default_solver_tol")]
        tol: f64,
        #[serde(default = "default_solver_maxit")]
        maxit: usize,
    },
    CayleyArnoldi {
        #[serde(default = "default_solver_tol")]
        tol: f64,
        #[serde(default = "default_solver_maxit")]
        maxit: usize,
    },
}

fn default_solver_tol() -> f64 {
    1e-10
}

fn default_solver_maxit() -> usize {
    500
}

impl Default for LinearSolverChoice {
    fn default() -> Self {
        LinearSolverChoice::Direct
    }
}

/// Solves the conservative midpoint system for one step of size `h`.
///
/// With the Cayley route the result has `‖x̃₁‖ = ‖x̃₀‖` to machine precision.
/// The report is returned for the iterative routes.
pub fn midpoint_conservative_linear(
    j_tilde: &dyn LinearOperator,
    x0: &DVector<f64>,
    h: f64,
    solver: &LinearSolverChoice,
) -> Result<(DVector<f64>, Option<KrylovReport>)> {
    let n = j_tilde.dim();
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "state has length {}, operator dimension is {n}",
            x0.len()
        )));
    }
    if x0.norm() == 0.0 {
        return Ok((DVector::zeros(n), None));
    }
    let half = 0.5 * h;
    match solver {
        LinearSolverChoice::Direct => {
            let dense = j_tilde.as_dense().ok_or(Error::NoDenseForm)?;
            let lhs = DMatrix::identity(n, n) - dense * half;
            let rhs = x0 + dense * x0 * half;
            let x1 = lhs.lu().solve(&rhs).ok_or(Error::InvalidArgument(
                "midpoint iteration matrix is singular".into(),
            ))?;
            Ok((x1, None))
        }
        LinearSolverChoice::Gmres { tol, maxit } => {
            let shifted = FnOperator::new(n, OperatorProperties::GENERAL, |v: &DVector<f64>| {
                v - j_tilde.apply(v) * half
            });
            let rhs = x0 + j_tilde.apply(x0) * half;
            let (x1, report) = gmres(&shifted, &rhs, *tol, *maxit)?;
            if !report.converged {
                return Err(Error::DidNotConverge {
                    method: "gmres",
                    iterations: report.iterations,
                    residual: report.residual_norms.last().copied().unwrap_or(f64::NAN),
                });
            }
            Ok((x1, Some(report)))
        }
        LinearSolverChoice::CayleyArnoldi { tol, maxit } => {
            let (x1, report) = cayley_arnoldi(j_tilde, x0, h, *tol, *maxit)?;
            if !report.converged {
                return Err(Error::DidNotConverge {
                    method: "cayley_arnoldi",
                    iterations: report.iterations,
                    residual: report.residual_norms.last().copied().unwrap_or(f64::NAN),
                });
            }
            Ok((x1, Some(report)))
        }
    }
}

/// Solves the dissipative midpoint system for one substep of length
/// `h_half` (the `h/2` of the surrounding Strang step):
/// `(I + (h_half/2) R̃) x̃₁ = (I - (h_half/2) R̃) x̃₀ + h_half · B̃ · (u₀+u₁)/2`.
///
/// The iteration matrix is SPD for PSD `R̃`, so a Cholesky solve applies.
pub fn midpoint_dissipative_linear(
    sys_t: &QuadraticPHSystem,
    x0: &DVector<f64>,
    h_half: f64,
    u0: &DVector<f64>,
    u1: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = sys_t.state_dim();
    if !(h_half > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dissipative substep length must be positive, got {h_half}"
        )));
    }
    if n > DENSE_FLOW_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_FLOW_LIMIT,
        });
    }
    let quarter = 0.5 * h_half;
    let r = sys_t.r();
    let lhs = DMatrix::identity(n, n) + r * quarter;
    let mut rhs = x0 - r * x0 * quarter;
    if sys_t.port_dim() > 0 {
        rhs += sys_t.b() * ((u0 + u1) * (0.5 * h_half));
    }
    // PSD R̃ makes I + (h/4)R̃ positive definite; failure means R̃ was not PSD.
    let chol = lhs.cholesky().ok_or(Error::NotPositiveDefinite {
        min_eig: f64::NAN,
    })?;
    Ok(chol.solve(&rhs))
}

/// Which part of the split right-hand side a flow advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowPart {
    Conservative,
    Dissipative,
    Full,
}

/// Exact flow of a linear part over `[t0, t0 + h]` via the dense matrix
/// exponential, plus the variation-of-constants integral for inputs,
/// approximated with Gauss-Legendre quadrature (`quad_nodes` nodes).
///
/// Negative `h` is accepted; the exponential is exact for any step. Rejects
/// `n > 2000` (use an iterative substep there instead).
pub fn exact_linear_flow(
    sys: &QuadraticPHSystem,
    x0: &DVector<f64>,
    t0: f64,
    h: f64,
    part: FlowPart,
    u: &InputSignal,
    quad_nodes: usize,
) -> Result<DVector<f64>> {
    let n = sys.state_dim();
    if n > DENSE_FLOW_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_FLOW_LIMIT,
        });
    }
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "state has length {}, system dimension is {n}",
            x0.len()
        )));
    }
    if h == 0.0 {
        return Ok(x0.clone());
    }
    let a = match part {
        FlowPart::Conservative => sys.j() * sys.q(),
        FlowPart::Dissipative => -(sys.r() * sys.q()),
        FlowPart::Full => (sys.j() - sys.r()) * sys.q(),
    };
    let mut x1 = (a.clone() * h).exp() * x0;
    // The conservative flow never sees the input (frozen clock).
    if part != FlowPart::Conservative && sys.port_dim() > 0 {
        let (taus, ws) = quadrature::gauss_legendre_on(quad_nodes, 0.0, h);
        for (tau, w) in taus.iter().zip(&ws) {
            let propagator = (a.clone() * (h - tau)).exp();
            x1 += propagator * (sys.b() * u.at(t0 + tau)) * *w;
        }
    }
    Ok(x1)
}

// ---------------------------------------------------------------------------
// Multirate nesting and high-order composition
// ---------------------------------------------------------------------------

/// Inner scheme of the nested conservative integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerScheme {
    /// One Cayley/midpoint application per micro step (the discrete gradient
    /// method on a linear system).
    DiscreteGradient,
    Exact,
    Composition4,
}

/// Nested integration of the conservative flow: `m` micro steps of `h/m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultirateConfig {
    pub m: usize,
    #[serde(default = "default_inner_scheme")]
    pub inner_scheme: InnerScheme,
}

fn default_inner_scheme() -> InnerScheme {
    InnerScheme::DiscreteGradient
}

impl Default for MultirateConfig {
    fn default() -> Self {
        Self {
            m: 8,
            inner_scheme: InnerScheme::DiscreteGradient,
        }
    }
}

/// Replaces one conservative step of size `h` by `m` steps of size `h/m`.
/// Each micro step is norm-preserving, so the whole composition is. Requires
/// a dense operator (direct micro solves).
pub fn nested_multirate_conservative(
    j_tilde: &dyn LinearOperator,
    x0: &DVector<f64>,
    h: f64,
    cfg: &MultirateConfig,
) -> Result<DVector<f64>> {
    if cfg.m == 0 {
        return Err(Error::InvalidArgument(
            "multirate micro-step count must be >= 1".into(),
        ));
    }
    let micro = h / cfg.m as f64;
    let mut x = x0.clone();
    match cfg.inner_scheme {
        InnerScheme::DiscreteGradient => {
            // Same iteration matrix for every micro step; factor once.
            let n = j_tilde.dim();
            let dense = j_tilde.as_dense().ok_or(Error::NoDenseForm)?;
            let lhs = (DMatrix::identity(n, n) - dense * (0.5 * micro)).lu();
            for i in 0..cfg.m {
                let rhs = &x + dense * &x * (0.5 * micro);
                x = lhs.solve(&rhs).ok_or(Error::MicroStepFailed {
                    index: i,
                    source: Box::new(Error::InvalidArgument(
                        "micro midpoint matrix is singular".into(),
                    )),
                })?;
            }
        }
        InnerScheme::Exact => {
            let dense = j_tilde.as_dense().ok_or(Error::NoDenseForm)?;
            let propagator = (dense.clone() * micro).exp();
            for _ in 0..cfg.m {
                x = &propagator * x;
            }
        }
        InnerScheme::Composition4 => {
            for i in 0..cfg.m {
                x = composition4_conservative(j_tilde, &x, micro).map_err(|e| {
                    Error::MicroStepFailed {
                        index: i,
                        source: Box::new(e),
                    }
                })?;
            }
        }
    }
    Ok(x)
}

/// Triple-jump composition coefficients `(γ₁, γ₂)` with
/// `γ₁ = 1/(2 - 2^{1/3})`, `γ₂ = 1 - 2γ₁ < 0`.
pub fn triple_jump_coefficients() -> (f64, f64) {
    let gamma1 = 1.0 / (2.0 - 2.0f64.powf(1.0 / 3.0));
    (gamma1, 1.0 - 2.0 * gamma1)
}

/// Order-four conservative step: triple jump of the order-two midpoint step
/// with step sizes `γ₁h, γ₂h, γ₁h`. The inner negative step is admissible
/// here because the conservative flow is reversible and `R` plays no role.
/// Each substep is exactly norm-preserving.
pub fn composition4_conservative(
    j_tilde: &dyn LinearOperator,
    x0: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let (gamma1, gamma2) = triple_jump_coefficients();
    let mut x = x0.clone();
    for factor in [gamma1, gamma2, gamma1] {
        let (next, _) =
            midpoint_conservative_linear(j_tilde, &x, factor * h, &LinearSolverChoice::Direct)?;
        x = next;
    }
    Ok(x)
}
