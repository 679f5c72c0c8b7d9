//! Substep integrators for the split flows: discrete-gradient (average
//! vector field) steps with Newton iteration, exact linear flows, and the
//! multirate / high-order conservative compositions.
//!
//! The discrete gradient method solves the implicit relation
//!
//! ```text
//! (x₁ - x₀)/h = (J̄ - R̄) ∇̄H(x₀, x₁) + B̄ ū,      y₁ = B̄ᵀ ∇̄H(x₀, x₁)
//! ```
//!
//! with structure matrices frozen at the midpoint `(x₀+x₁)/2` and
//! `ū = (u(t₀)+u(t₁))/2`. By the secant property of `∇̄H` the discrete energy
//! identity `H(x₁) - H(x₀) = -h ∇̄HᵀR̄∇̄H + h y₁ᵀū` holds to Newton tolerance,
//! which is what makes the ledger entries of these steps trustworthy.

pub mod linear;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phs::{EnergyBalance, InputSignal, PhSystem, QuadraticPHSystem, State, StepResult};
use crate::quadrature;
use crate::splitting::{SubflowKind, SubflowSolver};

pub use linear::{
    composition4_conservative, exact_linear_flow, midpoint_conservative_linear,
    midpoint_dissipative_linear, nested_multirate_conservative, triple_jump_coefficients,
    FlowPart, InnerScheme, LinearSolverChoice, MultirateConfig, DENSE_FLOW_LIMIT,
};

/// Rule for the input average `ū(t₀, t₁)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputAverageRule {
    /// `ū = (u(t₀) + u(t₁))/2`; second order and compatible
    /// (`ū(t₀, t₀) = u(t₀)`).
    #[default]
    EndpointMean,
}

/// Configuration of the discrete-gradient Newton step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiscreteGradientStepConfig {
    /// Residual tolerance base; the effective per-step tolerance is
    /// `newton_tol · (1 + ‖x₀‖)`, measured on `‖(x₁-x₀)/h - rhs‖₂`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Gauss-Legendre nodes for the AVF integral on nonlinear Hamiltonians.
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub input_average: InputAverageRule,
}

impl Default for DiscreteGradientStepConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            newton_max_iter: 25,
            quadrature_nodes: 3,
            input_average: InputAverageRule::EndpointMean,
        }
    }
}

/// Converged discrete-gradient step data.
#[derive(Clone, Debug)]
pub struct DgStepOutcome {
    pub x1: DVector<f64>,
    /// Discrete output `y₁ = B̄ᵀ∇̄H(x₀, x₁)`.
    pub y1: DVector<f64>,
    pub energy: EnergyBalance,
    pub newton_iterations: usize,
    pub newton_residual: f64,
}

fn dg_rhs<S: PhSystem + ?Sized>(
    sys: &S,
    part: FlowPart,
    mid: &DVector<f64>,
    gbar: &DVector<f64>,
    u_avg: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut rhs = match part {
        FlowPart::Conservative => sys.j_at(mid) * gbar,
        FlowPart::Dissipative => -(sys.r_at(mid) * gbar),
        FlowPart::Full => (sys.j_at(mid) - sys.r_at(mid)) * gbar,
    };
    if part != FlowPart::Conservative {
        if let Some(u_avg) = u_avg {
            rhs += sys.b_at(mid) * u_avg;
        }
    }
    rhs
}

/// Solves the discrete-gradient relation for one step of the chosen part.
///
/// Steps touching `R` or `u` (dissipative, full) require `h > 0`; the
/// conservative part also accepts negative steps, which the triple-jump
/// composition needs.
pub fn dg_solve<S: PhSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    t0: f64,
    h: f64,
    u: &InputSignal,
    cfg: &DiscreteGradientStepConfig,
    part: FlowPart,
) -> Result<DgStepOutcome> {
    if part == FlowPart::Conservative {
        if h == 0.0 || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be nonzero and finite, got {h}"
            )));
        }
    } else if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "discrete-gradient steps through R or u require h > 0, got {h}"
        )));
    }
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "state has length {}, system dimension is {n}",
            x0.len()
        )));
    }

    let u_avg = if part != FlowPart::Conservative && sys.port_dim() > 0 {
        let InputAverageRule::EndpointMean = cfg.input_average;
        Some((u.at(t0) + u.at(t0 + h)) * 0.5)
    } else {
        None
    };

    let residual = |x1: &DVector<f64>| -> DVector<f64> {
        let mid = (x0 + x1) * 0.5;
        let gbar = sys.discrete_gradient(x0, x1, cfg.quadrature_nodes);
        let rhs = dg_rhs(sys, part, &mid, &gbar, u_avg.as_ref());
        (x1 - x0) / h - rhs
    };

    // Analytic Newton matrix for quadratic systems (constant structure
    // matrices, ∂∇̄H/∂x₁ = Q/2); finite differences otherwise.
    let analytic_jacobian = sys.as_quadratic().map(|qsys| {
        let m = match part {
            FlowPart::Conservative => qsys.j().clone(),
            FlowPart::Dissipative => -qsys.r().clone(),
            FlowPart::Full => qsys.j() - qsys.r(),
        };
        DMatrix::identity(n, n) / h - m * qsys.q() * 0.5
    });

    let fd_jacobian = |x1: &DVector<f64>, f0: &DVector<f64>| -> DMatrix<f64> {
        let delta = 1e-7 * (1.0 + x1.amax());
        let mut jac = DMatrix::zeros(n, n);
        for col in 0..n {
            let mut probe = x1.clone();
            probe[col] += delta;
            let f1 = residual(&probe);
            jac.set_column(col, &((f1 - f0) / delta));
        }
        jac
    };

    let tol_eff = cfg.newton_tol * (1.0 + x0.norm());

    // Explicit-Euler predictor.
    let mut x1 = {
        let gbar0 = sys.grad_hamiltonian(x0);
        let rhs0 = dg_rhs(sys, part, x0, &gbar0, u_avg.as_ref());
        x0 + rhs0 * h
    };

    let mut res = residual(&x1);
    let mut res_norm = res.norm();
    let mut iterations = 0;
    while res_norm > tol_eff {
        if iterations >= cfg.newton_max_iter {
            return Err(Error::NewtonNonConvergence {
                iterations,
                residual: res_norm,
            });
        }
        let jac = match &analytic_jacobian {
            Some(j) => j.clone(),
            None => fd_jacobian(&x1, &res),
        };
        let delta = jac.lu().solve(&res).ok_or_else(|| Error::InvalidArgument(
            "singular Newton matrix in discrete-gradient step".into(),
        ))?;
        x1 -= delta;
        res = residual(&x1);
        res_norm = res.norm();
        iterations += 1;
    }

    let mid = (x0 + &x1) * 0.5;
    let gbar = sys.discrete_gradient(x0, &x1, cfg.quadrature_nodes);
    let y1 = sys.b_at(&mid).transpose() * &gbar;
    let energy = match part {
        FlowPart::Conservative => EnergyBalance::default(),
        _ => {
            let dissipated = h * gbar.dot(&(sys.r_at(&mid) * &gbar));
            let supplied = match &u_avg {
                Some(u_avg) => h * y1.dot(u_avg),
                None => 0.0,
            };
            EnergyBalance {
                dissipated,
                supplied,
            }
        }
    };

    Ok(DgStepOutcome {
        x1,
        y1,
        energy,
        newton_iterations: iterations,
        newton_residual: res_norm,
    })
}

/// One discrete-gradient step of the full (unsplit) port-Hamiltonian system.
pub fn discrete_gradient_step<S: PhSystem + ?Sized>(
    sys: &S,
    state: &State,
    h: f64,
    u: &InputSignal,
    cfg: &DiscreteGradientStepConfig,
) -> Result<StepResult> {
    let outcome = dg_solve(sys, &state.x, state.t, h, u, cfg, FlowPart::Full)?;
    let hamiltonian = sys.hamiltonian(&outcome.x1);
    Ok(StepResult {
        state: State::new(outcome.x1, state.t + h),
        output: outcome.y1,
        hamiltonian,
        energy: outcome.energy,
    })
}

// ---------------------------------------------------------------------------
// Subflow solvers for the Strang driver
// ---------------------------------------------------------------------------

use crate::phs::TimeAugmentedState;

/// Discrete-gradient solver for the conservative flow (`x' = J∇H`, clock
/// frozen). Reduces to the implicit midpoint rule on linear systems.
#[derive(Clone, Debug, Default)]
pub struct DgConservative {
    pub cfg: DiscreteGradientStepConfig,
}

impl<S: PhSystem + ?Sized> SubflowSolver<S> for DgConservative {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Conservative
    }

    fn advance(
        &self,
        sys: &S,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let outcome = dg_solve(sys, &state.x, state.s, h, u, &self.cfg, FlowPart::Conservative)?;
        let hamiltonian = sys.hamiltonian(&outcome.x1);
        Ok(StepResult {
            state: State::new(outcome.x1, state.s),
            output: outcome.y1,
            hamiltonian,
            energy: outcome.energy,
        })
    }
}

/// Discrete-gradient solver for the dissipative flow
/// (`x' = -R∇H + Bu(s)`, clock running).
#[derive(Clone, Debug, Default)]
pub struct DgDissipative {
    pub cfg: DiscreteGradientStepConfig,
}

impl<S: PhSystem + ?Sized> SubflowSolver<S> for DgDissipative {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Dissipative
    }

    fn advance(
        &self,
        sys: &S,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let outcome = dg_solve(sys, &state.x, state.s, h, u, &self.cfg, FlowPart::Dissipative)?;
        let hamiltonian = sys.hamiltonian(&outcome.x1);
        Ok(StepResult {
            state: State::new(outcome.x1, state.s + h),
            output: outcome.y1,
            hamiltonian,
            energy: outcome.energy,
        })
    }
}

/// Exact conservative flow `exp(h·JQ)` of a linear system (dense).
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactConservative;

impl SubflowSolver<QuadraticPHSystem> for ExactConservative {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Conservative
    }

    fn advance(
        &self,
        sys: &QuadraticPHSystem,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let x1 = exact_linear_flow(sys, &state.x, state.s, h, FlowPart::Conservative, u, 1)?;
        Ok(StepResult {
            output: sys.output(&x1),
            hamiltonian: sys.hamiltonian(&x1),
            state: State::new(x1, state.s),
            energy: EnergyBalance::default(),
        })
    }
}

/// Exact dissipative flow of a linear system, including the
/// variation-of-constants input integral.
#[derive(Clone, Copy, Debug)]
pub struct ExactDissipative {
    /// Gauss-Legendre nodes for the input and supplied-energy integrals.
    pub quad_nodes: usize,
}

impl Default for ExactDissipative {
    fn default() -> Self {
        Self { quad_nodes: 6 }
    }
}

impl SubflowSolver<QuadraticPHSystem> for ExactDissipative {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Dissipative
    }

    fn advance(
        &self,
        sys: &QuadraticPHSystem,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let h_before = sys.hamiltonian(&state.x);
        let x1 = exact_linear_flow(sys, &state.x, state.s, h, FlowPart::Dissipative, u, self.quad_nodes)?;
        let h_after = sys.hamiltonian(&x1);

        // Supplied energy ∫ yᵀu, same quadrature as the flow itself.
        let supplied = if sys.port_dim() > 0 {
            let (taus, ws) = quadrature::gauss_legendre_on(self.quad_nodes, 0.0, h);
            let mut acc = 0.0;
            for (tau, w) in taus.iter().zip(&ws) {
                let x_tau = exact_linear_flow(
                    sys,
                    &state.x,
                    state.s,
                    *tau,
                    FlowPart::Dissipative,
                    u,
                    self.quad_nodes,
                )?;
                acc += w * sys.output(&x_tau).dot(&u.at(state.s + tau));
            }
            acc
        } else {
            0.0
        };
        // The exact flow balances energy identically; the ledger closes it.
        let dissipated = h_before - h_after + supplied;

        Ok(StepResult {
            output: sys.output(&x1),
            hamiltonian: h_after,
            state: State::new(x1, state.s + h),
            energy: EnergyBalance {
                dissipated,
                supplied,
            },
        })
    }
}

/// Nested multirate integration: `m` micro steps of `h/m` with any
/// conservative inner solver.
pub struct NestedConservative<S: PhSystem + ?Sized> {
    m: usize,
    inner: Box<dyn SubflowSolver<S>>,
}

impl<S: PhSystem + ?Sized> NestedConservative<S> {
    pub fn new(m: usize, inner: Box<dyn SubflowSolver<S>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "multirate micro-step count must be >= 1".into(),
            ));
        }
        if inner.kind() != SubflowKind::Conservative {
            return Err(Error::InvalidArgument(
                "nested multirate integration applies to the conservative flow only".into(),
            ));
        }
        Ok(Self { m, inner })
    }

    pub fn micro_steps(&self) -> usize {
        self.m
    }
}

impl<S: PhSystem + ?Sized> SubflowSolver<S> for NestedConservative<S> {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Conservative
    }

    fn advance(
        &self,
        sys: &S,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let micro = h / self.m as f64;
        let mut current = state.clone();
        let mut last = None;
        for i in 0..self.m {
            let result = self
                .inner
                .advance(sys, &current, micro, u)
                .map_err(|e| Error::MicroStepFailed {
                    index: i,
                    source: Box::new(e),
                })?;
            current = TimeAugmentedState::new(result.state.x.clone(), result.state.t);
            last = Some(result);
        }
        Ok(last.expect("m >= 1"))
    }
}

/// Order-four conservative substep: triple jump of an order-two conservative
/// base solver with steps `γ₁h, γ₂h, γ₁h` (`γ₂ < 0`).
pub struct Composition4Conservative<S: PhSystem + ?Sized> {
    base: Box<dyn SubflowSolver<S>>,
}

impl<S: PhSystem + ?Sized> Composition4Conservative<S> {
    pub fn new(base: Box<dyn SubflowSolver<S>>) -> Result<Self> {
        if base.kind() != SubflowKind::Conservative {
            return Err(Error::InvalidArgument(
                "the triple-jump composition applies to the conservative flow only".into(),
            ));
        }
        Ok(Self { base })
    }
}

impl<S: PhSystem + ?Sized> SubflowSolver<S> for Composition4Conservative<S> {
    fn kind(&self) -> SubflowKind {
        SubflowKind::Conservative
    }

    fn advance(
        &self,
        sys: &S,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult> {
        let (gamma1, gamma2) = triple_jump_coefficients();
        let mut current = state.clone();
        let mut last = None;
        for (i, factor) in [gamma1, gamma2, gamma1].into_iter().enumerate() {
            let result = self
                .base
                .advance(sys, &current, factor * h, u)
                .map_err(|e| Error::MicroStepFailed {
                    index: i,
                    source: Box::new(e),
                })?;
            current = TimeAugmentedState::new(result.state.x.clone(), result.state.t);
            last = Some(result);
        }
        Ok(last.expect("three substeps"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phs::NonlinearPHSystem;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_quadratic(rng: &mut ChaCha8Rng, n: usize, d: usize) -> QuadraticPHSystem {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let j = &a - a.transpose();
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        let r = &g * g.transpose();
        let b = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let q_seed = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        let q = &q_seed * q_seed.transpose() + DMatrix::identity(n, n);
        QuadraticPHSystem::new(j, r, b, q).unwrap()
    }

    fn quartic_scalar_system() -> NonlinearPHSystem {
        // H(x) = x⁴ in one dimension; J = 0, R = 0.
        NonlinearPHSystem::new(
            1,
            0,
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 1),
            |_| DMatrix::zeros(1, 0),
            |x| x[0].powi(4),
            |x| DVector::from_row_slice(&[4.0 * x[0].powi(3)]),
        )
    }

    #[test]
    fn avf_consistency_condition_for_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let sys = random_quadratic(&mut rng, 4, 0);
        let x = random_vec(&mut rng, 4);
        let gbar = sys.discrete_gradient(&x, &x, 3);
        assert_relative_eq!(gbar, sys.grad_hamiltonian(&x), epsilon = 1e-14);
    }

    #[test]
    fn avf_midpoint_average_identity_weight() {
        let sys = QuadraticPHSystem::closed(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x0 = DVector::zeros(2);
        let x1 = DVector::from_row_slice(&[2.0, 0.0]);
        let gbar = sys.discrete_gradient(&x0, &x1, 3);
        assert_relative_eq!(gbar, DVector::from_row_slice(&[1.0, 0.0]));
    }

    #[test]
    fn avf_secant_condition_exact_for_quartic_with_three_nodes() {
        // Three Gauss nodes integrate the cubic integrand of H = x⁴ exactly:
        // ∇̄H(0, 1)·(1 - 0) must equal H(1) - H(0) = 1.
        let sys = quartic_scalar_system();
        let x0 = DVector::from_row_slice(&[0.0]);
        let x1 = DVector::from_row_slice(&[1.0]);
        let gbar = sys.discrete_gradient(&x0, &x1, 3);
        assert_relative_eq!(gbar[0] * 1.0, 1.0, epsilon = 1e-14);
        // Symbolic oracle: (H(y)-H(x))/(y-x) = y³+y²x+yx²+x³ = 1 here.
        assert_relative_eq!(gbar[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn avf_secant_condition_to_quadrature_accuracy_on_random_points() {
        let sys = quartic_scalar_system();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..50 {
            let x0 = DVector::from_row_slice(&[rng.gen_range(-2.0..2.0)]);
            let x1 = DVector::from_row_slice(&[rng.gen_range(-2.0..2.0)]);
            let gbar = sys.discrete_gradient(&x0, &x1, 3);
            let lhs = gbar.dot(&(&x1 - &x0));
            let rhs = sys.hamiltonian(&x1) - sys.hamiltonian(&x0);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn dg_conservative_preserves_quadratic_hamiltonian() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let sys = random_quadratic(&mut rng, 5, 0);
        let x0 = random_vec(&mut rng, 5);
        let cfg = DiscreteGradientStepConfig::default();
        let u = InputSignal::zero(0);
        let outcome = dg_solve(&sys, &x0, 0.0, 0.21, &u, &cfg, FlowPart::Conservative).unwrap();
        let h0 = sys.hamiltonian(&x0);
        let h1 = sys.hamiltonian(&outcome.x1);
        assert!((h1 - h0).abs() <= 1e-12 * (1.0 + h0.abs()));
    }

    #[test]
    fn dg_dissipative_decreases_energy_for_spd_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let cfg = DiscreteGradientStepConfig::default();
        let u = InputSignal::zero(0);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let r = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            let sys =
                QuadraticPHSystem::closed(DMatrix::zeros(n, n), r, DMatrix::identity(n, n))
                    .unwrap();
            let x0 = random_vec(&mut rng, n) + DVector::repeat(n, 0.1);
            let outcome = dg_solve(&sys, &x0, 0.0, 0.1, &u, &cfg, FlowPart::Dissipative).unwrap();
            assert!(sys.hamiltonian(&outcome.x1) < sys.hamiltonian(&x0));
            assert!(outcome.energy.dissipated > 0.0);
        }
    }

    #[test]
    fn dg_full_step_matches_dense_midpoint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        for _ in 0..20 {
            let n = rng.gen_range(2..7);
            let d = rng.gen_range(0..3);
            let sys = random_quadratic(&mut rng, n, d);
            let x0 = random_vec(&mut rng, n);
            let h = rng.gen_range(0.01..0.3);
            let uvec = random_vec(&mut rng, d);
            let u = InputSignal::constant(uvec.clone());
            let cfg = DiscreteGradientStepConfig::default();
            let result =
                discrete_gradient_step(&sys, &State::new(x0.clone(), 0.0), h, &u, &cfg).unwrap();

            // Oracle: (I - (h/2)(J-R)Q) x1 = (I + (h/2)(J-R)Q) x0 + h·B·ū.
            let a = (sys.j() - sys.r()) * sys.q();
            let lhs = DMatrix::identity(n, n) - &a * (h / 2.0);
            let mut rhs = &x0 + &a * &x0 * (h / 2.0);
            if d > 0 {
                rhs += sys.b() * &uvec * h;
            }
            let oracle = lhs.lu().solve(&rhs).unwrap();
            assert!(
                (result.state.x.clone() - &oracle).norm() <= 1e-12 * oracle.norm().max(1.0),
                "deviation {}",
                (result.state.x.clone() - &oracle).norm()
            );
        }
    }

    #[test]
    fn dg_discrete_dissipativity_identity_holds_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let cfg = DiscreteGradientStepConfig::default();
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(1..3);
            let sys = random_quadratic(&mut rng, n, d);
            let u = InputSignal::from_fn(d, "sin", move |t| {
                DVector::from_fn(d, |i, _| ((i + 1) as f64 * t).sin())
            });
            let x0 = random_vec(&mut rng, n);
            let h = rng.gen_range(0.01..0.2);
            let result =
                discrete_gradient_step(&sys, &State::new(x0.clone(), 0.3), h, &u, &cfg).unwrap();
            let lhs = result.hamiltonian - sys.hamiltonian(&x0);
            let rhs = -result.energy.dissipated + result.energy.supplied;
            let tol = 10.0 * cfg.newton_tol * (1.0 + x0.norm()) * (1.0 + h);
            assert!(
                (lhs - rhs).abs() <= tol.max(1e-12),
                "identity residual {}",
                (lhs - rhs).abs()
            );
        }
    }

    #[test]
    fn dg_rejects_negative_steps_through_r_or_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let sys = random_quadratic(&mut rng, 3, 1);
        let x0 = random_vec(&mut rng, 3);
        let u = InputSignal::zero(1);
        let cfg = DiscreteGradientStepConfig::default();
        assert!(dg_solve(&sys, &x0, 0.0, -0.1, &u, &cfg, FlowPart::Dissipative).is_err());
        assert!(dg_solve(&sys, &x0, 0.0, -0.1, &u, &cfg, FlowPart::Full).is_err());
        // The conservative part accepts negative steps (triple jump needs them).
        assert!(dg_solve(&sys, &x0, 0.0, -0.1, &u, &cfg, FlowPart::Conservative).is_ok());
    }

    #[test]
    fn dg_newton_failure_reports_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let sys = random_quadratic(&mut rng, 3, 0);
        let x0 = random_vec(&mut rng, 3);
        let cfg = DiscreteGradientStepConfig {
            newton_max_iter: 0,
            ..Default::default()
        };
        match dg_solve(&sys, &x0, 0.0, 0.5, &InputSignal::zero(0), &cfg, FlowPart::Full) {
            Err(Error::NewtonNonConvergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected Newton failure, got {other:?}"),
        }
    }

    #[test]
    fn dg_newton_converges_on_nonlinear_pendulum() {
        // Damped pendulum: H = p²/2 + (1 - cos q), R = diag(0, c).
        let sys = NonlinearPHSystem::new(
            2,
            0,
            |_| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            |_| DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 0.3])),
            |_| DMatrix::zeros(2, 0),
            |x| 0.5 * x[1] * x[1] + (1.0 - x[0].cos()),
            |x| DVector::from_row_slice(&[x[0].sin(), x[1]]),
        );
        let cfg = DiscreteGradientStepConfig {
            newton_tol: 1e-11,
            ..Default::default()
        };
        let u = InputSignal::zero(0);
        let mut state = State::new(DVector::from_row_slice(&[2.0, 0.0]), 0.0);
        let mut energies = Vec::new();
        for _ in 0..200 {
            let result = discrete_gradient_step(&sys, &state, 0.05, &u, &cfg).unwrap();
            energies.push(result.hamiltonian);
            state = result.state;
        }
        // Energy must decay monotonically (up to solver tolerance).
        for pair in energies.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
        // And the trajectory stays bounded.
        assert!(state.x.norm() < 10.0);
    }

    #[test]
    fn nested_solver_keeps_clock_frozen_and_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let sys = random_quadratic(&mut rng, 4, 0);
        let x0 = random_vec(&mut rng, 4);
        let u = InputSignal::zero(0);
        let inner = Box::new(DgConservative::default());
        let nested = NestedConservative::new(4, inner).unwrap();
        let state = TimeAugmentedState::new(x0.clone(), 1.5);
        let got = nested.advance(&sys, &state, 0.4, &u).unwrap();
        assert_eq!(got.state.t, 1.5);

        let mut x = x0;
        for _ in 0..4 {
            let outcome = dg_solve(
                &sys,
                &x,
                1.5,
                0.1,
                &u,
                &DiscreteGradientStepConfig::default(),
                FlowPart::Conservative,
            )
            .unwrap();
            x = outcome.x1;
        }
        assert!((got.state.x - x).norm() <= 1e-13);
    }

    #[test]
    fn composition4_solver_requires_conservative_base() {
        let bad = Composition4Conservative::<QuadraticPHSystem>::new(Box::new(
            DgDissipative::default(),
        ));
        assert!(bad.is_err());
    }

    #[test]
    fn conservation_over_ten_thousand_midpoint_steps() {
        // Direct midpoint solves accumulate only roundoff drift in H.
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let sys = random_quadratic(&mut rng, 4, 0);
        let x0 = random_vec(&mut rng, 4);
        let u = InputSignal::zero(0);
        let solver = DgConservative::default();
        let h0 = sys.hamiltonian(&x0);
        let mut state = TimeAugmentedState::new(x0, 0.0);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let result = solver.advance(&sys, &state, 0.05, &u).unwrap();
            worst = worst.max((result.hamiltonian - h0).abs());
            state = TimeAugmentedState::new(result.state.x.clone(), state.s);
        }
        assert!(
            worst <= 1e-9 * h0.abs().max(1.0),
            "worst H drift {worst} over 1e4 steps"
        );
    }
}
