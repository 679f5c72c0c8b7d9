//! Strang splitting driver over the port-Hamiltonian decomposition
//! `f₁ = J∇H` (conservative) and `f₂ = -R∇H + Bu` (dissipative).
//!
//! The driver composes two subflow solvers symmetrically, `outer(h/2) ∘
//! inner(h) ∘ outer(h/2)`, and keeps the time-augmentation bookkeeping
//! honest: the clock `s` advances only inside dissipative substeps, so the
//! input signal is never evaluated while the conservative flow runs.

use std::fmt;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::phs::{
    EnergyBalance, InputSignal, PhSystem, State, StepResult, TimeAugmentedState,
};

/// Which split flow a solver advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubflowKind {
    /// `x' = J∇H`, clock frozen (`s' = 0`).
    Conservative,
    /// `x' = -R∇H + Bu(s)`, clock running (`s' = 1`).
    Dissipative,
}

impl SubflowKind {
    pub fn label(&self) -> &'static str {
        match self {
            SubflowKind::Conservative => "conservative",
            SubflowKind::Dissipative => "dissipative",
        }
    }
}

/// One-substep integrator for a split flow.
///
/// Contract: a conservative solver must return a state whose time equals the
/// input clock (`s` unchanged); a dissipative solver must advance it by
/// exactly `h`. The returned ledger covers just this substep.
pub trait SubflowSolver<S: PhSystem + ?Sized>: Send + Sync {
    fn kind(&self) -> SubflowKind;

    fn advance(
        &self,
        sys: &S,
        state: &TimeAugmentedState,
        h: f64,
        u: &InputSignal,
    ) -> Result<StepResult>;
}

/// Substep ordering of the symmetric composition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SubstepOrdering {
    /// Dissipative half-steps outside, conservative full step inside.
    /// This is the ordering whose discrete dissipativity is exact.
    #[default]
    DissipativeOuter,
    /// Reversed ordering, available for experiments.
    ConservativeOuter,
}

/// Symmetric Strang composition of a dissipative and a conservative solver.
pub struct StrangScheme<S: PhSystem + ?Sized> {
    dissipative: Box<dyn SubflowSolver<S>>,
    conservative: Box<dyn SubflowSolver<S>>,
    ordering: SubstepOrdering,
}

impl<S: PhSystem + ?Sized> StrangScheme<S> {
    pub fn new(
        dissipative: Box<dyn SubflowSolver<S>>,
        conservative: Box<dyn SubflowSolver<S>>,
    ) -> Result<Self> {
        if dissipative.kind() != SubflowKind::Dissipative {
            return Err(Error::InvalidArgument(
                "first solver must advance the dissipative flow".into(),
            ));
        }
        if conservative.kind() != SubflowKind::Conservative {
            return Err(Error::InvalidArgument(
                "second solver must advance the conservative flow".into(),
            ));
        }
        Ok(Self {
            dissipative,
            conservative,
            ordering: SubstepOrdering::default(),
        })
    }

    pub fn with_ordering(mut self, ordering: SubstepOrdering) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn ordering(&self) -> SubstepOrdering {
        self.ordering
    }
}

fn as_augmented(result: &StepResult) -> TimeAugmentedState {
    TimeAugmentedState::new(result.state.x.clone(), result.state.t)
}

/// One macro step of the Strang composition.
///
/// Executes outer(h/2), inner(h), outer(h/2); the clock advances by exactly
/// `h` in total (normalized bit-exactly on return). The returned output is
/// the pointwise `y = Bᵀ∇H` at the final state; the ledger is the sum of the
/// three substep ledgers. Negative `h` is accepted for
/// reversibility/adjoint experiments with solvers that support it.
pub fn strang_step<S: PhSystem + ?Sized>(
    scheme: &StrangScheme<S>,
    sys: &S,
    state: &TimeAugmentedState,
    u: &InputSignal,
    h: f64,
) -> Result<StepResult> {
    if h == 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be nonzero and finite, got {h}"
        )));
    }
    let (outer, inner) = match scheme.ordering {
        SubstepOrdering::DissipativeOuter => (&scheme.dissipative, &scheme.conservative),
        SubstepOrdering::ConservativeOuter => (&scheme.conservative, &scheme.dissipative),
    };

    let substep = |solver: &Box<dyn SubflowSolver<S>>,
                   st: &TimeAugmentedState,
                   step: f64,
                   index: usize|
     -> Result<StepResult> {
        solver.advance(sys, st, step, u).map_err(|e| Error::SubstepFailed {
            index,
            kind: solver.kind().label(),
            source: Box::new(e),
        })
    };

    let first = substep(outer, state, 0.5 * h, 0)?;
    let second = substep(inner, &as_augmented(&first), h, 1)?;
    let third = substep(outer, &as_augmented(&second), 0.5 * h, 2)?;

    let mut energy = EnergyBalance::default();
    energy.accumulate(first.energy);
    energy.accumulate(second.energy);
    energy.accumulate(third.energy);

    let x = third.state.x;
    let output = sys.output(&x);
    let hamiltonian = sys.hamiltonian(&x);
    Ok(StepResult {
        // Clock normalization: s₀ + h/2 + h/2 can differ from s₀ + h by one
        // ulp; pin the macro-step clock.
        state: State::new(x, state.s + h),
        output,
        hamiltonian,
        energy,
    })
}

/// Splits the right-hand side at `(x, t)` into the energy-preserving part
/// `f₁ = J(x)∇H(x)` and the dissipative energy-coupling part
/// `f₂ = -R(x)∇H(x) + B(x)u(t)`.
pub fn split_rhs<S: PhSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    t: f64,
    u: &InputSignal,
) -> (DVector<f64>, DVector<f64>) {
    let grad = sys.grad_hamiltonian(x);
    let f1 = sys.j_at(x) * &grad;
    let mut f2 = -(sys.r_at(x) * &grad);
    if sys.port_dim() > 0 {
        f2 += sys.b_at(x) * u.at(t);
    }
    (f1, f2)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Recorded trajectory: the initial snapshot followed by one [`StepResult`]
/// per macro step. Ledger entries are per-step; sums give the cumulative
/// ledger.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<StepResult>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        &self.steps.last().expect("trajectory is never empty").state
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn cumulative_energy(&self) -> EnergyBalance {
        let mut total = EnergyBalance::default();
        for s in &self.steps {
            total.accumulate(s.energy);
        }
        total
    }

    /// Writes `t,x_1..x_n,H,y_1..y_d,dissipated,supplied` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n = self.steps[0].state.x.len();
        let d = self.steps[0].output.len();
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x_{i}"));
        }
        header.push_str(",H");
        for i in 1..=d {
            header.push_str(&format!(",y_{i}"));
        }
        header.push_str(",dissipated,supplied");
        writeln!(w, "{header}")?;
        for s in &self.steps {
            let mut row = format!("{}", s.state.t);
            for v in s.state.x.iter() {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{}", s.hamiltonian));
            for v in s.output.iter() {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{},{}", s.energy.dissipated, s.energy.supplied));
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Integration aborted mid-trajectory; carries the completed prefix.
#[derive(Debug)]
pub struct IntegrationAbort {
    pub step_index: usize,
    pub error: Error,
    pub partial: Trajectory,
}

impl fmt::Display for IntegrationAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "integration aborted at step {} after {} recorded states: {}",
            self.step_index,
            self.partial.len(),
            self.error
        )
    }
}

impl std::error::Error for IntegrationAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Integrates from `t0` to exactly `t_end` with macro step `h`, repeating
/// [`strang_step`]. If `h` does not divide the interval (within `1e-12`
/// relative), the final step is shortened so the last recorded time equals
/// `t_end` exactly.
pub fn integrate<S: PhSystem + ?Sized>(
    scheme: &StrangScheme<S>,
    sys: &S,
    x0: &DVector<f64>,
    t0: f64,
    t_end: f64,
    h: f64,
    u: &InputSignal,
) -> std::result::Result<Trajectory, IntegrationAbort> {
    let bail = |error: Error| IntegrationAbort {
        step_index: 0,
        error,
        partial: Trajectory {
            steps: vec![StepResult::snapshot(sys, State::new(x0.clone(), t0))],
        },
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(bail(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {h}"
        ))));
    }
    if t_end < t0 {
        return Err(bail(Error::InvalidArgument(format!(
            "t_end = {t_end} must not precede t0 = {t0}"
        ))));
    }

    let span = t_end - t0;
    let raw_steps = span / h;
    let mut full_steps = raw_steps.floor() as usize;
    // Snap to an integer count when h divides the interval within 1e-12.
    if (raw_steps - raw_steps.round()).abs() <= 1e-12 * raw_steps.max(1.0) {
        full_steps = raw_steps.round() as usize;
    }
    let remainder = span - full_steps as f64 * h;
    let tail = if remainder > 1e-12 * span.max(h) {
        Some(remainder)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(full_steps + 2);
    steps.push(StepResult::snapshot(sys, State::new(x0.clone(), t0)));

    let mut current = TimeAugmentedState::new(x0.clone(), t0);
    for i in 0..full_steps {
        match strang_step(scheme, sys, &current, u, h) {
            Ok(mut result) => {
                // Pin the grid time to avoid accumulation drift.
                result.state.t = if i + 1 == full_steps && tail.is_none() {
                    t_end
                } else {
                    t0 + (i + 1) as f64 * h
                };
                current = as_augmented(&result);
                steps.push(result);
            }
            Err(error) => {
                return Err(IntegrationAbort {
                    step_index: i,
                    error,
                    partial: Trajectory { steps },
                });
            }
        }
    }

    if let Some(h_last) = tail {
        match strang_step(scheme, sys, &current, u, h_last) {
            Ok(mut result) => {
                result.state.t = t_end;
                steps.push(result);
            }
            Err(error) => {
                return Err(IntegrationAbort {
                    step_index: full_steps,
                    error,
                    partial: Trajectory { steps },
                });
            }
        }
    }

    Ok(Trajectory { steps })
}
