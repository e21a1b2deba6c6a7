//! Two-level interaction-prediction coordination.
//!
//! The lower level synthesises each subsystem's gains against frozen
//! multipliers `δ` and interaction estimates `z`; the upper level simulates
//! the horizon, measures the interaction error and updates `δ`, `z`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fuzzy_model::{blend, LargeScaleSystem, ModelError};
use crate::lmi::{
    synthesize, CoordinationSnapshot, GainSet, SynthesisError, SynthesisHyperparams,
    SynthesisOptions,
};
use crate::simulation::{simulate, DisturbanceModel, SimulationError, SimulationSetup, Trajectory};
use crate::fuzzy_model::{AdmissibilityPolicy, DelaySchedule};

#[derive(Debug, Error, Clone)]
pub enum CoordinationError {
    #[error("trajectory covers {found} steps, horizon needs {expected}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("interaction error did not reach tolerance in {} iterations", .report.iterations_used)]
    NoConvergence {
        report: CoordinationReport,
        best: Option<Box<AlgorithmOutcome>>,
    },
}

/// Multipliers, interaction estimates and co-states over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinationState {
    /// `δ_i(k)`, `k = 0..K`.
    pub delta: Vec<Vec<DVector<f64>>>,
    /// `z_i(k)`, `k = 0..K`.
    pub z: Vec<Vec<DVector<f64>>>,
    /// `p̄_i(k)`, `k = 0..=K`.
    pub p_bar: Vec<Vec<DVector<f64>>>,
    /// Coupling matrix `C_i` multiplying `z_i` in the predicted dynamics.
    pub c: Vec<DMatrix<f64>>,
    pub iteration: usize,
    pub horizon: usize,
}

impl CoordinationState {
    /// All-zero state with `C_i = I`.
    pub fn new(sys: &LargeScaleSystem, horizon: usize) -> Self {
        let dims = sys.state_dims();
        let zeros = |len: usize| -> Vec<Vec<DVector<f64>>> {
            dims.iter().map(|&n| vec![DVector::zeros(n); len]).collect()
        };
        Self {
            delta: zeros(horizon),
            z: zeros(horizon),
            p_bar: zeros(horizon + 1),
            c: dims.iter().map(|&n| DMatrix::identity(n, n)).collect(),
            iteration: 0,
            horizon,
        }
    }

    pub fn with_coupling(mut self, c: Vec<DMatrix<f64>>) -> Result<Self, ModelError> {
        if c.len() != self.c.len() || c.iter().zip(&self.c).any(|(a, b)| a.shape() != b.shape()) {
            return Err(ModelError::DimensionMismatch("coupling matrices C_i".into()));
        }
        self.c = c;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// `δ_j(k)` for all `j` and `z_i(k)`, tagged with the current iteration.
    pub fn snapshot(&self, i: usize, k: usize) -> Result<CoordinationSnapshot, ModelError> {
        if i >= self.len() || k >= self.horizon {
            return Err(ModelError::DimensionMismatch(format!(
                "snapshot ({i}, {k}) outside {} subsystems × horizon {}",
                self.len(),
                self.horizon
            )));
        }
        Ok(CoordinationSnapshot {
            iteration: self.iteration,
            delta: self.delta.iter().map(|d| d[k].clone()).collect(),
            z: self.z[i][k].clone(),
        })
    }

    /// `p̄_i(k) = X̄_i / ς_i` for every `k`.
    pub fn set_costates(&mut self, gains: &GainSet) {
        for (i, p) in self.p_bar.iter_mut().enumerate() {
            let v = if gains.sigma[i] > 0.0 {
                &gains.x_bar[i] / gains.sigma[i]
            } else {
                DVector::zeros(gains.x_bar[i].len())
            };
            p.iter_mut().for_each(|pk| *pk = v.clone());
        }
    }
}

/// Interaction error trace of one run of the outer loop.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct CoordinationReport {
    pub error_per_iteration: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

fn check_horizon(coord: &CoordinationState, traj: &Trajectory) -> Result<(), CoordinationError> {
    if traj.steps < coord.horizon {
        return Err(CoordinationError::HorizonMismatch {
            expected: coord.horizon,
            found: traj.steps,
        });
    }
    Ok(())
}

/// `Σ_{j≠i} f_ij x_j(k)`.
pub fn coupling_input(sys: &LargeScaleSystem, i: usize, x: &[DVector<f64>]) -> DVector<f64> {
    let mut s = DVector::zeros(sys.subsystems[i].state_dim());
    for (&j, f) in &sys.subsystems[i].interconnections {
        s += f * &x[j];
    }
    s
}

/// Stage term of subsystem `i` at step `k` of `traj`, using coordination
/// data of instant `kc`:
/// `xᵀQx + uᵀRu − τdᵀd + δᵀ(z − Σfx) + p̄(kc+1)ᵀ(−x(k+1) + g)`
/// with `g = A_μx + A_dμx_d + B_μu + w_μd + Cz`.
pub fn hamiltonian_stage(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    coord: &CoordinationState,
    traj: &Trajectory,
    i: usize,
    k: usize,
    kc: usize,
) -> Result<f64, ModelError> {
    let x = &traj.states[k][i];
    let u = &traj.inputs[k][i];
    let d = &traj.disturbances[k][i];
    let bl = blend(sys, i, &traj.memberships[k][i])?;
    let z = &coord.z[i][kc];
    let g = &bl.a * x + &bl.a_d * &traj.delayed[k][i] + &bl.b * u + &bl.w * d + &coord.c[i] * z;
    let mismatch = z - coupling_input(sys, i, &traj.states[k]);
    let residual = g - &traj.states[k + 1][i];
    Ok((x.transpose() * &hp.q[i] * x)[(0, 0)] + (u.transpose() * &hp.r[i] * u)[(0, 0)]
        - hp.tau[i] * d.norm_squared()
        + coord.delta[i][kc].dot(&mismatch)
        + coord.p_bar[i][kc + 1].dot(&residual))
}

/// `Σ_i { V_i(x_i(K)) + Σ_{k<K} stage_i(k) }`.
pub fn hamiltonian(
    sys: &LargeScaleSystem,
    gains: &GainSet,
    hp: &SynthesisHyperparams,
    coord: &CoordinationState,
    traj: &Trajectory,
) -> Result<f64, CoordinationError> {
    check_horizon(coord, traj)?;
    let kk = coord.horizon;
    let mut h = 0.0;
    for i in 0..sys.len() {
        let xk = &traj.states[kk][i];
        h += (xk.transpose() * gains.lyapunov(i) * xk)[(0, 0)];
        for k in 0..kk {
            h += hamiltonian_stage(sys, hp, coord, traj, i, k, k)?;
        }
    }
    Ok(h)
}

/// `δ_i(k) = −C_iᵀ p̄_i(k+1)`.
pub fn update_multipliers(coord: &mut CoordinationState) {
    for i in 0..coord.len() {
        for k in 0..coord.horizon {
            coord.delta[i][k] = -(coord.c[i].transpose() * &coord.p_bar[i][k + 1]);
        }
    }
}

/// `z_i(k) = Σ_{j≠i} f_ij x_j(k)` over the horizon.
pub fn update_interactions(
    sys: &LargeScaleSystem,
    coord: &mut CoordinationState,
    traj: &Trajectory,
) -> Result<(), CoordinationError> {
    check_horizon(coord, traj)?;
    for i in 0..sys.len() {
        for k in 0..coord.horizon {
            coord.z[i][k] = coupling_input(sys, i, &traj.states[k]);
        }
    }
    Ok(())
}

/// `e = Σ_i Σ_{k=1}^{K−1} ‖z_i(k) − Σ_j f_ij x_j(k)‖²`.
pub fn interaction_error(
    sys: &LargeScaleSystem,
    coord: &CoordinationState,
    traj: &Trajectory,
) -> Result<f64, CoordinationError> {
    check_horizon(coord, traj)?;
    let mut e = 0.0;
    for i in 0..sys.len() {
        for k in 1..coord.horizon {
            e += (&coord.z[i][k] - coupling_input(sys, i, &traj.states[k])).norm_squared();
        }
    }
    Ok(e)
}

#[derive(Clone, Debug)]
pub struct AlgorithmConfig {
    pub horizon: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub disturbance: DisturbanceModel,
    pub delays: DelaySchedule,
    pub synthesis: SynthesisOptions,
    /// `C_i`; identity when `None`.
    pub coupling: Option<Vec<DMatrix<f64>>>,
    /// Continue with best-effort gains when a subsystem fails to certify.
    pub allow_uncertified: bool,
}

impl AlgorithmConfig {
    pub fn new(sys: &LargeScaleSystem, horizon: usize) -> Self {
        Self {
            horizon,
            tolerance: 1e-6,
            max_iterations: 20,
            disturbance: DisturbanceModel::zero(sys.len()),
            delays: DelaySchedule::default(),
            synthesis: SynthesisOptions::default(),
            coupling: None,
            allow_uncertified: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlgorithmOutcome {
    pub gains: GainSet,
    pub report: CoordinationReport,
    pub trajectory: Trajectory,
    pub state: CoordinationState,
}

/// The outer loop: synthesise against the current `(δ, z)`, recover `p̄`,
/// simulate the horizon, stop once `e ≤ tolerance`, otherwise refresh
/// `z` from the trajectory and `δ` from `p̄` and repeat.
pub fn run_algorithm(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    x_history: &[Vec<DVector<f64>>],
    config: &AlgorithmConfig,
) -> Result<AlgorithmOutcome, CoordinationError> {
    if config.horizon == 0 {
        return Err(CoordinationError::HorizonMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut coord = CoordinationState::new(sys, config.horizon);
    if let Some(c) = &config.coupling {
        coord = coord.with_coupling(c.clone())?;
    }
    let setup = SimulationSetup {
        steps: config.horizon,
        disturbance: config.disturbance.clone(),
        delays: config.delays.clone(),
        policy: AdmissibilityPolicy::Reject,
    };
    let mut report = CoordinationReport::default();
    let mut best: Option<(f64, AlgorithmOutcome)> = None;

    for it in 0..config.max_iterations {
        coord.iteration = it;
        let gains = match synthesize(sys, hp, &coord, x_history, &config.synthesis) {
            Ok(g) => g,
            Err(SynthesisError::InfeasibleSynthesis { best_effort, failures, .. }) if config.allow_uncertified => {
                log::warn!("iteration {it}: continuing with {} uncertified subsystem(s)", failures.len());
                *best_effort
            }
            Err(e) => return Err(e.into()),
        };
        coord.set_costates(&gains);
        let traj = simulate(sys, &gains, hp, x_history, &setup)?;
        let e = interaction_error(sys, &coord, &traj)?;
        log::info!("iteration {it}: interaction error {e:.3e}");
        if let Some(prev) = report.error_per_iteration.last() {
            if it >= 2 && e > *prev {
                log::warn!("interaction error increased from {prev:.3e} to {e:.3e}");
            }
        }
        report.error_per_iteration.push(e);
        report.iterations_used = it + 1;
        let outcome = AlgorithmOutcome {
            gains,
            report: report.clone(),
            trajectory: traj,
            state: coord.clone(),
        };
        if e <= config.tolerance {
            report.converged = true;
            let mut out = outcome;
            out.report = report;
            return Ok(out);
        }
        update_interactions(sys, &mut coord, &outcome.trajectory)?;
        update_multipliers(&mut coord);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, outcome));
        }
    }
    let best = best.map(|(_, mut o)| {
        o.report = report.clone();
        Box::new(o)
    });
    Err(CoordinationError::NoConvergence { report, best })
}
