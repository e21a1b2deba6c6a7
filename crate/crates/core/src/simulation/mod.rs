//! Closed-loop simulation, cost accounting and certificate checks.

mod verify;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy_model::{
    step_closed_loop, AdmissibilityPolicy, DelayBuffer, DelaySchedule, LargeScaleSystem,
    ModelError,
};
use crate::lmi::{GainSet, SynthesisHyperparams};

pub use verify::{
    razumikhin_values, rpi_membership, verify_iss_decrease, verify_rpi_montecarlo,
    verify_terminal_decrease, IssReport, RpiMonteCarloReport, TerminalReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid disturbance model: {0}")]
    InvalidDisturbance(String),
    #[error("initial history is empty")]
    EmptyHistory,
    #[error("gain set covers {gains} subsystems, system has {system}")]
    GainMismatch { gains: usize, system: usize },
}

/// Disturbance source of one subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    /// Uniform in the ball of radius `gamma`.
    UniformBall { gamma: f64, seed: u64 },
    /// `amplitude · sin(2πk/period + phase)` along the unit diagonal.
    Sinusoid {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Explicit sequence, repeated cyclically.
    Custom { values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    pub kinds: Vec<DisturbanceKind>,
}

impl DisturbanceModel {
    pub fn zero(n_sub: usize) -> Self {
        Self {
            kinds: vec![DisturbanceKind::Zero; n_sub],
        }
    }

    /// Uniform-ball disturbances at each subsystem's full bound, with
    /// per-subsystem seeds derived from `seed`.
    pub fn uniform(sys: &LargeScaleSystem, seed: u64) -> Self {
        Self {
            kinds: sys
                .gamma
                .iter()
                .enumerate()
                .map(|(i, g)| DisturbanceKind::UniformBall {
                    gamma: *g,
                    seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
                })
                .collect(),
        }
    }

    pub fn validate(&self, sys: &LargeScaleSystem) -> Result<(), SimulationError> {
        let bad = |s: String| Err(SimulationError::InvalidDisturbance(s));
        if self.kinds.len() != sys.len() {
            return bad(format!("{} models for {} subsystems", self.kinds.len(), sys.len()));
        }
        for (i, k) in self.kinds.iter().enumerate() {
            let g = sys.gamma[i];
            let c = sys.subsystems[i].disturbance_dim();
            match k {
                DisturbanceKind::Zero => {}
                DisturbanceKind::UniformBall { gamma, .. } => {
                    if !(*gamma >= 0.0 && *gamma <= g) {
                        return bad(format!("ball radius {gamma} of subsystem {i} exceeds γ = {g}"));
                    }
                }
                DisturbanceKind::Sinusoid { amplitude, period, .. } => {
                    if !(*amplitude >= 0.0 && *amplitude <= g) || !(*period > 0.0) {
                        return bad(format!("sinusoid of subsystem {i} needs 0 ≤ amplitude ≤ {g} and period > 0"));
                    }
                }
                DisturbanceKind::Custom { values } => {
                    if values.is_empty() {
                        return bad(format!("custom sequence of subsystem {i} is empty"));
                    }
                    for (k, v) in values.iter().enumerate() {
                        if v.len() != c {
                            return bad(format!("custom sample {k} of subsystem {i} has length {}", v.len()));
                        }
                        let nsq: f64 = v.iter().map(|x| x * x).sum();
                        if !(nsq <= g * g + 1e-12) {
                            return bad(format!("custom sample {k} of subsystem {i} leaves D_i"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `d_i(k)` for `k = 0..steps`, indexed `[k][i]`.
    pub fn realize(&self, sys: &LargeScaleSystem, steps: usize) -> Result<Vec<Vec<DVector<f64>>>, SimulationError> {
        self.validate(sys)?;
        let per_sub: Vec<Vec<DVector<f64>>> = self
            .kinds
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let c = sys.subsystems[i].disturbance_dim();
                match kind {
                    DisturbanceKind::Zero => vec![DVector::zeros(c); steps],
                    DisturbanceKind::UniformBall { gamma, seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        (0..steps).map(|_| sample_ball(&mut rng, c, *gamma)).collect()
                    }
                    DisturbanceKind::Sinusoid {
                        amplitude,
                        period,
                        phase,
                    } => (0..steps)
                        .map(|k| {
                            let s = amplitude
                                * (2.0 * std::f64::consts::PI * k as f64 / period + phase).sin();
                            DVector::from_element(c, s / (c as f64).sqrt())
                        })
                        .collect(),
                    DisturbanceKind::Custom { values } => (0..steps)
                        .map(|k| DVector::from_column_slice(&values[k % values.len()]))
                        .collect(),
                }
            })
            .collect();
        Ok((0..steps)
            .map(|k| per_sub.iter().map(|d| d[k].clone()).collect())
            .collect())
    }
}

/// Uniform sample from the closed ball of radius `r` in `R^c`.
pub fn sample_ball(rng: &mut ChaCha8Rng, c: usize, r: f64) -> DVector<f64> {
    if c == 0 || r == 0.0 {
        return DVector::zeros(c);
    }
    let dir = DVector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return DVector::zeros(c);
    }
    let u: f64 = rng.random();
    let radius = r * u.powf(1.0 / c as f64);
    // guard against rounding past the boundary
    dir * (radius / norm).min(r / norm)
}

#[derive(Clone, Debug)]
pub struct SimulationSetup {
    pub steps: usize,
    pub disturbance: DisturbanceModel,
    pub delays: DelaySchedule,
    pub policy: AdmissibilityPolicy,
}

impl SimulationSetup {
    pub fn new(sys: &LargeScaleSystem, steps: usize) -> Self {
        Self {
            steps,
            disturbance: DisturbanceModel::zero(sys.len()),
            delays: DelaySchedule::default(),
            policy: AdmissibilityPolicy::Reject,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub gains_id: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// Everything recorded along one closed-loop run. Per-step vectors are
/// indexed `[k][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    /// Initial segment `x(-h), ..., x(0)`.
    pub history: Vec<Vec<DVector<f64>>>,
    /// `x(k)` for `k = 0..=steps`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `τ(k)` with `x_d(k) = x(k - τ(k))`, `k = 0..steps`.
    pub delays: Vec<usize>,
    pub delayed: Vec<Vec<DVector<f64>>>,
    pub inputs: Vec<Vec<DVector<f64>>>,
    pub disturbances: Vec<Vec<DVector<f64>>>,
    pub memberships: Vec<Vec<Vec<f64>>>,
    pub stage_costs: Vec<Vec<f64>>,
    /// `V(k)` for `k = 0..=steps`.
    pub v: Vec<Vec<f64>>,
    /// `V̄(k)` for `k = 0..steps`.
    pub vbar: Vec<Vec<f64>>,
    /// Level-set membership of `(x(k), x_d(k))`, `k = 0..steps`.
    pub in_rpi: Vec<Vec<bool>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn subsystems(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// `x_i(k)` for `k ≥ -h`.
    pub fn state_at(&self, k: isize, i: usize) -> &DVector<f64> {
        if k >= 0 {
            &self.states[k as usize][i]
        } else {
            let h = self.history.len() as isize - 1;
            &self.history[(h + k) as usize][i]
        }
    }
}

/// `xᵀQx + uᵀRu - τ dᵀd`.
pub fn stage_cost(
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tau: f64,
) -> f64 {
    (x.transpose() * q * x)[(0, 0)] + (u.transpose() * r * u)[(0, 0)] - tau * d.norm_squared()
}

fn quad(x: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

/// Pad a history segment to `h + 1` samples by holding its oldest entry.
pub fn padded_history(history: &[Vec<DVector<f64>>], h: usize) -> Result<Vec<Vec<DVector<f64>>>, SimulationError> {
    let oldest = history.first().ok_or(SimulationError::EmptyHistory)?;
    let mut out: Vec<Vec<DVector<f64>>> = Vec::with_capacity(h + 1);
    for _ in history.len()..h + 1 {
        out.push(oldest.clone());
    }
    let skip = history.len().saturating_sub(h + 1);
    out.extend(history.iter().skip(skip).cloned());
    Ok(out)
}

/// Run the closed loop for `setup.steps` steps from `history` (oldest
/// first; shorter segments are held constant backwards).
pub fn simulate(
    sys: &LargeScaleSystem,
    gains: &GainSet,
    hp: &SynthesisHyperparams,
    history: &[Vec<DVector<f64>>],
    setup: &SimulationSetup,
) -> Result<Trajectory, SimulationError> {
    if gains.len() != sys.len() {
        return Err(SimulationError::GainMismatch {
            gains: gains.len(),
            system: sys.len(),
        });
    }
    let h = sys.delay_bound;
    let history = padded_history(history, h)?;
    for x in &history {
        if x.len() != sys.len() {
            return Err(ModelError::DimensionMismatch("history sample".into()).into());
        }
    }
    let delays = setup.delays.realize(setup.steps, h)?;
    let dist = setup.disturbance.realize(sys, setup.steps)?;
    let mut buffer = DelayBuffer::new(h, history.clone())?;
    let n_sub = sys.len();

    let mut states = vec![history[h].clone()];
    let mut delayed = Vec::with_capacity(setup.steps);
    let mut inputs = Vec::with_capacity(setup.steps);
    let mut memberships = Vec::with_capacity(setup.steps);
    let mut stage_costs = Vec::with_capacity(setup.steps);
    for k in 0..setup.steps {
        let out = step_closed_loop(sys, &gains.k, &mut buffer, delays[k], &dist[k], setup.policy)?;
        let costs = (0..n_sub)
            .map(|i| {
                stage_cost(
                    &states[k][i],
                    &out.inputs[i],
                    &dist[k][i],
                    &hp.q[i],
                    &hp.r[i],
                    hp.tau[i],
                )
            })
            .collect();
        stage_costs.push(costs);
        states.push(out.next);
        delayed.push(out.delayed);
        inputs.push(out.inputs);
        memberships.push(out.memberships);
    }
    let mut traj = Trajectory {
        steps: setup.steps,
        history,
        states,
        delays,
        delayed,
        inputs,
        disturbances: dist,
        memberships,
        stage_costs,
        v: Vec::new(),
        vbar: Vec::new(),
        in_rpi: Vec::new(),
        meta: TrajectoryMeta::default(),
    };
    let (v, vbar) = razumikhin_values(&traj, gains);
    traj.v = v;
    traj.vbar = vbar;
    traj.in_rpi = (0..setup.steps)
        .map(|k| {
            (0..n_sub)
                .map(|i| {
                    rpi_membership(&traj.states[k][i], &traj.delayed[k][i], &gains.x_shape[i], gains.sigma[i]).0
                })
                .collect()
        })
        .collect();
    Ok(traj)
}

/// Receding-horizon cost traces along a realised trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// `J_i(t)` for `t = 0..=steps - T`, indexed `[t][i]`.
    pub traces: Vec<Vec<f64>>,
    /// `J_i(0)` per subsystem.
    pub per_subsystem: Vec<f64>,
    /// `Σ_i J_i(0)`.
    pub total: f64,
}

/// `J_i(t) = Π_i(t) + Σ_{n=0}^{T-1} Π_i(t+n) + V_i(x_i(t+T))`, with the
/// realised trajectory standing in for the prediction.
pub fn total_cost(traj: &Trajectory, gains: &GainSet, horizon: usize) -> CostReport {
    let n_sub = traj.subsystems();
    let last = traj.steps.checked_sub(horizon);
    let traces: Vec<Vec<f64>> = match last {
        None => Vec::new(),
        Some(_) if horizon == 0 => Vec::new(),
        Some(last) => (0..=last)
            .map(|t| {
                (0..n_sub)
                    .map(|i| {
                        let p = gains.lyapunov(i);
                        let run: f64 = (t..t + horizon).map(|k| traj.stage_costs[k][i]).sum();
                        traj.stage_costs[t][i] + run + quad(&traj.states[t + horizon][i], &p)
                    })
                    .collect()
            })
            .collect(),
    };
    let per_subsystem = traces.first().cloned().unwrap_or_else(|| vec![0.0; n_sub]);
    let total = per_subsystem.iter().sum();
    CostReport {
        traces,
        per_subsystem,
        total,
    }
}
