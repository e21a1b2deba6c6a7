//! Run configuration: system source, hyperparameter overrides and the
//! settings of each subcommand. Everything is resolved and validated before
//! any solve.

use std::path::{Path, PathBuf};

use fuzzy_lsmpc_core::datasets;
use fuzzy_lsmpc_core::fuzzy_model::{AdmissibilityPolicy, DelaySchedule, LargeScaleSystem};
use fuzzy_lsmpc_core::lmi::SynthesisHyperparams;
use fuzzy_lsmpc_core::simulation::{DisturbanceKind, DisturbanceModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::files::{from_rows, read_json, Rows, SystemFile};
use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamOverrides {
    pub lambda: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub rho: Option<Vec<f64>>,
    pub rho_d: Option<Vec<f64>>,
    pub varpi: Option<Vec<f64>>,
    pub tau: Option<Vec<f64>>,
    pub q: Option<Vec<Rows>>,
    pub r: Option<Vec<Rows>>,
    pub h: Option<Vec<f64>>,
    pub x_shape: Option<Vec<Rows>>,
    pub epsilon: Option<f64>,
}

impl HyperparamOverrides {
    pub fn apply(&self, hp: &mut SynthesisHyperparams) -> Result<(), CliError> {
        let mats = |v: &[Rows], what: &str| -> Result<Vec<DMatrix<f64>>, CliError> {
            v.iter().map(|m| from_rows(m, what)).collect()
        };
        if let Some(v) = &self.lambda {
            hp.lambda = v.clone();
        }
        if let Some(v) = self.alpha {
            hp.alpha = v;
        }
        if let Some(v) = &self.rho {
            hp.rho = v.clone();
        }
        if let Some(v) = &self.rho_d {
            hp.rho_d = v.clone();
        }
        if let Some(v) = &self.varpi {
            hp.varpi = v.clone();
        }
        if let Some(v) = &self.tau {
            hp.tau = v.clone();
        }
        if let Some(v) = &self.q {
            hp.q = mats(v, "q")?;
        }
        if let Some(v) = &self.r {
            hp.r = mats(v, "r")?;
        }
        if let Some(v) = &self.h {
            hp.h = v.clone();
        }
        if let Some(v) = &self.x_shape {
            hp.x_shape = mats(v, "x_shape")?;
        }
        if let Some(v) = self.epsilon {
            hp.epsilon = v;
        }
        Ok(())
    }
}

/// Disturbance selection. `uniform` draws from each `D_i` with the run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceChoice {
    #[default]
    Zero,
    Uniform,
    PerSubsystem { kinds: Vec<DisturbanceKind> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    pub seed: u64,
    pub disturbance: DisturbanceChoice,
    pub delays: DelaySchedule,
    pub policy: AdmissibilityPolicy,
    /// Samples oldest first, each holding every subsystem's state.
    pub initial_history: Option<Vec<Vec<Vec<f64>>>>,
    /// Fraction of the level-set boundary the default initial state is
    /// scaled to when gains are known.
    pub initial_fraction: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            disturbance: DisturbanceChoice::Zero,
            delays: DelaySchedule::default(),
            policy: AdmissibilityPolicy::Warn,
            initial_history: None,
            initial_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationConfig {
    pub horizon: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub allow_uncertified: bool,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            tolerance: 1e-6,
            max_iterations: 20,
            allow_uncertified: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub samples: usize,
    pub margin: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in name or path to a system file.
    pub system: String,
    pub hyperparams: HyperparamOverrides,
    pub simulation: SimulationConfig,
    pub coordination: CoordinationConfig,
    pub verify: VerifyConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: "example1".into(),
            hyperparams: HyperparamOverrides::default(),
            simulation: SimulationConfig::default(),
            coordination: CoordinationConfig::default(),
            verify: VerifyConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }
}

/// A configuration with everything loaded and checked.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub system_name: String,
    pub system: LargeScaleSystem,
    pub hp: SynthesisHyperparams,
    /// Set when the user gave the history explicitly.
    pub explicit_history: bool,
    pub history: Vec<Vec<DVector<f64>>>,
    pub disturbance: DisturbanceModel,
}

impl Resolved {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let (system_name, system, mut hp, x0) = match datasets::by_name(&config.system) {
            Some(ex) => (ex.name.to_string(), ex.system, ex.hp, ex.x0),
            None => {
                let path = Path::new(&config.system);
                if !path.exists() {
                    return Err(CliError::Invalid(format!(
                        "`{}` is neither a built-in system ({}) nor a file",
                        config.system,
                        datasets::names().join(", ")
                    )));
                }
                let sys = read_json::<SystemFile>(path)?.to_system()?;
                let hp = default_hyperparams(&sys);
                let x0 = sys.subsystems.iter().map(|s| DVector::zeros(s.state_dim())).collect();
                (path.display().to_string(), sys, hp, x0)
            }
        };
        config.hyperparams.apply(&mut hp)?;
        hp.validate(&system).map_err(|e| CliError::Invalid(e.to_string()))?;

        let dims = system.state_dims();
        let (explicit_history, history) = match &config.simulation.initial_history {
            None => (false, vec![x0]),
            Some(h) => {
                if h.is_empty() {
                    return Err(CliError::Invalid("initial_history is empty".into()));
                }
                let mut out = Vec::with_capacity(h.len());
                for (s, sample) in h.iter().enumerate() {
                    if sample.len() != dims.len() || sample.iter().zip(&dims).any(|(x, n)| x.len() != *n) {
                        return Err(CliError::Invalid(format!(
                            "initial_history sample {s} does not match state dimensions {dims:?}"
                        )));
                    }
                    if sample.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(CliError::Invalid(format!("initial_history sample {s} is not finite")));
                    }
                    out.push(sample.iter().map(|x| DVector::from_column_slice(x)).collect());
                }
                (true, out)
            }
        };

        let disturbance = match &config.simulation.disturbance {
            DisturbanceChoice::Zero => DisturbanceModel::zero(system.len()),
            DisturbanceChoice::Uniform => DisturbanceModel::uniform(&system, config.simulation.seed),
            DisturbanceChoice::PerSubsystem { kinds } => DisturbanceModel { kinds: kinds.clone() },
        };
        disturbance.validate(&system).map_err(|e| CliError::Invalid(e.to_string()))?;
        config
            .simulation
            .delays
            .realize(1, system.delay_bound)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        if config.coordination.horizon == 0 {
            return Err(CliError::Invalid("coordination horizon must be at least 1".into()));
        }
        if !(config.coordination.tolerance >= 0.0) {
            return Err(CliError::Invalid("coordination tolerance must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&config.simulation.initial_fraction) || config.simulation.initial_fraction == 0.0 {
            return Err(CliError::Invalid("initial_fraction must lie in (0, 1]".into()));
        }
        Ok(Self {
            config,
            system_name,
            system,
            hp,
            explicit_history,
            history,
            disturbance,
        })
    }
}

/// `λ_i = 0.5` and `X_i = I` on top of the uniform defaults.
pub fn default_hyperparams(sys: &LargeScaleSystem) -> SynthesisHyperparams {
    let x = sys
        .subsystems
        .iter()
        .map(|s| DMatrix::identity(s.state_dim(), s.state_dim()))
        .collect();
    SynthesisHyperparams::for_system(sys, vec![0.5; sys.len()], x)
}
