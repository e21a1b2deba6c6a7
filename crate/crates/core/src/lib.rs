//! Decentralised fuzzy model predictive control for delayed
//! Takagi-Sugeno large-scale systems: model, matrix-inequality synthesis,
//! coordination and closed-loop verification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coordination;
pub mod datasets;
pub mod fuzzy_model;
pub mod lmi;
pub mod sdp;
pub mod simulation;

pub use coordination::{
    run_algorithm, AlgorithmConfig, AlgorithmOutcome, CoordinationError, CoordinationReport,
    CoordinationState,
};
pub use fuzzy_model::{
    AdmissibilityPolicy, DelayBuffer, DelaySchedule, LargeScaleSystem, Membership, ModelError,
    SubsystemRules,
};
pub use lmi::{GainSet, SynthesisError, SynthesisHyperparams, SynthesisOptions};
pub use sdp::{CertificateReport, SolveStatus};
pub use simulation::{
    simulate, DisturbanceKind, DisturbanceModel, SimulationError, SimulationSetup, Trajectory,
};
