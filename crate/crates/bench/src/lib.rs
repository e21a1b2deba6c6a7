//! Shared fixtures for the benchmarks.

use fuzzy_lsmpc_core::coordination::CoordinationState;
use fuzzy_lsmpc_core::datasets::{self, Example};
use fuzzy_lsmpc_core::lmi::{assemble_subsystem, synthesize, GainSet, SynthesisError, SynthesisOptions};
use fuzzy_lsmpc_core::sdp::SdpProblem;
use nalgebra::DVector;

/// The subsystem-`i` problem of `ex` with zero coordination data.
pub fn subsystem_problem(ex: &Example, i: usize) -> SdpProblem {
    let coord = CoordinationState::new(&ex.system, 1);
    let snap = coord.snapshot(i, 0).expect("snapshot");
    let hist: Vec<DVector<f64>> = vec![ex.x0[i].clone()];
    assemble_subsystem(&ex.system, &ex.hp, i, &snap, &hist, &SynthesisOptions::default())
        .expect("assemble")
        .problem
}

/// Gains for `ex`, best effort when the problem is infeasible.
pub fn gains(ex: &Example) -> GainSet {
    let coord = CoordinationState::new(&ex.system, 1);
    match synthesize(&ex.system, &ex.hp, &coord, std::slice::from_ref(&ex.x0), &SynthesisOptions::default()) {
        Ok(g) => g,
        Err(SynthesisError::InfeasibleSynthesis { best_effort, .. }) => *best_effort,
        Err(e) => panic!("synthesis of {}: {e}", ex.name),
    }
}

pub fn example(name: &str) -> Example {
    datasets::by_name(name).expect("built-in system")
}
