//! Matrix-inequality synthesis of the fuzzy feedback gains.
//!
//! The bilinear conditions are made affine by fixing the Lyapunov shape
//! matrices `X_i` and every scalar weight; the unknowns per subsystem are the
//! rule gains `k_i^l`, the level `ς_i`, the input slack `Z_i` and the
//! co-state scaling `X̄_i`. Each `(l, m)` rule/gain vertex is enforced
//! separately, which is sufficient for every convex membership blend.

mod builders;
mod oracle;
mod synthesis;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy_model::{LargeScaleSystem, ModelError};
use crate::sdp::{CertificateReport, SdpError, SolveStatus};

pub use builders::{
    build_input_constraint_lmi, build_level_lmi, build_rpi_lmi, build_terminal_lmi,
    CoordinationSnapshot, SubsystemVars,
};
pub use oracle::{expand_a1, expand_b1, schur_complement_tail, schur_oracle_check};
pub use synthesis::{
    assemble_subsystem, frozen_input_check, recheck_gains, synthesize, synthesize_subsystem,
    synthesize_with_search, FamilySet, SearchGrid, SearchOutcome, SubsystemOutcome,
    SubsystemProblem, SynthesisOptions,
};

#[derive(Debug, Error, Clone)]
pub enum SynthesisError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("shape matrix X of subsystem {subsystem} is singular (condition {condition:.3e})")]
    SingularX { subsystem: usize, condition: f64 },
    #[error("assembled block `{label}` is not symmetric (asymmetry {asymmetry:.3e})")]
    NonSymmetricAssembly { label: String, asymmetry: f64 },
    #[error("coordination state is at iteration {found}, caller expected {expected}")]
    CoordinationStateStale { expected: usize, found: usize },
    #[error("Schur pivot block is singular")]
    SingularSchurPivot,
    #[error("synthesis infeasible: {}", describe_failures(.failures))]
    InfeasibleSynthesis {
        failures: Vec<FamilyFailure>,
        hp: Box<SynthesisHyperparams>,
        best_effort: Box<GainSet>,
    },
}

fn describe_failures(f: &[FamilyFailure]) -> String {
    f.iter()
        .map(|f| {
            let fams: Vec<String> = f.families.iter().map(|x| x.to_string()).collect();
            format!(
                "subsystem {} ({:?}; failing {}; worst reduced eigenvalue {:.3e})",
                f.subsystem,
                f.status,
                fams.join(", "),
                f.worst
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LmiFamily {
    Rpi,
    InputConstraint,
    Terminal,
    Level,
}

impl std::fmt::Display for LmiFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LmiFamily::Rpi => "rpi",
            LmiFamily::InputConstraint => "input",
            LmiFamily::Terminal => "terminal",
            LmiFamily::Level => "level",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyFailure {
    pub subsystem: usize,
    pub status: SolveStatus,
    pub families: Vec<LmiFamily>,
    pub worst: f64,
}

/// How the rule-dependent shape `X_iμ` is formed from the fixed data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum XMuRule {
    /// `X_iμ = X_i` for every rule.
    #[default]
    RuleIndependent,
}

/// Fixed data of the affine synthesis problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisHyperparams {
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub rho: Vec<f64>,
    pub rho_d: Vec<f64>,
    pub varpi: Vec<f64>,
    pub tau: Vec<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub h: Vec<f64>,
    pub x_shape: Vec<DMatrix<f64>>,
    pub x_mu_rule: XMuRule,
    /// Strictness margin applied to every block.
    pub epsilon: f64,
}

impl SynthesisHyperparams {
    /// Uniform defaults: `α = 2`, `ϱ = ϱ_d = 0.5`, `ϖ = 0.5`, `τ = 1`,
    /// `Q = 5I`, `R = I`, `H = 5`, `ε = 1e-7`.
    pub fn for_system(sys: &LargeScaleSystem, lambda: Vec<f64>, x_shape: Vec<DMatrix<f64>>) -> Self {
        let n_sub = sys.len();
        Self {
            lambda,
            alpha: 2.0,
            rho: vec![0.5; n_sub],
            rho_d: vec![0.5; n_sub],
            varpi: vec![0.5; n_sub],
            tau: vec![1.0; n_sub],
            q: sys
                .subsystems
                .iter()
                .map(|s| DMatrix::identity(s.state_dim(), s.state_dim()) * 5.0)
                .collect(),
            r: sys
                .subsystems
                .iter()
                .map(|s| DMatrix::identity(s.input_dim(), s.input_dim()))
                .collect(),
            h: vec![5.0; n_sub],
            x_shape,
            x_mu_rule: XMuRule::RuleIndependent,
            epsilon: 1e-7,
        }
    }

    pub fn validate(&self, sys: &LargeScaleSystem) -> Result<(), SynthesisError> {
        let bad = |s: String| Err(SynthesisError::InvalidHyperparams(s));
        let n_sub = sys.len();
        let lens = [
            ("lambda", self.lambda.len()),
            ("rho", self.rho.len()),
            ("rho_d", self.rho_d.len()),
            ("varpi", self.varpi.len()),
            ("tau", self.tau.len()),
            ("Q", self.q.len()),
            ("R", self.r.len()),
            ("H", self.h.len()),
            ("X", self.x_shape.len()),
        ];
        for (name, len) in lens {
            if len != n_sub {
                return bad(format!("{name} has {len} entries for {n_sub} subsystems"));
            }
        }
        if !(self.alpha >= 2.0) || !self.alpha.is_finite() {
            return bad(format!("α = {} must be ≥ 2", self.alpha));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("strictness ε = {} must be ≥ 0", self.epsilon));
        }
        for i in 0..n_sub {
            let sub = &sys.subsystems[i];
            let (n, m) = (sub.state_dim(), sub.input_dim());
            let l = self.lambda[i];
            if !(l > 0.0 && l < 1.0) {
                return bad(format!("λ[{i}] = {l} must lie in (0, 1)"));
            }
            if !(self.rho[i] >= 0.0 && self.rho_d[i] >= 0.0)
                || (self.rho[i] + self.rho_d[i] - 1.0).abs() > 1e-12
            {
                return bad(format!(
                    "ϱ[{i}] = {}, ϱ_d[{i}] = {} must be non-negative and sum to 1",
                    self.rho[i], self.rho_d[i]
                ));
            }
            if !(self.varpi[i] > 0.0) || !(self.tau[i] > 0.0) || !(self.h[i] > 0.0) {
                return bad(format!("ϖ, τ and H of subsystem {i} must be positive"));
            }
            if self.q[i].shape() != (n, n) || self.r[i].shape() != (m, m) || self.x_shape[i].shape() != (n, n) {
                return bad(format!("Q, R or X of subsystem {i} has the wrong shape"));
            }
            if !is_symmetric(&self.q[i]) || min_eig(&self.q[i]) < -1e-12 {
                return bad(format!("Q[{i}] must be symmetric positive semidefinite"));
            }
            if !is_symmetric(&self.r[i]) || min_eig(&self.r[i]) <= 0.0 {
                return bad(format!("R[{i}] must be symmetric positive definite"));
            }
            if !is_symmetric(&self.x_shape[i]) || min_eig(&self.x_shape[i]) <= 0.0 {
                return bad(format!("X[{i}] must be symmetric positive definite"));
            }
        }
        Ok(())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Gains and certificate data for every subsystem.
#[derive(Clone, Debug)]
pub struct GainSet {
    /// `k[i][l]`, each `m_i × n_i`.
    pub k: Vec<Vec<DMatrix<f64>>>,
    pub sigma: Vec<f64>,
    pub z: Vec<DMatrix<f64>>,
    pub x_bar: Vec<DVector<f64>>,
    /// Shape matrices the certificate was computed for; `P_i = X_i / ς_i`.
    pub x_shape: Vec<DMatrix<f64>>,
    /// `None` for gains that were supplied rather than synthesised.
    pub certificates: Vec<Option<CertificateReport>>,
    pub status: Vec<SolveStatus>,
}

impl GainSet {
    /// Wrap externally supplied gains with a shape and level for the
    /// Lyapunov function. No certificate is attached.
    pub fn frozen(k: Vec<Vec<DMatrix<f64>>>, x_shape: Vec<DMatrix<f64>>, sigma: Vec<f64>) -> Self {
        let n_sub = k.len();
        let z = x_shape.iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect();
        let x_bar = x_shape.iter().map(|x| DVector::zeros(x.nrows())).collect();
        Self {
            k,
            sigma,
            z,
            x_bar,
            x_shape,
            certificates: vec![None; n_sub],
            status: vec![SolveStatus::Feasible; n_sub],
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn certified(&self) -> bool {
        self.certificates
            .iter()
            .all(|c| c.as_ref().is_some_and(|c| c.valid))
    }

    /// `P_i = X_i / ς_i`.
    pub fn lyapunov(&self, i: usize) -> DMatrix<f64> {
        &self.x_shape[i] / self.sigma[i]
    }

    /// `γ_i² = ς_i / ϖ_i` implied by the fixed ϖ.
    pub fn implied_gamma_sq(&self, hp: &SynthesisHyperparams) -> Vec<f64> {
        self.sigma.iter().zip(&hp.varpi).map(|(s, v)| s / v).collect()
    }

    /// Largest reduced eigenvalue of every certified block, per subsystem.
    pub fn worst_margins(&self) -> Vec<Option<f64>> {
        self.certificates
            .iter()
            .map(|c| c.as_ref().map(CertificateReport::worst_reduced))
            .collect()
    }

    /// Same gain matrices scaled by `factor`; certificates are dropped.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for ki in &mut out.k {
            for k in ki.iter_mut() {
                *k *= factor;
            }
        }
        out.certificates = vec![None; self.len()];
        out
    }
}
