use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::builders::{
    build_input_constraint_lmi, build_level_lmi, build_rpi_lmi, build_terminal_lmi,
    CoordinationSnapshot, SubsystemVars,
};
use super::{FamilyFailure, GainSet, LmiFamily, SynthesisError, SynthesisHyperparams};
use crate::coordination::CoordinationState;
use crate::fuzzy_model::{LargeScaleSystem, ModelError};
use crate::sdp::{
    solve, verify_certificate, AffineMatrix, CertificateReport, LmiBlock, SdpProblem,
    MatVar, SolveOptions, SolveStatus, VarLayout,
};

/// Which inequality families enter the problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FamilySet {
    pub rpi: bool,
    pub input: bool,
    pub terminal: bool,
    pub level: bool,
}

impl Default for FamilySet {
    fn default() -> Self {
        Self {
            rpi: true,
            input: true,
            terminal: true,
            level: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub solve: SolveOptions,
    /// Slack allowed by `verify_certificate` on top of each block's margin.
    pub verify_tol: f64,
    pub gain_bound: f64,
    pub slack_bound: f64,
    pub sigma_bounds: (f64, f64),
    pub families: FamilySet,
    /// Prediction instant whose `δ`, `z` freeze the terminal inequality.
    pub snapshot_k: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            verify_tol: 1e-12,
            gain_bound: 1e3,
            slack_bound: 1e6,
            sigma_bounds: (1e-12, 1e6),
            families: FamilySet::default(),
            snapshot_k: 0,
        }
    }
}

/// Result for one subsystem; always carries the solver's best point.
#[derive(Clone, Debug)]
pub struct SubsystemOutcome {
    pub k: Vec<DMatrix<f64>>,
    pub sigma: f64,
    pub z: DMatrix<f64>,
    pub x_bar: DVector<f64>,
    pub status: SolveStatus,
    pub certificate: CertificateReport,
    pub families: Vec<LmiFamily>,
}

impl SubsystemOutcome {
    pub fn certified(&self) -> bool {
        self.status == SolveStatus::Feasible && self.certificate.valid
    }

    fn failure(&self, subsystem: usize) -> FamilyFailure {
        let mut families: Vec<LmiFamily> = self
            .certificate
            .blocks
            .iter()
            .zip(&self.families)
            .filter(|(b, _)| !b.holds)
            .map(|(_, f)| *f)
            .collect();
        families.dedup();
        FamilyFailure {
            subsystem,
            status: self.status,
            families,
            worst: self.certificate.worst_reduced(),
        }
    }
}

/// The assembled problem of one subsystem.
#[derive(Clone, Debug)]
pub struct SubsystemProblem {
    pub vars: SubsystemVars,
    pub problem: SdpProblem,
    /// Family of each block in `problem.blocks`.
    pub families: Vec<LmiFamily>,
}

/// Every vertex instance of the selected families for subsystem `i`, with
/// variable bounds and the objective `min ς_i`.
pub fn assemble_subsystem(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    snap: &CoordinationSnapshot,
    history: &[DVector<f64>],
    opts: &SynthesisOptions,
) -> Result<SubsystemProblem, SynthesisError> {
    let sub = &sys.subsystems[i];
    let (n, m, r) = (sub.state_dim(), sub.input_dim(), sub.rule_count());
    let fam = opts.families;
    let with_x_bar = fam.terminal && snap.row_active();
    let vars = SubsystemVars::new(r, n, m, with_x_bar);
    let eps = hp.epsilon;

    let mut blocks = Vec::new();
    let mut families = Vec::new();
    let mut push = |blk: LmiBlock, f: LmiFamily| {
        blocks.push(blk);
        families.push(f);
    };
    for l in 0..r {
        for mm in 0..r {
            if fam.rpi {
                let f = build_rpi_lmi(sys, hp, i, (l, mm), &vars)?;
                push(LmiBlock::nsd(format!("rpi[{i}]({l},{mm})"), f, eps)?, LmiFamily::Rpi);
            }
            if fam.terminal {
                let f = build_terminal_lmi(sys, hp, i, (l, mm), &vars, snap, snap.iteration)?;
                push(
                    LmiBlock::nsd(format!("terminal[{i}]({l},{mm})"), f, eps)?,
                    LmiFamily::Terminal,
                );
            }
        }
        if fam.input {
            let (blk, caps) = build_input_constraint_lmi(sys, i, l, &vars)?;
            push(LmiBlock::psd(format!("input[{i}]({l})"), blk, eps)?, LmiFamily::InputConstraint);
            if l == 0 {
                for (s, cap) in caps.into_iter().enumerate() {
                    push(
                        LmiBlock::psd(format!("input_cap[{i}]({s})"), cap, eps)?,
                        LmiFamily::InputConstraint,
                    );
                }
            }
        }
    }
    if fam.level {
        for (t, x) in history.iter().enumerate() {
            let f = build_level_lmi(x, &hp.x_shape[i], &vars, i)?;
            push(LmiBlock::psd(format!("level[{i}]({t})"), f, eps)?, LmiFamily::Level);
        }
    }

    let mut prob = SdpProblem::new(vars.dim());
    for v in 0..vars.dim() {
        prob.set_bounds(v, -opts.slack_bound, opts.slack_bound);
    }
    for g in &vars.gains {
        for v in g.indices() {
            prob.set_bounds(v, -opts.gain_bound, opts.gain_bound);
        }
    }
    prob.set_bounds(vars.sigma_index(), opts.sigma_bounds.0, opts.sigma_bounds.1);
    let mut c = vec![0.0; vars.dim()];
    c[vars.sigma_index()] = 1.0;
    prob.minimize(c);
    prob.blocks = blocks;
    Ok(SubsystemProblem {
        vars,
        problem: prob,
        families,
    })
}

/// Assemble and solve the problem of subsystem `i`: minimise `ς_i` subject
/// to every vertex instance of the selected families.
pub fn synthesize_subsystem(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    snap: &CoordinationSnapshot,
    history: &[DVector<f64>],
    opts: &SynthesisOptions,
) -> Result<SubsystemOutcome, SynthesisError> {
    let SubsystemProblem {
        vars,
        problem: prob,
        families,
    } = assemble_subsystem(sys, hp, i, snap, history, opts)?;
    let sol = solve(&prob, &opts.solve)?;
    let certificate = verify_certificate(&prob.blocks, &sol.y, opts.verify_tol);
    let status = if sol.status == SolveStatus::Feasible && !certificate.valid {
        log::warn!("subsystem {i}: solver reported feasible but verification failed");
        SolveStatus::NumericalFailure
    } else {
        sol.status
    };
    Ok(SubsystemOutcome {
        k: vars.gains.iter().map(|g| g.value(&sol.y)).collect(),
        sigma: sol.y[vars.sigma_index()],
        z: vars.z.value(&sol.y),
        x_bar: DVector::from_column_slice(vars.x_bar.value(&sol.y).as_slice()),
        status,
        certificate,
        families,
    })
}

fn fill(var: &MatVar, value: &DMatrix<f64>, y: &mut [f64]) {
    for r in 0..var.nrows().min(value.nrows()) {
        for c in 0..var.ncols().min(value.ncols()) {
            if let Some(ix) = var.index(r, c) {
                y[ix] = value[(r, c)];
            }
        }
    }
}

/// Re-evaluate every inequality at the point stored in `gains`, without
/// solving. Gains carrying an all-zero `Z_i` get the least `Z_i` from
/// [`frozen_input_check`].
pub fn recheck_gains(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    gains: &GainSet,
    coord: &CoordinationState,
    x_history: &[Vec<DVector<f64>>],
    opts: &SynthesisOptions,
) -> Result<Vec<CertificateReport>, SynthesisError> {
    hp.validate(sys)?;
    if gains.len() != sys.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "gain set covers {} subsystems, system has {}",
            gains.len(),
            sys.len()
        ))
        .into());
    }
    (0..sys.len())
        .map(|i| {
            let snap = coord.snapshot(i, opts.snapshot_k)?;
            let sp = assemble_subsystem(sys, hp, i, &snap, &history_for(x_history, i)?, opts)?;
            let mut y = vec![0.0; sp.vars.dim()];
            if gains.k[i].len() != sp.vars.gains.len() {
                return Err(ModelError::MissingGain {
                    subsystem: i,
                    rule: gains.k[i].len(),
                }
                .into());
            }
            for (var, k) in sp.vars.gains.iter().zip(&gains.k[i]) {
                if k.shape() != (var.nrows(), var.ncols()) {
                    return Err(ModelError::DimensionMismatch(format!("gain shape of subsystem {i}")).into());
                }
                fill(var, k, &mut y);
            }
            y[sp.vars.sigma_index()] = gains.sigma[i];
            let z = if gains.z[i].iter().all(|v| *v == 0.0) {
                frozen_input_check(sys, i, &gains.k[i])?.1
            } else {
                gains.z[i].clone()
            };
            fill(&sp.vars.z, &z, &mut y);
            fill(&sp.vars.x_bar, &DMatrix::from_column_slice(gains.x_bar[i].len(), 1, gains.x_bar[i].as_slice()), &mut y);
            Ok(verify_certificate(&sp.problem.blocks, &y, opts.verify_tol))
        })
        .collect()
}

fn history_for(history: &[Vec<DVector<f64>>], i: usize) -> Result<Vec<DVector<f64>>, SynthesisError> {
    history
        .iter()
        .map(|x| {
            x.get(i)
                .cloned()
                .ok_or_else(|| ModelError::DimensionMismatch(format!("history sample lacks subsystem {i}")).into())
        })
        .collect()
}

/// Solve every subsystem independently (in parallel) and collect the gains.
///
/// `x_history` holds global states over the initial segment, oldest first.
/// Returns `InfeasibleSynthesis` with the best-effort gains when any
/// subsystem fails to certify.
pub fn synthesize(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    coord: &CoordinationState,
    x_history: &[Vec<DVector<f64>>],
    opts: &SynthesisOptions,
) -> Result<GainSet, SynthesisError> {
    hp.validate(sys)?;
    let outcomes: Vec<SubsystemOutcome> = (0..sys.len())
        .into_par_iter()
        .map(|i| {
            let snap = coord.snapshot(i, opts.snapshot_k)?;
            synthesize_subsystem(sys, hp, i, &snap, &history_for(x_history, i)?, opts)
        })
        .collect::<Result<_, _>>()?;
    collect(outcomes, hp)
}

fn collect(outcomes: Vec<SubsystemOutcome>, hp: &SynthesisHyperparams) -> Result<GainSet, SynthesisError> {
    let failures: Vec<FamilyFailure> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.certified())
        .map(|(i, o)| o.failure(i))
        .collect();
    let gains = GainSet {
        k: outcomes.iter().map(|o| o.k.clone()).collect(),
        sigma: outcomes.iter().map(|o| o.sigma).collect(),
        z: outcomes.iter().map(|o| o.z.clone()).collect(),
        x_bar: outcomes.iter().map(|o| o.x_bar.clone()).collect(),
        x_shape: hp.x_shape.clone(),
        certificates: outcomes.iter().map(|o| Some(o.certificate.clone())).collect(),
        status: outcomes.iter().map(|o| o.status).collect(),
    };
    if failures.is_empty() {
        Ok(gains)
    } else {
        Err(SynthesisError::InfeasibleSynthesis {
            failures,
            hp: Box::new(hp.clone()),
            best_effort: Box::new(gains),
        })
    }
}

/// Candidate values for the outer search.
#[derive(Clone, Debug)]
pub struct SearchGrid {
    /// Alternatives for each `λ_i`, tried after the value in the base set.
    pub lambda: Vec<f64>,
    /// Uniform scalings applied to every `X_i`.
    pub x_scale: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            lambda: vec![0.3, 0.5, 0.7, 0.9],
            x_scale: vec![1.0, 0.1, 10.0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub gains: GainSet,
    pub hp: SynthesisHyperparams,
    pub attempts: usize,
}

/// Grid search over `{λ_i} × {scaling of X}`. `λ_i` only enters subsystem
/// `i`'s problem, so it is searched per subsystem inside each scaling.
pub fn synthesize_with_search(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    coord: &CoordinationState,
    x_history: &[Vec<DVector<f64>>],
    grid: &SearchGrid,
    opts: &SynthesisOptions,
) -> Result<SearchOutcome, SynthesisError> {
    hp.validate(sys)?;
    let mut attempts = 0;
    let mut first_failure = None;
    let scales = if grid.x_scale.is_empty() { vec![1.0] } else { grid.x_scale.clone() };
    for s in scales {
        let mut trial = hp.clone();
        for x in &mut trial.x_shape {
            *x *= s;
        }
        let mut lambda_opts = Vec::new();
        let mut outcomes = Vec::new();
        for i in 0..sys.len() {
            let snap = coord.snapshot(i, opts.snapshot_k)?;
            let hist = history_for(x_history, i)?;
            let mut candidates = vec![hp.lambda[i]];
            candidates.extend(grid.lambda.iter().copied().filter(|l| *l != hp.lambda[i]));
            let mut best: Option<(f64, SubsystemOutcome)> = None;
            for lam in candidates {
                let mut t = trial.clone();
                t.lambda[i] = lam;
                t.validate(sys)?;
                attempts += 1;
                let out = synthesize_subsystem(sys, &t, i, &snap, &hist, opts)?;
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| out.certificate.worst_reduced() < b.certificate.worst_reduced());
                let done = out.certified();
                if better || done {
                    best = Some((lam, out));
                }
                if done {
                    break;
                }
            }
            let (lam, out) = best.expect("at least one candidate");
            lambda_opts.push(lam);
            outcomes.push(out);
        }
        trial.lambda = lambda_opts;
        match collect(outcomes, &trial) {
            Ok(gains) => {
                return Ok(SearchOutcome {
                    gains,
                    hp: trial,
                    attempts,
                })
            }
            Err(e) => {
                first_failure.get_or_insert(e);
            }
        }
    }
    Err(first_failure.expect("grid has at least one scaling"))
}

/// For fixed gains, find the least `Z_i` with `Z_i ⪰ k_lᵀk_l` for every rule
/// and report whether `Z_i(s,s) ≤ u_max[s]²` can hold.
pub fn frozen_input_check(
    sys: &LargeScaleSystem,
    i: usize,
    gains: &[DMatrix<f64>],
) -> Result<(bool, DMatrix<f64>), SynthesisError> {
    let sub = &sys.subsystems[i];
    let (n, m) = (sub.state_dim(), sub.input_dim());
    if gains.iter().any(|k| k.shape() != (m, n)) {
        return Err(ModelError::DimensionMismatch("frozen gains".into()).into());
    }
    let mut lay = VarLayout::new();
    let zv = lay.symmetric("Z", n);
    let mut prob = SdpProblem::new(lay.dim());
    for (l, k) in gains.iter().enumerate() {
        let blk = AffineMatrix::symmetric_from_lower(&[
            vec![zv.affine()],
            vec![AffineMatrix::constant(k.clone()), AffineMatrix::constant(DMatrix::identity(m, m))],
        ])?;
        prob.push(LmiBlock::psd(format!("input[{i}]({l})"), blk, 0.0)?);
    }
    let caps: Vec<LmiBlock> = (0..m.min(n))
        .map(|s| {
            let mut e = DMatrix::zeros(1, n);
            e[(0, s)] = 1.0;
            let zss = zv.affine().left_mul(&e).right_mul(&e.transpose());
            let u = sys.u_max[i][s];
            LmiBlock::psd(
                format!("input_cap[{i}]({s})"),
                AffineMatrix::constant(DMatrix::from_element(1, 1, u * u)) - zss,
                0.0,
            )
        })
        .collect::<Result<_, _>>()?;
    let bound = gains.iter().map(|k| k.norm_squared()).sum::<f64>() * 10.0 + 10.0;
    for v in 0..lay.dim() {
        prob.set_bounds(v, -bound, bound);
    }
    // trace objective: the least dominating Z
    let mut c = vec![0.0; lay.dim()];
    for d in 0..n {
        c[zv.index(d, d).unwrap()] = 1.0;
    }
    prob.minimize(c);
    let sol = solve(&prob, &SolveOptions::default())?;
    let z = zv.value(&sol.y);
    let caps_ok = verify_certificate(&caps, &sol.y, 1e-9).valid;
    let dominates = verify_certificate(&prob.blocks, &sol.y, 1e-9).valid;
    Ok((caps_ok && dominates, z))
}
