use std::path::{Path, PathBuf};

use fuzzy_lsmpc_core::coordination::{run_algorithm, AlgorithmConfig, CoordinationError, CoordinationState};
use fuzzy_lsmpc_core::datasets;
use fuzzy_lsmpc_core::lmi::{recheck_gains, synthesize, GainSet, SynthesisError, SynthesisOptions};
use fuzzy_lsmpc_core::sdp::CertificateReport;
use fuzzy_lsmpc_core::simulation::{
    razumikhin_values, simulate, total_cost, verify_iss_decrease, verify_rpi_montecarlo, verify_terminal_decrease,
    SimulationSetup, Trajectory,
};
use log::{info, warn};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::config::{Resolved, RunConfig};
use crate::files::{read_json, GainsFile, SystemFile};
use crate::output::{sha256_hex, trajectory_csv, Manifest, OutDir};
use crate::{CliError, Exit};

/// Like `println!`, but a closed stdout is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Coordinate,
    Simulate,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Coordinate => "coordinate",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        }
    }
}

/// Command-line overrides layered on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub system: Option<String>,
    pub gains: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn run(cmd: Command, ov: &Overrides) -> Result<Exit, CliError> {
    let mut config = match &ov.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &ov.system {
        config.system = s.clone();
    }
    if let Some(s) = ov.seed {
        config.simulation.seed = s;
    }
    if let Some(s) = ov.steps {
        config.simulation.steps = s;
    }
    if let Some(o) = &ov.out {
        config.out = o.clone();
    }
    let resolved = Resolved::new(config)?;
    let gains_text = match &ov.gains {
        Some(p) => Some(std::fs::read(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let file_gains = match &ov.gains {
        Some(p) => Some(load_gains(p, &resolved)?),
        None => None,
    };
    let system_json = serde_json::to_vec(&SystemFile::from_system(&resolved.system)).map_err(|e| CliError::Io(e.to_string()))?;
    // The output location does not affect results.
    let hashed = RunConfig {
        out: PathBuf::new(),
        ..resolved.config.clone()
    };
    let config_json = serde_json::to_vec(&hashed).map_err(|e| CliError::Io(e.to_string()))?;
    let config_hash = sha256_hex(&[
        cmd.name().as_bytes(),
        &config_json,
        &system_json,
        gains_text.as_deref().unwrap_or_default(),
    ]);

    let mut ctx = Context {
        cmd,
        out: OutDir::create(&resolved.config.out)?,
        resolved,
        config_hash,
        gains_source: ov.gains.as_ref().map(|p| p.display().to_string()),
    };
    ctx.out.json("system.json", &SystemFile::from_system(&ctx.resolved.system))?;
    let exit = match cmd {
        Command::Synth => synth(&mut ctx),
        Command::Coordinate => coordinate(&mut ctx),
        Command::Simulate => simulate_cmd(&mut ctx, file_gains),
        Command::Verify => match file_gains {
            Some(g) => verify(&mut ctx, g),
            None => Err(CliError::Invalid("verify needs --gains".into())),
        },
    }?;
    ctx.write_manifest()?;
    Ok(exit)
}

struct Context {
    cmd: Command,
    resolved: Resolved,
    out: OutDir,
    config_hash: String,
    gains_source: Option<String>,
}

impl Context {
    fn write_manifest(&mut self) -> Result<(), CliError> {
        let mut outputs = self.out.written.clone();
        outputs.push("manifest.json".into());
        let m = Manifest {
            tool: "fuzzy-lsmpc",
            version: env!("CARGO_PKG_VERSION"),
            command: self.cmd.name().into(),
            system: self.resolved.system_name.clone(),
            seed: self.resolved.config.simulation.seed,
            config_hash: self.config_hash.clone(),
            gains_source: self.gains_source.clone(),
            config: &self.resolved.config,
            outputs,
        };
        self.out.json("manifest.json", &m)
    }

    fn setup(&self, steps: usize) -> SimulationSetup {
        let c = &self.resolved.config.simulation;
        SimulationSetup {
            steps,
            disturbance: self.resolved.disturbance.clone(),
            delays: c.delays.clone(),
            policy: c.policy,
        }
    }

    /// Explicit history as given; otherwise the default initial state,
    /// pulled inside the level sets when it lies beyond the configured
    /// fraction of the boundary.
    fn history_for(&self, gains: &GainSet) -> Vec<Vec<DVector<f64>>> {
        if self.resolved.explicit_history {
            return self.resolved.history.clone();
        }
        let x0 = &self.resolved.history[0];
        let f = self.resolved.config.simulation.initial_fraction;
        let scaled = datasets::scaled_into_level_set(x0, gains, f);
        let x = x0
            .iter()
            .zip(scaled)
            .map(|(a, b)| if b.norm() < a.norm() { b } else { a.clone() })
            .collect();
        vec![x]
    }

    fn write_gains(&mut self, gains: &GainSet) -> Result<(), CliError> {
        self.out.json("gains.json", &GainsFile::from_gains(gains))
    }

    fn write_trajectory(&mut self, traj: &mut Trajectory, gains_id: &str) -> Result<(), CliError> {
        traj.meta.gains_id = gains_id.into();
        traj.meta.seed = Some(self.resolved.config.simulation.seed);
        traj.meta.config_hash = Some(self.config_hash.clone());
        self.out.text("trajectory.csv", &trajectory_csv(traj))
    }
}

fn load_gains(path: &Path, r: &Resolved) -> Result<GainSet, CliError> {
    let g = read_json::<GainsFile>(path)?.to_gains()?;
    let sys = &r.system;
    if g.len() != sys.len() {
        return Err(CliError::Invalid(format!(
            "gains cover {} subsystems, system has {}",
            g.len(),
            sys.len()
        )));
    }
    for (i, s) in sys.subsystems.iter().enumerate() {
        let (n, m) = (s.state_dim(), s.input_dim());
        if g.k[i].len() != s.rule_count() || g.k[i].iter().any(|k| k.shape() != (m, n)) {
            return Err(CliError::Invalid(format!("gains of subsystem {i} must be {} matrices of {m}×{n}", s.rule_count())));
        }
        if g.x_shape[i].shape() != (n, n) || g.z[i].shape() != (m, m) || g.x_bar[i].len() != n {
            return Err(CliError::Invalid(format!("x_shape, z or x_bar of subsystem {i} has the wrong shape")));
        }
    }
    Ok(g)
}

#[derive(Serialize)]
struct SubsystemCertificate<'a> {
    subsystem: usize,
    sigma: f64,
    status: String,
    worst_reduced: Option<f64>,
    certificate: Option<&'a CertificateReport>,
}

fn certificate_json(gains: &GainSet, failures: &[serde_json::Value]) -> serde_json::Value {
    let subs: Vec<SubsystemCertificate> = (0..gains.len())
        .map(|i| SubsystemCertificate {
            subsystem: i,
            sigma: gains.sigma[i],
            status: format!("{:?}", gains.status[i]),
            worst_reduced: gains.certificates[i].as_ref().map(CertificateReport::worst_reduced),
            certificate: gains.certificates[i].as_ref(),
        })
        .collect();
    json!({
        "certified": gains.certified() && failures.is_empty(),
        "subsystems": subs,
        "failures": failures,
    })
}

fn synthesis_failure(e: SynthesisError) -> Result<(GainSet, Vec<serde_json::Value>), CliError> {
    match e {
        SynthesisError::InfeasibleSynthesis {
            failures, best_effort, ..
        } => {
            let f = failures
                .iter()
                .map(|f| {
                    json!({
                        "subsystem": f.subsystem,
                        "status": format!("{:?}", f.status),
                        "families": f.families.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
                        "worst": f.worst,
                    })
                })
                .collect();
            Ok((*best_effort, f))
        }
        other => Err(CliError::Invalid(other.to_string())),
    }
}

fn synth_gains(r: &Resolved) -> Result<(GainSet, Vec<serde_json::Value>), CliError> {
    let coord = CoordinationState::new(&r.system, 1);
    match synthesize(&r.system, &r.hp, &coord, &r.history, &SynthesisOptions::default()) {
        Ok(g) => Ok((g, Vec::new())),
        Err(e) => synthesis_failure(e),
    }
}

fn synth(ctx: &mut Context) -> Result<Exit, CliError> {
    let (gains, failures) = synth_gains(&ctx.resolved)?;
    ctx.write_gains(&gains)?;
    ctx.out.json("certificate.json", &certificate_json(&gains, &failures))?;
    for i in 0..gains.len() {
        say!(
            "S{}: sigma {:.6e}, status {:?}, worst reduced eigenvalue {}",
            i + 1,
            gains.sigma[i],
            gains.status[i],
            gains.certificates[i]
                .as_ref()
                .map_or("n/a".into(), |c| format!("{:+.3e}", c.worst_reduced()))
        );
    }
    if failures.is_empty() {
        say!("feasible");
        Ok(Exit::Ok)
    } else {
        say!("infeasible: best-effort gains written");
        Ok(Exit::Failed)
    }
}

fn coordinate(ctx: &mut Context) -> Result<Exit, CliError> {
    let r = &ctx.resolved;
    let c = &r.config.coordination;
    let mut cfg = AlgorithmConfig::new(&r.system, c.horizon);
    cfg.tolerance = c.tolerance;
    cfg.max_iterations = c.max_iterations;
    cfg.allow_uncertified = c.allow_uncertified;
    cfg.disturbance = r.disturbance.clone();
    cfg.delays = r.config.simulation.delays.clone();
    match run_algorithm(&r.system, &r.hp, &r.history, &cfg) {
        Ok(mut o) => {
            ctx.out.json("coordination.json", &o.report)?;
            ctx.write_gains(&o.gains)?;
            ctx.write_trajectory(&mut o.trajectory, "coordinated")?;
            say!(
                "converged after {} iterations, errors {:?}",
                o.report.iterations_used, o.report.error_per_iteration
            );
            Ok(Exit::Ok)
        }
        Err(CoordinationError::NoConvergence { report, best }) => {
            ctx.out.json("coordination.json", &report)?;
            if let Some(mut b) = best {
                ctx.write_gains(&b.gains)?;
                ctx.write_trajectory(&mut b.trajectory, "coordinated")?;
            }
            say!(
                "no convergence after {} iterations, errors {:?}",
                report.iterations_used, report.error_per_iteration
            );
            Ok(Exit::NoConvergence)
        }
        Err(CoordinationError::Synthesis(e)) => {
            let (gains, failures) = synthesis_failure(e)?;
            ctx.write_gains(&gains)?;
            ctx.out.json("certificate.json", &certificate_json(&gains, &failures))?;
            say!("synthesis infeasible inside the coordination loop");
            Ok(Exit::Failed)
        }
        Err(e) => Err(CliError::Invalid(e.to_string())),
    }
}

/// Gains from the file, the published set for `example2`, or a fresh
/// synthesis (best effort when infeasible).
fn obtain_gains(ctx: &Context, file: Option<GainSet>) -> Result<(GainSet, String), CliError> {
    if let Some(g) = file {
        return Ok((g, "file".into()));
    }
    if ctx.resolved.system_name == "example2" && ctx.resolved.config.hyperparams == Default::default() {
        return Ok((datasets::example2().published, "published".into()));
    }
    let (g, failures) = synth_gains(&ctx.resolved)?;
    if failures.is_empty() {
        Ok((g, "synthesized".into()))
    } else {
        warn!("synthesis infeasible; simulating best-effort gains");
        Ok((g, "best_effort".into()))
    }
}

/// First step after which `|x_i|_∞` stays within 1% of `|x_i(0)|_∞`.
fn settling_steps(traj: &Trajectory) -> Vec<Option<usize>> {
    (0..traj.subsystems())
        .map(|i| {
            let band = 0.01 * traj.states[0][i].amax();
            
            (0..=traj.steps)
                .rev()
                .take_while(|&k| traj.states[k][i].amax() <= band)
                .last()
        })
        .collect()
}

fn simulate_cmd(ctx: &mut Context, file: Option<GainSet>) -> Result<Exit, CliError> {
    let (gains, source) = obtain_gains(ctx, file)?;
    let r = &ctx.resolved;
    let history = ctx.history_for(&gains);
    let steps = r.config.simulation.steps;
    let mut traj = simulate(&r.system, &gains, &r.hp, &history, &ctx.setup(steps)).map_err(|e| CliError::Invalid(e.to_string()))?;
    let n_sub = r.system.len();
    let finite = traj.states.iter().flatten().all(|x| x.iter().all(|v| v.is_finite()));
    let peak: Vec<f64> = (0..n_sub)
        .map(|i| traj.states.iter().map(|x| x[i].amax()).fold(0.0, f64::max))
        .collect();
    let fin: Vec<f64> = (0..n_sub).map(|i| traj.states[steps][i].amax()).collect();
    let energy = |v: &Vec<Vec<DVector<f64>>>, i: usize| v.iter().map(|x| x[i].norm_squared()).sum::<f64>();
    let attenuation: Vec<Option<f64>> = (0..n_sub)
        .map(|i| {
            let d = energy(&traj.disturbances, i);
            (d > 0.0).then(|| (energy(&traj.states, i) / d).sqrt())
        })
        .collect();
    let outputs: Option<Vec<f64>> = r.system.outputs.as_ref().map(|c| {
        (0..n_sub)
            .map(|i| traj.states.iter().map(|x| (&c[i] * &x[i]).amax()).fold(0.0, f64::max))
            .collect()
    });
    let horizon = r.config.coordination.horizon.min(steps);
    let cost = total_cost(&traj, &gains, horizon);
    let iss = verify_iss_decrease(&traj, &gains, &r.hp, r.config.verify.margin);
    let in_rpi = traj.in_rpi.iter().flatten().filter(|b| **b).count();
    let report = json!({
        "gains": source,
        "certified": gains.certified(),
        "steps": steps,
        "bounded": finite && peak.iter().all(|p| *p < 1e6),
        "peak_state": peak,
        "final_state": fin,
        "peak_output": outputs,
        "settling_step": settling_steps(&traj),
        "attenuation": attenuation,
        "in_rpi_fraction": in_rpi as f64 / traj.in_rpi.iter().flatten().count().max(1) as f64,
        "cost_horizon": horizon,
        "cost_per_subsystem": cost.per_subsystem,
        "cost_total": cost.total,
        "iss_decrease": iss,
    });
    ctx.write_trajectory(&mut traj, &source)?;
    ctx.out.json("report.json", &report)?;
    say!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    Ok(Exit::Ok)
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: serde_json::Value,
}

fn verify(ctx: &mut Context, gains: GainSet) -> Result<Exit, CliError> {
    let r = &ctx.resolved;
    let sys = &r.system;
    let steps = r.config.simulation.steps;
    let margin = r.config.verify.margin;
    let mut checks = Vec::new();

    let mut coord = CoordinationState::new(sys, r.config.coordination.horizon);
    coord.set_costates(&gains);
    let certs = recheck_gains(sys, &r.hp, &gains, &coord, &r.history, &SynthesisOptions::default())
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let failing: Vec<serde_json::Value> = certs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            c.blocks
                .iter()
                .filter(|b| !b.holds)
                .map(move |b| json!({"subsystem": i, "block": b.label, "reduced_max_eig": b.reduced_max_eig, "margin": b.margin}))
        })
        .collect();
    checks.push(Check {
        name: "lmi_certificate",
        passed: failing.is_empty(),
        detail: json!({"failing_blocks": failing}),
    });

    let mc = verify_rpi_montecarlo(sys, &gains, &r.hp, r.config.verify.samples, r.config.simulation.seed)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    checks.push(Check {
        name: "rpi_montecarlo",
        passed: mc.violations() == 0,
        detail: serde_json::to_value(&mc).unwrap_or_default(),
    });

    let history = ctx.history_for(&gains);
    let traj = simulate(sys, &gains, &r.hp, &history, &ctx.setup(steps)).map_err(|e| CliError::Invalid(e.to_string()))?;
    let iss = verify_iss_decrease(&traj, &gains, &r.hp, margin);
    checks.push(Check {
        name: "iss_decrease",
        passed: iss.passed,
        detail: serde_json::to_value(&iss).unwrap_or_default(),
    });

    let term = verify_terminal_decrease(sys, &traj, &coord, &gains, &r.hp, margin).map_err(|e| CliError::Invalid(e.to_string()))?;
    checks.push(Check {
        name: "terminal_decrease",
        passed: term.passed,
        detail: serde_json::to_value(&term).unwrap_or_default(),
    });

    let mut violations = Vec::new();
    for (k, us) in traj.inputs.iter().enumerate() {
        for (i, u) in us.iter().enumerate() {
            if !traj.in_rpi[k][i] {
                continue;
            }
            let energy = u.norm_squared() > r.hp.h[i];
            let channel = u.iter().zip(&sys.u_max[i]).any(|(v, m)| v.abs() > *m);
            if energy || channel {
                violations.push(json!({"k": k, "subsystem": i, "u": u.as_slice()}));
            }
        }
    }
    checks.push(Check {
        name: "input_limits",
        passed: violations.is_empty(),
        detail: json!({"violations": violations}),
    });

    let (v, _) = razumikhin_values(&traj, &gains);
    let v_ok = v.iter().flatten().all(|x| x.is_finite() && *x >= 0.0);
    checks.push(Check {
        name: "lyapunov_nonnegative",
        passed: v_ok,
        detail: json!({}),
    });

    for c in &checks {
        say!("[{}] {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
    }
    let all = checks.iter().all(|c| c.passed);
    info!("{} of {} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    ctx.out.json("verify.json", &json!({"passed": all, "checks": checks}))?;
    Ok(if all { Exit::Ok } else { Exit::Failed })
}
