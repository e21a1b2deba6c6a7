use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sample_ball, SimulationError, Trajectory};
use crate::coordination::{hamiltonian_stage, CoordinationState};
use crate::fuzzy_model::{evaluate_membership, propagate, LargeScaleSystem};
use crate::lmi::{GainSet, SynthesisHyperparams};

fn quad(x: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

/// `max{xᵀPx, x_dᵀPx_d}` with `P = X/ς`, and whether it is `≤ ς`.
pub fn rpi_membership(x: &DVector<f64>, xd: &DVector<f64>, x_shape: &DMatrix<f64>, sigma: f64) -> (bool, f64) {
    let p = x_shape / sigma;
    let v = quad(x, &p).max(quad(xd, &p));
    (v <= sigma, v)
}

/// `V_i(k)` for `k = 0..=steps` and `V̄_i(k) = max{V_i(k), V_i(x_i(k - τ(k)))}`
/// for `k = 0..steps`, both indexed `[k][i]`.
pub fn razumikhin_values(traj: &Trajectory, gains: &GainSet) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_sub = traj.subsystems();
    let p: Vec<DMatrix<f64>> = (0..n_sub).map(|i| gains.lyapunov(i)).collect();
    let v: Vec<Vec<f64>> = traj
        .states
        .iter()
        .map(|xs| xs.iter().zip(&p).map(|(x, p)| quad(x, p)).collect())
        .collect();
    let vbar = (0..traj.steps)
        .map(|k| {
            (0..n_sub)
                .map(|i| v[k][i].max(quad(&traj.delayed[k][i], &p[i])))
                .collect()
        })
        .collect();
    (v, vbar)
}

/// Uniform sample from `{x : xᵀXx ≤ ς²}`.
fn sample_ellipsoid(rng: &mut ChaCha8Rng, x_shape: &DMatrix<f64>, sigma: f64) -> Result<DVector<f64>, SimulationError> {
    let n = x_shape.nrows();
    let chol = x_shape.clone().cholesky().ok_or_else(|| {
        SimulationError::Model(crate::fuzzy_model::ModelError::InvalidSystem(
            "shape matrix is not positive definite".into(),
        ))
    })?;
    // X = LLᵀ, so y = Lᵀx ranges over the ball of radius ς
    let y = sample_ball(rng, n, sigma);
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&y)
        .expect("Cholesky factor is nonsingular");
    Ok(x)
}

#[derive(Clone, Debug, Serialize)]
pub struct RpiMonteCarloReport {
    pub samples: usize,
    /// Samples where some `x_i⁺` left its level set.
    pub set_violations: usize,
    /// Samples where the summed decrease inequality failed.
    pub scalar_violations: usize,
    /// Largest `x_i⁺ᵀP_i x_i⁺ / ς_i` seen.
    pub worst_level_ratio: f64,
    /// Largest value of the summed inequality's left side.
    pub worst_scalar: f64,
    /// Disturbance radius used per subsystem.
    pub gamma_eff: Vec<f64>,
}

impl RpiMonteCarloReport {
    pub fn violations(&self) -> usize {
        self.set_violations.max(self.scalar_violations)
    }
}

/// Draw joint `(x_i, x_id)` from each level set and `d_i` from the
/// admissible ball, take one step and check that every `x_i⁺` stays in its
/// set and that
/// `Σ_i x_i⁺ᵀPx_i⁺/ς_i − (1−λ_i)/ς_i·max{…} − λ_i/γ_i²·d_iᵀd_i ≤ 0`.
///
/// The ball radius is `min(γ_i, √(ς_i/ϖ_i))`, and `γ_i² = ς_i/ϖ_i` weights
/// the disturbance term, which are the values the certificate covers.
pub fn verify_rpi_montecarlo(
    sys: &LargeScaleSystem,
    gains: &GainSet,
    hp: &SynthesisHyperparams,
    samples: usize,
    seed: u64,
) -> Result<RpiMonteCarloReport, SimulationError> {
    let n_sub = sys.len();
    if gains.len() != n_sub {
        return Err(SimulationError::GainMismatch {
            gains: gains.len(),
            system: n_sub,
        });
    }
    let implied = gains.implied_gamma_sq(hp);
    let gamma_eff: Vec<f64> = (0..n_sub).map(|i| sys.gamma[i].min(implied[i].sqrt())).collect();
    let p: Vec<DMatrix<f64>> = (0..n_sub).map(|i| gains.lyapunov(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RpiMonteCarloReport {
        samples,
        set_violations: 0,
        scalar_violations: 0,
        worst_level_ratio: 0.0,
        worst_scalar: f64::NEG_INFINITY,
        gamma_eff: gamma_eff.clone(),
    };
    for _ in 0..samples {
        let mut x = Vec::with_capacity(n_sub);
        let mut xd = Vec::with_capacity(n_sub);
        let mut d = Vec::with_capacity(n_sub);
        for i in 0..n_sub {
            x.push(sample_ellipsoid(&mut rng, &gains.x_shape[i], gains.sigma[i])?);
            xd.push(sample_ellipsoid(&mut rng, &gains.x_shape[i], gains.sigma[i])?);
            d.push(sample_ball(&mut rng, sys.subsystems[i].disturbance_dim(), gamma_eff[i]));
        }
        let mu = x
            .iter()
            .enumerate()
            .map(|(i, xi)| evaluate_membership(sys, i, xi))
            .collect::<Result<Vec<_>, _>>()?;
        let (next, _) = propagate(sys, &gains.k, &mu, &x, &xd, &d)?;
        let mut left_set = false;
        let mut scalar = 0.0;
        for i in 0..n_sub {
            let s = gains.sigma[i];
            let vn = quad(&next[i], &p[i]);
            let ratio = vn / s;
            report.worst_level_ratio = report.worst_level_ratio.max(ratio);
            left_set |= vn > s;
            let vmax = quad(&x[i], &p[i]).max(quad(&xd[i], &p[i]));
            let dist = if implied[i] > 0.0 {
                hp.lambda[i] / implied[i] * d[i].norm_squared()
            } else {
                0.0
            };
            scalar += vn / s - (1.0 - hp.lambda[i]) / s * vmax - dist;
        }
        report.worst_scalar = report.worst_scalar.max(scalar);
        report.set_violations += left_set as usize;
        report.scalar_violations += (scalar > 0.0) as usize;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct IssReport {
    /// Largest `V(k+1) − V̄(k) + xᵀQx − τdᵀd` over all steps and subsystems.
    pub max_residual: f64,
    /// `(k, i)` of every step exceeding `−margin`.
    pub failures: Vec<(usize, usize)>,
    /// Extreme eigenvalues of the `P_i` along the run.
    pub psi_min: f64,
    pub psi_max: f64,
    pub passed: bool,
}

/// Pointwise ISS decrease `V(k+1) − V̄(k) ≤ −xᵀQx + τdᵀd − margin`.
pub fn verify_iss_decrease(traj: &Trajectory, gains: &GainSet, hp: &SynthesisHyperparams, margin: f64) -> IssReport {
    let n_sub = traj.subsystems();
    let (mut psi_min, mut psi_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n_sub {
        let eig = SymmetricEigen::new(gains.lyapunov(i)).eigenvalues;
        psi_min = psi_min.min(eig.min());
        psi_max = psi_max.max(eig.max());
    }
    let (v, vbar) = razumikhin_values(traj, gains);
    let mut max_residual = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for k in 0..traj.steps {
        for i in 0..n_sub {
            let x = &traj.states[k][i];
            let d = &traj.disturbances[k][i];
            let r = v[k + 1][i] - vbar[k][i] + quad(x, &hp.q[i]) - hp.tau[i] * d.norm_squared();
            max_residual = max_residual.max(r);
            if r > -margin {
                failures.push((k, i));
            }
        }
    }
    IssReport {
        max_residual,
        passed: failures.is_empty(),
        failures,
        psi_min,
        psi_max,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TerminalReport {
    /// Steps where every state was nonzero and in its level set.
    pub checked: usize,
    /// `(k, lhs, rhs)` for steps violating `lhs ≤ rhs − margin`.
    pub failures: Vec<(usize, f64, f64)>,
    pub passed: bool,
}

/// `Σ_i V_i(x_i(k+1)) − V_i(x_i(k)) ≤ −Σ_i H_i(k) − margin` at steps where
/// every `x_i(k)` is nonzero and inside its level set. `H_i(k)` is the
/// Hamiltonian stage term with the coordination data of instant
/// `min(k, K−1)`.
pub fn verify_terminal_decrease(
    sys: &LargeScaleSystem,
    traj: &Trajectory,
    coord: &CoordinationState,
    gains: &GainSet,
    hp: &SynthesisHyperparams,
    margin: f64,
) -> Result<TerminalReport, SimulationError> {
    let n_sub = traj.subsystems();
    let p: Vec<DMatrix<f64>> = (0..n_sub).map(|i| gains.lyapunov(i)).collect();
    let mut checked = 0;
    let mut failures = Vec::new();
    for k in 0..traj.steps {
        let active = (0..n_sub).all(|i| traj.in_rpi[k][i] && traj.states[k][i].amax() > 0.0);
        if !active {
            continue;
        }
        checked += 1;
        let lhs: f64 = (0..n_sub)
            .map(|i| quad(&traj.states[k + 1][i], &p[i]) - quad(&traj.states[k][i], &p[i]))
            .sum();
        let kc = k.min(coord.horizon.saturating_sub(1));
        let mut h = 0.0;
        for i in 0..n_sub {
            h += hamiltonian_stage(sys, hp, coord, traj, i, k, kc)?;
        }
        if lhs > -h - margin {
            failures.push((k, lhs, -h));
        }
    }
    Ok(TerminalReport {
        checked,
        passed: failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use crate::fuzzy_model::DelaySchedule;
    use crate::simulation::{simulate, DisturbanceKind, DisturbanceModel, SimulationSetup};

    fn scalar_gains(k: f64, x: f64, sigma: f64) -> GainSet {
        GainSet::frozen(
            vec![vec![DMatrix::from_element(1, 1, k)]],
            vec![DMatrix::from_element(1, 1, x)],
            vec![sigma],
        )
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn membership_examples() {
        let one = DMatrix::identity(1, 1);
        assert_eq!(rpi_membership(&v1(0.0), &v1(0.0), &one, 1.0), (true, 0.0));
        assert_eq!(rpi_membership(&v1(2.0), &v1(0.0), &one, 1.0), (false, 4.0));
        // boundary: X = 1, ς = 2 gives P = 0.5 and xᵀPx = 2 at x = 2
        assert_eq!(rpi_membership(&v1(2.0), &v1(0.0), &one, 2.0), (true, 2.0));
    }

    #[test]
    fn razumikhin_constant_history_and_decay() {
        let mut sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        // constant state: A + Bk + A_d = 1
        let g = scalar_gains(0.25, 1.0, 1.0);
        let t = simulate(&sys, &g, &hp, &[vec![v1(0.3)]], &SimulationSetup::new(&sys, 5)).unwrap();
        for k in 0..5 {
            assert!((t.vbar[k][0] - t.v[k][0]).abs() < 1e-15);
        }
        sys.subsystems[0].a_d[0] = DMatrix::zeros(1, 1);
        let g = scalar_gains(0.0, 1.0, 1.0);
        let t = simulate(&sys, &g, &hp, &[vec![v1(1.0)]], &SimulationSetup::new(&sys, 6)).unwrap();
        for k in 1..6 {
            assert_eq!(t.vbar[k][0], t.v[k - 1][0]);
        }
    }

    #[test]
    fn montecarlo_zero_case_and_negative_control() {
        let sys = datasets::zero_subsystem();
        let hp = SynthesisHyperparams::for_system(&sys, vec![0.5], vec![DMatrix::identity(1, 1)]);
        let r = verify_rpi_montecarlo(&sys, &scalar_gains(0.0, 1.0, 1.0), &hp, 200, 1).unwrap();
        assert_eq!(r.violations(), 0);

        // A + Bk = 0.5 contracts; ×10 gain gives 0.5 - 10·... leaves the set
        let sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        let good = scalar_gains(-0.5, 1.0, 1.0);
        assert_eq!(verify_rpi_montecarlo(&sys, &good, &hp, 2000, 7).unwrap().violations(), 0);
        let bad = good.scaled(10.0);
        assert!(verify_rpi_montecarlo(&sys, &bad, &hp, 2000, 7).unwrap().violations() > 0);
    }

    #[test]
    fn iss_zero_trajectory_boundary_passes() {
        let sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        let g = scalar_gains(-0.5, 1.0, 1.0);
        let t = simulate(&sys, &g, &hp, &[vec![v1(0.0)]], &SimulationSetup::new(&sys, 5)).unwrap();
        let r = verify_iss_decrease(&t, &g, &hp, 0.0);
        assert!(r.passed);
        assert_eq!(r.max_residual, 0.0);
        assert!(!verify_iss_decrease(&t, &g, &hp, 1e-9).passed);
    }

    #[test]
    fn iss_detects_expanding_gain() {
        let sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        let g = scalar_gains(1.0, 1.0, 1.0);
        let t = simulate(&sys, &g, &hp, &[vec![v1(0.1)]], &SimulationSetup::new(&sys, 5)).unwrap();
        let r = verify_iss_decrease(&t, &g, &hp, 0.0);
        assert!(!r.passed);
        assert_eq!(r.failures[0], (0, 0));
        assert_eq!((r.psi_min, r.psi_max), (1.0, 1.0));
    }

    #[test]
    fn terminal_decrease_hand_values() {
        // x⁺ = 0.5x − 0.5x + 0.25x_d: from constant history 0.4, x(1) = 0.1
        let sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        let g = scalar_gains(-0.5, 1.0, 1.0);
        let mut setup = SimulationSetup::new(&sys, 1);
        setup.delays = DelaySchedule::Constant { delay: 1 };
        setup.disturbance = DisturbanceModel {
            kinds: vec![DisturbanceKind::Zero],
        };
        let t = simulate(&sys, &g, &hp, &[vec![v1(0.4)]], &setup).unwrap();
        assert!((t.states[1][0][0] - 0.1).abs() < 1e-15);
        let coord = CoordinationState::new(&sys, 1);
        let r = verify_terminal_decrease(&sys, &t, &coord, &g, &hp, 0.0).unwrap();
        // lhs = 0.01 - 0.16 = -0.15; H = 0.1·0.16 + 0.04 = 0.056
        assert_eq!(r.checked, 1);
        assert!(r.passed);
        let r = verify_terminal_decrease(&sys, &t, &coord, &g, &hp, 0.1).unwrap();
        assert!(!r.passed);
        assert!((r.failures[0].1 + 0.15).abs() < 1e-12);
        assert!((r.failures[0].2 + 0.056).abs() < 1e-12);
    }

    #[test]
    fn terminal_check_skips_zero_states() {
        let sys = datasets::scalar_plant(1.0);
        let hp = datasets::decoupled_scalar().hp;
        let g = scalar_gains(-0.5, 1.0, 1.0);
        let t = simulate(&sys, &g, &hp, &[vec![v1(0.0)]], &SimulationSetup::new(&sys, 4)).unwrap();
        let coord = CoordinationState::new(&sys, 1);
        let r = verify_terminal_decrease(&sys, &t, &coord, &g, &hp, 0.0).unwrap();
        assert_eq!(r.checked, 0);
        assert!(r.passed);
    }
}
