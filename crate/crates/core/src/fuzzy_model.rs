//! Takagi-Sugeno fuzzy subsystems, membership evaluation, delay buffers and
//! one-step closed-loop propagation of the interconnected plant.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("all raw membership weights vanish for subsystem {0}")]
    AllZeroWeights(usize),
    #[error("invalid membership for subsystem {0}: {1}")]
    InvalidMembership(usize, String),
    #[error("no gain for subsystem {subsystem} rule {rule}")]
    MissingGain { subsystem: usize, rule: usize },
    #[error("delay buffer holds {available} past samples, {requested} requested")]
    BufferUnderflow { requested: usize, available: usize },
    #[error("delay {delay} outside [1, {bound}]")]
    DelayOutOfRange { delay: usize, bound: usize },
    #[error("disturbance of subsystem {subsystem} has norm² {norm_sq:.3e} > γ² = {bound:.3e}")]
    InadmissibleDisturbance {
        subsystem: usize,
        norm_sq: f64,
        bound: f64,
    },
    #[error("invalid system: {0}")]
    InvalidSystem(String),
}

/// Premise membership functions of one subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Membership {
    /// One rule, weight 1.
    Single,
    /// Two rules: `cos²(x[state_index])` and `1 - cos²(x[state_index])`.
    Cos2 { state_index: usize },
    /// Triangular partition of `x[state_index]` with one rule per centre.
    /// Outside the outermost centres the end rules saturate at 1.
    Triangular {
        state_index: usize,
        centers: Vec<f64>,
    },
    /// Constant raw weights, normalised on evaluation.
    Fixed { weights: Vec<f64> },
}

pub const ZERO_WEIGHT_FLOOR: f64 = 1e-300;

impl Membership {
    pub fn rule_count(&self) -> usize {
        match self {
            Membership::Single => 1,
            Membership::Cos2 { .. } => 2,
            Membership::Triangular { centers, .. } => centers.len(),
            Membership::Fixed { weights } => weights.len(),
        }
    }

    fn premise_index(&self) -> Option<usize> {
        match self {
            Membership::Cos2 { state_index } | Membership::Triangular { state_index, .. } => {
                Some(*state_index)
            }
            _ => None,
        }
    }

    pub fn validate(&self, subsystem: usize, n: usize) -> Result<(), ModelError> {
        if let Some(s) = self.premise_index() {
            if s >= n {
                return Err(ModelError::InvalidMembership(
                    subsystem,
                    format!("premise index {s} out of range for state dimension {n}"),
                ));
            }
        }
        match self {
            Membership::Triangular { centers, .. } => {
                if centers.is_empty() || centers.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(ModelError::InvalidMembership(
                        subsystem,
                        "triangular centres must be non-empty and strictly increasing".into(),
                    ));
                }
            }
            Membership::Fixed { weights }
                if (weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())) => {
                    return Err(ModelError::InvalidMembership(
                        subsystem,
                        "fixed weights must be finite and non-negative".into(),
                    ));
                }
            _ => {}
        }
        Ok(())
    }

    /// Unnormalised rule weights at premise state `z`.
    pub fn raw_weights(&self, z: &DVector<f64>) -> Vec<f64> {
        match self {
            Membership::Single => vec![1.0],
            Membership::Cos2 { state_index } => {
                let c = z[*state_index].cos();
                let c2 = c * c;
                vec![c2, 1.0 - c2]
            }
            Membership::Triangular {
                state_index,
                centers,
            } => triangular(z[*state_index], centers),
            Membership::Fixed { weights } => weights.clone(),
        }
    }

    /// Normalise raw weights onto the simplex.
    pub fn normalize(raw: &[f64], subsystem: usize) -> Result<Vec<f64>, ModelError> {
        if raw.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(ModelError::InvalidMembership(
                subsystem,
                format!("raw weights {raw:?} must be non-negative"),
            ));
        }
        if raw.iter().all(|w| *w < ZERO_WEIGHT_FLOOR) {
            return Err(ModelError::AllZeroWeights(subsystem));
        }
        let total: f64 = raw.iter().sum();
        Ok(raw.iter().map(|w| w / total).collect())
    }
}

fn triangular(v: f64, c: &[f64]) -> Vec<f64> {
    let r = c.len();
    let mut w = vec![0.0; r];
    if r == 1 || v <= c[0] {
        w[0] = 1.0;
        return w;
    }
    if v >= c[r - 1] {
        w[r - 1] = 1.0;
        return w;
    }
    let k = c.windows(2).position(|p| v >= p[0] && v <= p[1]).unwrap_or(0);
    let t = (v - c[k]) / (c[k + 1] - c[k]);
    w[k] = 1.0 - t;
    w[k + 1] = t;
    w
}

/// Local rule matrices of subsystem `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsystemRules {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub a_d: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    /// `f_ij` keyed by neighbour index `j` (0-based). Absent pairs are zero.
    pub interconnections: BTreeMap<usize, DMatrix<f64>>,
    pub membership: Membership,
}

impl SubsystemRules {
    pub fn rule_count(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.w[0].ncols()
    }

    fn validate(&self, i: usize, dims: &[usize]) -> Result<(), ModelError> {
        let r = self.a.len();
        if r == 0 {
            return Err(ModelError::InvalidSystem(format!("subsystem {i} has no rules")));
        }
        if self.b.len() != r || self.a_d.len() != r || self.w.len() != r {
            return Err(ModelError::InvalidSystem(format!(
                "subsystem {i}: rule counts differ (A {r}, B {}, A_d {}, w {})",
                self.b.len(),
                self.a_d.len(),
                self.w.len()
            )));
        }
        if self.membership.rule_count() != r {
            return Err(ModelError::InvalidSystem(format!(
                "subsystem {i}: membership has {} rules, matrices have {r}",
                self.membership.rule_count()
            )));
        }
        let n = dims[i];
        let m = self.b[0].ncols();
        let c = self.w[0].ncols();
        for l in 0..r {
            let shape_ok = self.a[l].shape() == (n, n)
                && self.a_d[l].shape() == (n, n)
                && self.b[l].shape() == (n, m)
                && self.w[l].shape() == (n, c);
            if !shape_ok {
                return Err(ModelError::DimensionMismatch(format!(
                    "subsystem {i} rule {l}: A {:?}, A_d {:?}, B {:?}, w {:?}",
                    self.a[l].shape(),
                    self.a_d[l].shape(),
                    self.b[l].shape(),
                    self.w[l].shape()
                )));
            }
        }
        for (&j, f) in &self.interconnections {
            if j == i || j >= dims.len() {
                return Err(ModelError::InvalidSystem(format!(
                    "subsystem {i}: interconnection to invalid neighbour {j}"
                )));
            }
            if f.shape() != (n, dims[j]) {
                return Err(ModelError::DimensionMismatch(format!(
                    "f[{i}][{j}] is {:?}, expected ({n}, {})",
                    f.shape(),
                    dims[j]
                )));
            }
        }
        self.membership.validate(i, n)
    }
}

/// Convex combination of one subsystem's rule matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendedMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LargeScaleSystem {
    pub subsystems: Vec<SubsystemRules>,
    /// Upper bound `h` on the delay.
    pub delay_bound: usize,
    /// Disturbance bound: admissible `d_i` satisfy `d_iᵀd_i ≤ γ_i²`.
    pub gamma: Vec<f64>,
    /// Per-channel input magnitude limits.
    pub u_max: Vec<Vec<f64>>,
    /// Optional output maps `y_i = C_i x_i`.
    pub outputs: Option<Vec<DMatrix<f64>>>,
}

impl LargeScaleSystem {
    pub fn new(
        subsystems: Vec<SubsystemRules>,
        delay_bound: usize,
        gamma: Vec<f64>,
        u_max: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let sys = Self {
            subsystems,
            delay_bound,
            gamma,
            u_max,
            outputs: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_outputs(mut self, outputs: Vec<DMatrix<f64>>) -> Result<Self, ModelError> {
        self.outputs = Some(outputs);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n_sub = self.subsystems.len();
        if n_sub == 0 {
            return Err(ModelError::InvalidSystem("no subsystems".into()));
        }
        if self.delay_bound == 0 {
            return Err(ModelError::InvalidSystem("delay bound h must be ≥ 1".into()));
        }
        if self.gamma.len() != n_sub || self.u_max.len() != n_sub {
            return Err(ModelError::InvalidSystem(format!(
                "{n_sub} subsystems but {} γ and {} u_max entries",
                self.gamma.len(),
                self.u_max.len()
            )));
        }
        let dims: Vec<usize> = self
            .subsystems
            .iter()
            .map(|s| s.a.first().map_or(0, |a| a.nrows()))
            .collect();
        for (i, s) in self.subsystems.iter().enumerate() {
            s.validate(i, &dims)?;
            if !(self.gamma[i] >= 0.0) || !self.gamma[i].is_finite() {
                return Err(ModelError::InvalidSystem(format!("γ[{i}] must be finite and ≥ 0")));
            }
            if self.u_max[i].len() != s.input_dim() || self.u_max[i].iter().any(|u| !(*u > 0.0)) {
                return Err(ModelError::InvalidSystem(format!(
                    "u_max[{i}] must hold {} positive entries",
                    s.input_dim()
                )));
            }
        }
        if let Some(c) = &self.outputs {
            if c.len() != n_sub || c.iter().zip(&dims).any(|(c, n)| c.ncols() != *n) {
                return Err(ModelError::DimensionMismatch("output maps".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn state_dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(SubsystemRules::state_dim).collect()
    }

    /// `f_ij`, or a zero block when the pair is not coupled.
    pub fn interconnection(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.subsystems[i]
            .interconnections
            .get(&j)
            .cloned()
            .unwrap_or_else(|| {
                DMatrix::zeros(
                    self.subsystems[i].state_dim(),
                    self.subsystems[j].state_dim(),
                )
            })
    }

    /// Neighbours `j ≠ i` in ascending order.
    pub fn others(&self, i: usize) -> impl Iterator<Item = usize> {
        (0..self.len()).filter(move |&j| j != i)
    }
}

pub fn evaluate_membership(
    sys: &LargeScaleSystem,
    i: usize,
    z: &DVector<f64>,
) -> Result<Vec<f64>, ModelError> {
    let sub = &sys.subsystems[i];
    if z.len() != sub.state_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "premise vector for subsystem {i} has length {}, expected {}",
            z.len(),
            sub.state_dim()
        )));
    }
    Membership::normalize(&sub.membership.raw_weights(z), i)
}

pub fn blend(sys: &LargeScaleSystem, i: usize, mu: &[f64]) -> Result<BlendedMatrices, ModelError> {
    let sub = &sys.subsystems[i];
    if mu.len() != sub.rule_count() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} weights for {} rules",
            mu.len(),
            sub.rule_count()
        )));
    }
    let mix = |ms: &[DMatrix<f64>]| {
        ms.iter()
            .zip(mu)
            .fold(DMatrix::zeros(ms[0].nrows(), ms[0].ncols()), |acc, (m, w)| acc + m * *w)
    };
    Ok(BlendedMatrices {
        a: mix(&sub.a),
        b: mix(&sub.b),
        a_d: mix(&sub.a_d),
        w: mix(&sub.w),
    })
}

/// Blended feedback `u = (Σ_l μ_l k_l) x`.
pub fn control_output(
    gains: &[DMatrix<f64>],
    subsystem: usize,
    mu: &[f64],
    x: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    if gains.len() < mu.len() {
        return Err(ModelError::MissingGain {
            subsystem,
            rule: gains.len(),
        });
    }
    let k = blended_gain(gains, mu);
    if k.ncols() != x.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "gain has {} columns, state has {}",
            k.ncols(),
            x.len()
        )));
    }
    Ok(k * x)
}

pub fn blended_gain(gains: &[DMatrix<f64>], mu: &[f64]) -> DMatrix<f64> {
    gains
        .iter()
        .zip(mu)
        .fold(DMatrix::zeros(gains[0].nrows(), gains[0].ncols()), |acc, (k, w)| acc + k * *w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelaySchedule {
    Constant { delay: usize },
    /// Repeats `pattern` cyclically.
    Periodic { pattern: Vec<usize> },
    /// Uniform on `[1, h]`, reproducible from the seed.
    Random { seed: u64 },
}

impl Default for DelaySchedule {
    fn default() -> Self {
        DelaySchedule::Constant { delay: 1 }
    }
}

impl DelaySchedule {
    /// Delays `τ(k) ∈ [1, h]` for `k = 0..steps`; `x_d(k) = x(k - τ(k))`.
    pub fn realize(&self, steps: usize, h: usize) -> Result<Vec<usize>, ModelError> {
        let check = |d: usize| {
            if d == 0 || d > h {
                Err(ModelError::DelayOutOfRange { delay: d, bound: h })
            } else {
                Ok(d)
            }
        };
        match self {
            DelaySchedule::Constant { delay } => {
                check(*delay)?;
                Ok(vec![*delay; steps])
            }
            DelaySchedule::Periodic { pattern } => {
                if pattern.is_empty() {
                    return Err(ModelError::InvalidSystem("empty delay pattern".into()));
                }
                for &d in pattern {
                    check(d)?;
                }
                Ok((0..steps).map(|k| pattern[k % pattern.len()]).collect())
            }
            DelaySchedule::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok((0..steps).map(|_| rng.random_range(1..=h)).collect())
            }
        }
    }
}

/// Rolling window of the last `h + 1` global states.
#[derive(Clone, Debug)]
pub struct DelayBuffer {
    h: usize,
    /// Oldest first; the back is the current state.
    window: VecDeque<Vec<DVector<f64>>>,
}

impl DelayBuffer {
    /// Seed from an initial segment `x(-p), ..., x(0)`, oldest first.
    pub fn new(h: usize, segment: Vec<Vec<DVector<f64>>>) -> Result<Self, ModelError> {
        if segment.is_empty() {
            return Err(ModelError::InvalidSystem("empty initial segment".into()));
        }
        let mut window: VecDeque<_> = segment.into();
        while window.len() > h + 1 {
            window.pop_front();
        }
        Ok(Self { h, window })
    }

    /// History held constant at `x0` over `[-h, 0]`.
    pub fn constant(h: usize, x0: Vec<DVector<f64>>) -> Self {
        Self {
            h,
            window: std::iter::repeat_n(x0, h + 1).collect(),
        }
    }

    pub fn current(&self) -> &[DVector<f64>] {
        self.window.back().expect("buffer is never empty")
    }

    /// `x(k - tau)`.
    pub fn delayed(&self, tau: usize) -> Result<&[DVector<f64>], ModelError> {
        let available = self.window.len() - 1;
        if tau > available {
            return Err(ModelError::BufferUnderflow {
                requested: tau,
                available,
            });
        }
        Ok(&self.window[available - tau])
    }

    pub fn push(&mut self, x: Vec<DVector<f64>>) {
        self.window.push_back(x);
        if self.window.len() > self.h + 1 {
            self.window.pop_front();
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &Vec<DVector<f64>>> {
        self.window.iter()
    }
}

/// How disturbances outside `D_i` are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmissibilityPolicy {
    #[default]
    Warn,
    Reject,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub memberships: Vec<Vec<f64>>,
    pub delayed: Vec<DVector<f64>>,
}

/// Propagate all subsystems one step with memberships already fixed.
pub fn propagate(
    sys: &LargeScaleSystem,
    gains: &[Vec<DMatrix<f64>>],
    mu: &[Vec<f64>],
    x: &[DVector<f64>],
    x_delayed: &[DVector<f64>],
    d: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), ModelError> {
    let n_sub = sys.len();
    if x.len() != n_sub || x_delayed.len() != n_sub || d.len() != n_sub || mu.len() != n_sub {
        return Err(ModelError::DimensionMismatch(format!(
            "expected {n_sub} subsystems in state, delayed state, disturbance and memberships"
        )));
    }
    if gains.len() != n_sub {
        return Err(ModelError::MissingGain {
            subsystem: gains.len().min(n_sub),
            rule: 0,
        });
    }
    let mut next = Vec::with_capacity(n_sub);
    let mut inputs = Vec::with_capacity(n_sub);
    for i in 0..n_sub {
        let sub = &sys.subsystems[i];
        if x[i].len() != sub.state_dim()
            || x_delayed[i].len() != sub.state_dim()
            || d[i].len() != sub.disturbance_dim()
        {
            return Err(ModelError::DimensionMismatch(format!("signals of subsystem {i}")));
        }
        let bl = blend(sys, i, &mu[i])?;
        let u = control_output(&gains[i], i, &mu[i], &x[i])?;
        if u.len() != sub.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "gain of subsystem {i} produces {} inputs, expected {}",
                u.len(),
                sub.input_dim()
            )));
        }
        let mut xn = &bl.a * &x[i] + &bl.b * &u + &bl.a_d * &x_delayed[i] + &bl.w * &d[i];
        for (&j, f) in &sub.interconnections {
            xn += f * &x[j];
        }
        next.push(xn);
        inputs.push(u);
    }
    Ok((next, inputs))
}

/// Advance the closed loop by one step and push the new state into `buffer`.
pub fn step_closed_loop(
    sys: &LargeScaleSystem,
    gains: &[Vec<DMatrix<f64>>],
    buffer: &mut DelayBuffer,
    tau: usize,
    d: &[DVector<f64>],
    policy: AdmissibilityPolicy,
) -> Result<StepOutcome, ModelError> {
    if tau == 0 || tau > sys.delay_bound {
        return Err(ModelError::DelayOutOfRange {
            delay: tau,
            bound: sys.delay_bound,
        });
    }
    check_disturbances(sys, d, policy)?;
    let x = buffer.current().to_vec();
    let xd = buffer.delayed(tau)?.to_vec();
    let mu = x
        .iter()
        .enumerate()
        .map(|(i, xi)| evaluate_membership(sys, i, xi))
        .collect::<Result<Vec<_>, _>>()?;
    let (next, inputs) = propagate(sys, gains, &mu, &x, &xd, d)?;
    buffer.push(next.clone());
    Ok(StepOutcome {
        next,
        inputs,
        memberships: mu,
        delayed: xd,
    })
}

pub fn check_disturbances(
    sys: &LargeScaleSystem,
    d: &[DVector<f64>],
    policy: AdmissibilityPolicy,
) -> Result<(), ModelError> {
    if policy == AdmissibilityPolicy::Ignore {
        return Ok(());
    }
    for (i, di) in d.iter().enumerate() {
        let norm_sq = di.norm_squared();
        let bound = sys.gamma[i] * sys.gamma[i];
        if norm_sq > bound * (1.0 + 1e-12) {
            match policy {
                AdmissibilityPolicy::Reject => {
                    return Err(ModelError::InadmissibleDisturbance {
                        subsystem: i,
                        norm_sq,
                        bound,
                    })
                }
                _ => log::warn!("disturbance of subsystem {i} leaves D_i: {norm_sq:.3e} > {bound:.3e}"),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn two_rule_sub() -> SubsystemRules {
        let a1 = mat(2, 2, &[0.55, 0.05, 0.0, 0.42]);
        let a2 = mat(2, 2, &[0.4, 0.0, 0.0, 0.08]);
        SubsystemRules {
            a_d: vec![&a1 * 0.5, &a2 * 0.5],
            a: vec![a1, a2],
            b: vec![mat(2, 1, &[1.0, 0.0]), mat(2, 1, &[0.0, 1.0])],
            w: vec![mat(2, 1, &[0.1, 0.0]), mat(2, 1, &[0.0, 0.1])],
            interconnections: BTreeMap::new(),
            membership: Membership::Cos2 { state_index: 1 },
        }
    }

    fn pair(coupling: f64) -> LargeScaleSystem {
        let mut s0 = two_rule_sub();
        let mut s1 = two_rule_sub();
        s0.interconnections.insert(1, DMatrix::identity(2, 2) * coupling);
        s1.interconnections.insert(0, DMatrix::identity(2, 2) * coupling);
        LargeScaleSystem::new(vec![s0, s1], 2, vec![0.1, 0.1], vec![vec![1.0], vec![1.0]]).unwrap()
    }

    fn gains() -> Vec<Vec<DMatrix<f64>>> {
        let k = vec![mat(1, 2, &[-0.3, 0.1]), mat(1, 2, &[0.05, -0.2])];
        vec![k.clone(), k]
    }

    #[test]
    fn cos2_at_origin_selects_first_rule() {
        let sys = pair(0.0);
        let mu = evaluate_membership(&sys, 0, &DVector::from_vec(vec![0.3, 0.0])).unwrap();
        assert_eq!(mu, vec![1.0, 0.0]);
    }

    #[test]
    fn normalises_equal_raw_weights() {
        assert_eq!(Membership::normalize(&[2.0, 2.0], 0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn all_zero_weights_rejected() {
        assert_eq!(
            Membership::normalize(&[0.0, 1e-301], 3),
            Err(ModelError::AllZeroWeights(3))
        );
    }

    #[test]
    fn wrong_premise_dimension() {
        let sys = pair(0.0);
        assert!(matches!(
            evaluate_membership(&sys, 0, &DVector::zeros(3)),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_rule_blend_is_identity() {
        let mut sub = two_rule_sub();
        sub.a.truncate(1);
        sub.b.truncate(1);
        sub.a_d.truncate(1);
        sub.w.truncate(1);
        sub.membership = Membership::Single;
        let a = sub.a[0].clone();
        let sys = LargeScaleSystem::new(vec![sub], 1, vec![0.0], vec![vec![1.0]]).unwrap();
        assert_eq!(blend(&sys, 0, &[1.0]).unwrap().a, a);
    }

    #[test]
    fn control_law_matches_hand_value() {
        let k = vec![mat(1, 2, &[1.0, 0.0]), mat(1, 2, &[0.0, 1.0])];
        let u = control_output(&k, 0, &[0.5, 0.5], &DVector::from_vec(vec![2.0, 4.0])).unwrap();
        assert_eq!(u[0], 3.0);
        let err = control_output(&k[..1], 0, &[0.5, 0.5], &DVector::zeros(2));
        assert!(matches!(err, Err(ModelError::MissingGain { .. })));
    }

    #[test]
    fn zero_gain_no_coupling_scalar_step() {
        let one = |v: f64| mat(1, 1, &[v]);
        let sub = SubsystemRules {
            a: vec![one(0.5)],
            b: vec![one(1.0)],
            a_d: vec![one(0.1)],
            w: vec![one(0.0)],
            interconnections: BTreeMap::new(),
            membership: Membership::Single,
        };
        let sys = LargeScaleSystem::new(vec![sub], 1, vec![0.0], vec![vec![1.0]]).unwrap();
        let mut buf = DelayBuffer::new(1, vec![vec![DVector::from_element(1, 1.0)], vec![DVector::from_element(1, 2.0)]]).unwrap();
        let out = step_closed_loop(&sys, &[vec![one(0.0)]], &mut buf, 1, &[DVector::zeros(1)], AdmissibilityPolicy::Reject).unwrap();
        assert!((out.next[0][0] - 1.1).abs() < 1e-15);
        assert_eq!(buf.current()[0][0], out.next[0][0]);
    }

    #[test]
    fn buffer_underflow_reported() {
        let buf = DelayBuffer::new(3, vec![vec![DVector::zeros(1)]]).unwrap();
        assert_eq!(
            buf.delayed(1).unwrap_err(),
            ModelError::BufferUnderflow {
                requested: 1,
                available: 0
            }
        );
    }

    #[test]
    fn inadmissible_disturbance_rejected() {
        let sys = pair(0.0);
        let mut buf = DelayBuffer::constant(2, vec![DVector::zeros(2), DVector::zeros(2)]);
        let d = vec![DVector::from_element(1, 0.2), DVector::zeros(1)];
        let err = step_closed_loop(&sys, &gains(), &mut buf, 1, &d, AdmissibilityPolicy::Reject);
        assert!(matches!(err, Err(ModelError::InadmissibleDisturbance { subsystem: 0, .. })));
    }

    #[test]
    fn random_delays_are_reproducible_and_bounded() {
        let s = DelaySchedule::Random { seed: 9 };
        let a = s.realize(200, 4).unwrap();
        assert_eq!(a, s.realize(200, 4).unwrap());
        assert!(a.iter().all(|d| (1..=4).contains(d)));
        assert!(DelaySchedule::Constant { delay: 5 }.realize(3, 4).is_err());
    }

    #[test]
    fn triangular_partition() {
        let c = [-1.0, 0.0, 1.0];
        assert_eq!(triangular(-0.5, &c), vec![0.5, 0.5, 0.0]);
        assert_eq!(triangular(3.0, &c), vec![0.0, 0.0, 1.0]);
    }

    fn vec2(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    proptest! {
        #[test]
        fn memberships_lie_on_simplex(z0 in -10.0f64..10.0, z1 in -10.0f64..10.0) {
            let z = vec2(&[z0, z1]);
            for m in [
                Membership::Cos2 { state_index: 1 },
                Membership::Triangular { state_index: 0, centers: vec![-1.0, 0.0, 2.0] },
            ] {
                let mu = Membership::normalize(&m.raw_weights(&z), 0).unwrap();
                prop_assert!(mu.iter().all(|w| *w >= 0.0));
                prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn vertex_blend_recovers_rule(l in 0usize..2) {
            let sys = pair(0.1);
            let mut mu = vec![0.0; 2];
            mu[l] = 1.0;
            let bl = blend(&sys, 0, &mu).unwrap();
            prop_assert_eq!(&bl.a, &sys.subsystems[0].a[l]);
            prop_assert_eq!(&bl.b, &sys.subsystems[0].b[l]);
        }

        #[test]
        fn decoupled_subsystems_evolve_independently(
            x0 in prop::collection::vec(-1.0f64..1.0, 2),
            x1a in prop::collection::vec(-1.0f64..1.0, 2),
            x1b in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let sys = pair(0.0);
            let run = |x1: &[f64]| {
                let mut buf = DelayBuffer::constant(2, vec![vec2(&x0), vec2(x1)]);
                let d = vec![DVector::zeros(1), DVector::zeros(1)];
                for _ in 0..5 {
                    step_closed_loop(&sys, &gains(), &mut buf, 2, &d, AdmissibilityPolicy::Reject).unwrap();
                }
                buf.current()[0].clone()
            };
            prop_assert_eq!(run(&x1a), run(&x1b));
        }

        #[test]
        fn frozen_premise_superposition(
            xa in prop::collection::vec(-1.0f64..1.0, 8),
            xb in prop::collection::vec(-1.0f64..1.0, 8),
            da in prop::collection::vec(-0.1f64..0.1, 2),
            db in prop::collection::vec(-0.1f64..0.1, 2),
            m0 in 0.0f64..1.0,
            m1 in 0.0f64..1.0,
        ) {
            let sys = pair(0.07);
            let mu = vec![vec![m0, 1.0 - m0], vec![m1, 1.0 - m1]];
            let split = |v: &[f64]| (vec![vec2(&v[0..2]), vec2(&v[2..4])], vec![vec2(&v[4..6]), vec2(&v[6..8])]);
            let dd = |v: &[f64]| vec![vec2(&v[0..1]), vec2(&v[1..2])];
            let (x_a, xd_a) = split(&xa);
            let (x_b, xd_b) = split(&xb);
            let sum: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| a + b).collect();
            let dsum: Vec<f64> = da.iter().zip(&db).map(|(a, b)| a + b).collect();
            let (x_s, xd_s) = split(&sum);
            let (na, _) = propagate(&sys, &gains(), &mu, &x_a, &xd_a, &dd(&da)).unwrap();
            let (nb, _) = propagate(&sys, &gains(), &mu, &x_b, &xd_b, &dd(&db)).unwrap();
            let (ns, _) = propagate(&sys, &gains(), &mu, &x_s, &xd_s, &dd(&dsum)).unwrap();
            for i in 0..2 {
                prop_assert!((&ns[i] - &na[i] - &nb[i]).amax() < 1e-12);
            }
        }

        #[test]
        fn propagation_is_deterministic(x in prop::collection::vec(-1.0f64..1.0, 4), seed in 0u64..1000) {
            let sys = pair(0.05);
            let run = || {
                let mut buf = DelayBuffer::constant(2, vec![vec2(&x[0..2]), vec2(&x[2..4])]);
                let delays = DelaySchedule::Random { seed }.realize(10, 2).unwrap();
                let d = vec![DVector::zeros(1), DVector::zeros(1)];
                for tau in delays {
                    step_closed_loop(&sys, &gains(), &mut buf, tau, &d, AdmissibilityPolicy::Reject).unwrap();
                }
                buf.current().to_vec()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
