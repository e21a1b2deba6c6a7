//! Built-in plants: the two published benchmarks and small synthetic
//! systems whose synthesis problems are known to be feasible.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::fuzzy_model::{LargeScaleSystem, Membership, SubsystemRules};
use crate::lmi::{GainSet, SynthesisHyperparams};

/// A plant with its default hyperparameters and initial state.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: &'static str,
    pub system: LargeScaleSystem,
    pub hp: SynthesisHyperparams,
    /// Default `x_i(0)`; the history is held constant at this value.
    pub x0: Vec<DVector<f64>>,
}

/// The second benchmark also ships published gains.
#[derive(Clone, Debug)]
pub struct PublishedExample {
    pub example: Example,
    pub published: GainSet,
}

impl std::ops::Deref for PublishedExample {
    type Target = Example;
    fn deref(&self) -> &Example {
        &self.example
    }
}

fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn rules(
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    f: &[(usize, DMatrix<f64>)],
    membership: Membership,
) -> SubsystemRules {
    SubsystemRules {
        a_d: a.iter().map(|a| a * 0.5).collect(),
        a,
        b,
        w,
        interconnections: f.iter().cloned().collect::<BTreeMap<_, _>>(),
        membership,
    }
}

pub fn names() -> &'static [&'static str] {
    &["example1", "example2", "decoupled_scalar", "coupled_pair"]
}

pub fn by_name(name: &str) -> Option<Example> {
    match name {
        "example1" => Some(example1()),
        "example2" => Some(example2().example),
        "decoupled_scalar" => Some(decoupled_scalar()),
        "coupled_pair" => Some(coupled_pair()),
        _ => None,
    }
}

/// Three interconnected two-rule subsystems, delay bound 1.
///
/// Disturbance bounds and input limits are not part of the published data;
/// `γ_i = 1e-3` and `u_max = 1` are used.
pub fn example1() -> Example {
    let cos2 = Membership::Cos2 { state_index: 1 };
    let s1 = rules(
        vec![m(2, 2, &[0.55, 0.05, 0.0, 0.42]), m(2, 2, &[0.4, 0.0, 0.0, 0.08])],
        vec![col(&[1.0, 0.0]), col(&[0.0, 1.0])],
        vec![col(&[0.1, 0.0]), col(&[0.0, 0.1])],
        &[
            (1, m(2, 2, &[0.08, 0.05, 0.05, 0.05])),
            (2, m(2, 2, &[0.09, 0.06, 0.06, 0.09])),
        ],
        cos2.clone(),
    );
    let s2 = rules(
        vec![m(2, 2, &[0.325, 0.0, 0.4, 0.0]), m(2, 2, &[0.6, 0.2, 0.1, 0.0])],
        vec![col(&[1.0, -1.0]), col(&[-1.0, 1.0])],
        vec![col(&[-0.1, 0.0]), col(&[0.0, -0.2])],
        &[
            (0, m(2, 2, &[0.1, 0.1, 0.0, 0.0])),
            (2, m(2, 2, &[0.0, 0.0, 0.1, 0.1])),
        ],
        cos2.clone(),
    );
    let s3 = rules(
        vec![m(2, 2, &[0.2, 0.4, 0.2, 0.0]), m(2, 2, &[0.3, 0.0, 0.0, 0.4])],
        vec![col(&[1.0, 1.0]), col(&[-2.0, 1.0])],
        vec![col(&[-0.3, 0.0]), col(&[0.0, -0.4])],
        &[
            (0, m(2, 2, &[0.03, 0.0, 0.0, 0.02])),
            (1, m(2, 2, &[0.1, 0.0, 0.1, 0.0])),
        ],
        cos2,
    );
    let system = LargeScaleSystem::new(vec![s1, s2, s3], 1, vec![1e-3; 3], vec![vec![1.0]; 3])
        .expect("example 1 data is consistent");
    let hp = SynthesisHyperparams::for_system(
        &system,
        vec![0.5, 0.488, 0.487],
        [0.015, 0.018, 0.027]
            .iter()
            .map(|s| DMatrix::identity(2, 2) * *s)
            .collect(),
    );
    Example {
        name: "example1",
        system,
        hp,
        x0: vec![DVector::from_vec(vec![1.0, -1.0]); 3],
    }
}

/// Two coupled pendulum subsystems with three rules each.
///
/// Rules 1 and 3 share one linearisation and rule 2 (the centre of a
/// triangular partition of the first state over `[-0.5, 0, 0.5]`) uses the
/// other. The output map `y_i = x_i1` is stored separately from the
/// input-energy weight.
pub fn example2() -> PublishedExample {
    let tri = Membership::Triangular {
        state_index: 0,
        centers: vec![-0.5, 0.0, 0.5],
    };
    let g = m(2, 2, &[0.08, 0.05, 0.05, 0.05]);
    let lin = |c: f64| m(2, 2, &[1.0, 0.005, c, 1.0]);
    let s1 = rules(
        vec![lin(0.0262), lin(0.0441), lin(0.0262)],
        vec![col(&[1.0, 0.0]); 3],
        vec![col(&[0.1, 0.0]); 3],
        &[(1, g.clone())],
        tri.clone(),
    );
    let s2 = rules(
        vec![lin(0.0272), lin(0.0451), lin(0.0272)],
        vec![col(&[1.0, 1.0]); 3],
        vec![col(&[0.1, 0.0]); 3],
        &[(0, g)],
        tri,
    );
    let system = LargeScaleSystem::new(vec![s1, s2], 1, vec![1e-3; 2], vec![vec![100.0]; 2])
        .expect("example 2 data is consistent")
        .with_outputs(vec![m(1, 2, &[1.0, 0.0]); 2])
        .expect("output maps match");
    let x_shape: Vec<DMatrix<f64>> = [0.015, 0.018]
        .iter()
        .map(|s| DMatrix::identity(2, 2) * *s)
        .collect();
    let hp = SynthesisHyperparams::for_system(&system, vec![0.5, 0.448], x_shape.clone());
    let k = |a: f64, b: f64| m(1, 2, &[a, b]);
    let published = GainSet::frozen(
        vec![
            vec![k(-4.54, -6.06), k(-6.009, -8.79), k(-15.15, -19.585)],
            vec![k(-5.14, -3.01), k(-1.049, -4.14), k(-28.255, -12.252)],
        ],
        x_shape,
        vec![1.0, 1.0],
    );
    PublishedExample {
        example: Example {
            name: "example2",
            system,
            hp,
            x0: vec![DVector::from_vec(vec![0.1, -0.1]); 2],
        },
        published,
    }
}

/// Scalar plant `x⁺ = 0.5x + u + 0.25x_d + 0.1d` with no neighbours.
pub fn scalar_plant(u_max: f64) -> LargeScaleSystem {
    let one = |v: f64| m(1, 1, &[v]);
    let sub = SubsystemRules {
        a: vec![one(0.5)],
        b: vec![one(1.0)],
        a_d: vec![one(0.25)],
        w: vec![one(0.1)],
        interconnections: BTreeMap::new(),
        membership: Membership::Single,
    };
    LargeScaleSystem::new(vec![sub], 1, vec![0.05], vec![vec![u_max]]).expect("scalar plant")
}

/// [`scalar_plant`] with hyperparameters under which every inequality
/// family is feasible.
pub fn decoupled_scalar() -> Example {
    let system = scalar_plant(1.0);
    let mut hp = SynthesisHyperparams::for_system(&system, vec![0.5], vec![DMatrix::identity(1, 1)]);
    hp.q = vec![m(1, 1, &[0.1])];
    hp.h = vec![1.0];
    Example {
        name: "decoupled_scalar",
        system,
        hp,
        x0: vec![DVector::from_element(1, 0.1)],
    }
}

/// Two weakly coupled scalar subsystems with two fuzzy rules each.
pub fn coupled_pair() -> Example {
    let one = |v: f64| m(1, 1, &[v]);
    let mk = |a1: f64, a2: f64, b1: f64, b2: f64, j: usize| SubsystemRules {
        a: vec![one(a1), one(a2)],
        b: vec![one(b1), one(b2)],
        a_d: vec![one(0.2 * a1), one(0.2 * a2)],
        w: vec![one(0.1), one(0.08)],
        interconnections: [(j, one(0.05))].into_iter().collect(),
        membership: Membership::Cos2 { state_index: 0 },
    };
    let system = LargeScaleSystem::new(
        vec![mk(0.6, 0.4, 1.0, 0.8, 1), mk(0.5, 0.7, 0.9, 1.1, 0)],
        2,
        vec![0.01, 0.01],
        vec![vec![1.0], vec![1.0]],
    )
    .expect("coupled pair");
    let mut hp = SynthesisHyperparams::for_system(
        &system,
        vec![0.5, 0.5],
        vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
    );
    hp.q = vec![m(1, 1, &[0.05]); 2];
    hp.h = vec![1.0; 2];
    Example {
        name: "coupled_pair",
        system,
        hp,
        x0: vec![DVector::from_element(1, 0.1), DVector::from_element(1, -0.1)],
    }
}

/// Single scalar subsystem with every matrix zero.
pub fn zero_subsystem() -> LargeScaleSystem {
    let zero = DMatrix::zeros(1, 1);
    let sub = SubsystemRules {
        a: vec![zero.clone()],
        b: vec![zero.clone()],
        a_d: vec![zero.clone()],
        w: vec![zero],
        interconnections: BTreeMap::new(),
        membership: Membership::Single,
    };
    LargeScaleSystem::new(vec![sub], 1, vec![0.0], vec![vec![1.0]]).expect("zero subsystem")
}

/// Scale each direction in `dir` to `fraction` of the level-set boundary
/// `xᵀX_i x = ς_i²`.
pub fn scaled_into_level_set(dir: &[DVector<f64>], gains: &GainSet, fraction: f64) -> Vec<DVector<f64>> {
    dir.iter()
        .enumerate()
        .map(|(i, v)| {
            let q = (v.transpose() * &gains.x_shape[i] * v)[(0, 0)];
            if q <= 0.0 {
                v.clone()
            } else {
                v * (fraction * gains.sigma[i] / q.sqrt())
            }
        })
        .collect()
}
