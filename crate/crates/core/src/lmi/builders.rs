use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{SynthesisError, SynthesisHyperparams};
use crate::fuzzy_model::{LargeScaleSystem, ModelError};
use crate::sdp::{AffineMatrix, MatVar, VarLayout};

/// Decision variables of one subsystem's synthesis problem.
#[derive(Clone, Debug)]
pub struct SubsystemVars {
    pub layout: VarLayout,
    pub gains: Vec<MatVar>,
    pub sigma: MatVar,
    pub z: MatVar,
    /// `n × 1`; all-zero (unallocated) when the coordination row is inactive.
    pub x_bar: MatVar,
}

impl SubsystemVars {
    pub fn new(rules: usize, n: usize, m: usize, with_x_bar: bool) -> Self {
        let mut layout = VarLayout::new();
        let gains = (0..rules)
            .map(|l| layout.matrix(&format!("k{l}"), m, n))
            .collect();
        let sigma = layout.scalar("sigma");
        let z = layout.symmetric("Z", n);
        let x_bar = if with_x_bar {
            layout.matrix("Xbar", n, 1)
        } else {
            MatVar::zero(n, 1)
        };
        Self {
            layout,
            gains,
            sigma,
            z,
            x_bar,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn sigma_index(&self) -> usize {
        self.sigma.index(0, 0).expect("sigma is always allocated")
    }

    /// `ς · M`.
    fn sigma_times(&self, m: DMatrix<f64>) -> AffineMatrix {
        AffineMatrix::term(self.sigma_index(), m)
    }
}

/// Interaction data frozen at one prediction instant.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinationSnapshot {
    pub iteration: usize,
    /// `δ_j(k)` for every subsystem `j`.
    pub delta: Vec<DVector<f64>>,
    /// `z_i(k)` of the subsystem being synthesised.
    pub z: DVector<f64>,
}

impl CoordinationSnapshot {
    pub fn zero(sys: &LargeScaleSystem, i: usize) -> Self {
        Self {
            iteration: 0,
            delta: sys
                .subsystems
                .iter()
                .map(|s| DVector::zeros(s.state_dim()))
                .collect(),
            z: DVector::zeros(sys.subsystems[i].state_dim()),
        }
    }

    /// The homogenising row only constrains anything through `z_i`.
    pub fn row_active(&self) -> bool {
        self.z.iter().any(|v| *v != 0.0)
    }
}

fn row_of(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn c(m: DMatrix<f64>) -> AffineMatrix {
    AffineMatrix::constant(m)
}

fn z(r: usize, cols: usize) -> AffineMatrix {
    AffineMatrix::zeros(r, cols)
}

fn check_equal_dims(sys: &LargeScaleSystem, i: usize) -> Result<(), SynthesisError> {
    let n = sys.subsystems[i].state_dim();
    for j in sys.others(i) {
        if sys.subsystems[j].state_dim() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "interconnection terms need equal state dimensions (subsystem {i}: {n}, subsystem {j}: {})",
                sys.subsystems[j].state_dim()
            ))
            .into());
        }
    }
    Ok(())
}

fn check_vertex(sys: &LargeScaleSystem, i: usize, l: usize, m: usize, vars: &SubsystemVars) -> Result<(), SynthesisError> {
    let r = sys.subsystems[i].rule_count();
    if l >= r || m >= r || vars.gains.len() != r {
        return Err(ModelError::DimensionMismatch(format!(
            "vertex ({l},{m}) for {r} rules and {} gain variables",
            vars.gains.len()
        ))
        .into());
    }
    Ok(())
}

fn finish(label: &str, lower: Vec<Vec<AffineMatrix>>) -> Result<AffineMatrix, SynthesisError> {
    let out = AffineMatrix::symmetric_from_lower(&lower)?;
    let asymmetry = out.asymmetry();
    if asymmetry > 1e-12 {
        return Err(SynthesisError::NonSymmetricAssembly {
            label: label.to_string(),
            asymmetry,
        });
    }
    Ok(out)
}

/// Rows shared by both inequalities: disturbance, state, delayed state and
/// one row per neighbour. Returns the lower-triangular grid and `Θ`.
struct Core {
    lower: Vec<Vec<AffineMatrix>>,
    theta: AffineMatrix,
}

#[allow(clippy::too_many_arguments)]
fn core_rows(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    l: usize,
    m: usize,
    vars: &SubsystemVars,
    dd: AffineMatrix,
    xx: AffineMatrix,
    xdxd: DMatrix<f64>,
) -> Core {
    let sub = &sys.subsystems[i];
    let x = &hp.x_shape[i];
    let (a, b, ad, w) = (&sub.a[l], &sub.b[l], &sub.a_d[l], &sub.w[l]);
    let theta = c(a.clone()) + vars.gains[m].affine().left_mul(b);
    let xw = x * w;
    let sqrt_alpha = hp.alpha.sqrt();

    let mut lower = vec![
        vec![dd],
        vec![theta.transpose().right_mul(&xw), xx],
        vec![
            c(ad.transpose() * &xw),
            theta.left_mul(&(ad.transpose() * x)),
            c(xdxd),
        ],
    ];
    let fs: Vec<DMatrix<f64>> = sys.others(i).map(|j| sys.interconnection(i, j)).collect();
    for (p, f) in fs.iter().enumerate() {
        let ftx = f.transpose() * x;
        let mut row = vec![
            c(&ftx * w),
            theta.left_mul(&ftx).scale(1.0 - sqrt_alpha),
            c(&ftx * ad),
        ];
        for fq in fs.iter().take(p + 1) {
            row.push(c(&ftx * fq * -(hp.alpha - 1.0)));
        }
        lower.push(row);
    }
    Core { lower, theta }
}

fn coupling_sum(sys: &LargeScaleSystem, hp: &SynthesisHyperparams, i: usize) -> DMatrix<f64> {
    let n = sys.subsystems[i].state_dim();
    sys.others(i).fold(DMatrix::zeros(n, n), |acc, j| {
        let f = sys.interconnection(i, j);
        acc + f.transpose() * &hp.x_shape[j] * &f
    })
}

/// A row of zero blocks matching the column widths of `widths`.
fn zero_row(widths: &[usize], rows: usize) -> Vec<AffineMatrix> {
    widths.iter().map(|&w| z(rows, w)).collect()
}

fn widths(lower: &[Vec<AffineMatrix>]) -> Vec<usize> {
    lower.iter().map(|row| row[row.len() - 1].ncols()).collect()
}

/// The robust-invariance inequality at rule vertex `l` and gain vertex `m`.
///
/// Block rows: disturbance, state, delayed state, one per neighbour, slack.
pub fn build_rpi_lmi(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    (l, m): (usize, usize),
    vars: &SubsystemVars,
) -> Result<AffineMatrix, SynthesisError> {
    check_vertex(sys, i, l, m, vars)?;
    check_equal_dims(sys, i)?;
    let sub = &sys.subsystems[i];
    let x = &hp.x_shape[i];
    let (n, cd) = (sub.state_dim(), sub.disturbance_dim());
    let n_sub = sys.len() as f64;
    let lam = hp.lambda[i];
    let w = &sub.w[l];
    let ad = &sub.a_d[l];

    let dd = c(w.transpose() * x * w) - vars.sigma_times(DMatrix::identity(cd, cd) * (lam * hp.varpi[i]));
    let xx = c(coupling_sum(sys, hp, i) * (n_sub * hp.alpha.sqrt()) - x * (hp.rho[i] * (1.0 - lam)));
    let xdxd = ad.transpose() * x * ad - x * ((1.0 - lam) * hp.rho_d[i]);
    let Core { mut lower, theta } = core_rows(sys, hp, i, l, m, vars, dd, xx, xdxd);

    let mut slack = zero_row(&widths(&lower), n);
    slack[1] = theta.left_mul(x);
    slack.push(c(x * (-1.0 / n_sub)));
    lower.push(slack);
    finish("rpi", lower)
}

/// The terminal-set inequality at vertex `(l, m)` with interaction data
/// frozen from `coord`. Block rows: disturbance, state, delayed state, one
/// per neighbour, the coordination row (only when `z_i ≠ 0`), the input
/// energy row and the slack row.
pub fn build_terminal_lmi(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    (l, m): (usize, usize),
    vars: &SubsystemVars,
    coord: &CoordinationSnapshot,
    iteration: usize,
) -> Result<AffineMatrix, SynthesisError> {
    if coord.iteration != iteration {
        return Err(SynthesisError::CoordinationStateStale {
            expected: iteration,
            found: coord.iteration,
        });
    }
    check_vertex(sys, i, l, m, vars)?;
    check_equal_dims(sys, i)?;
    let sub = &sys.subsystems[i];
    let x = &hp.x_shape[i];
    let (n, mi, cd) = (sub.state_dim(), sub.input_dim(), sub.disturbance_dim());
    if coord.delta.len() != sys.len() || coord.z.len() != n || coord.delta.iter().any(|d| d.len() != n) {
        return Err(ModelError::DimensionMismatch("coordination snapshot".into()).into());
    }
    let n_sub = sys.len() as f64;
    let w = &sub.w[l];
    let ad = &sub.a_d[l];

    let dd = c(w.transpose() * x * w) - vars.sigma_times(DMatrix::identity(cd, cd) * hp.tau[i]);
    let xx = c(coupling_sum(sys, hp, i) * (n_sub * hp.alpha.sqrt()) - x * hp.rho[i])
        + vars.sigma_times(hp.q[i].clone());
    let xdxd = ad.transpose() * x * ad - x * hp.rho_d[i];
    let Core { mut lower, theta } = core_rows(sys, hp, i, l, m, vars, dd, xx, xdxd);

    if coord.row_active() {
        let mut row = zero_row(&widths(&lower), 1);
        let x_bar_t = vars.x_bar.affine().transpose();
        for (p, j) in sys.others(i).enumerate() {
            let f = sys.interconnection(i, j);
            let entry = x_bar_t.right_mul(&f) + vars.sigma_times(row_of(&coord.delta[j]) * &f);
            row[3 + p] = entry.scale(-0.5);
        }
        let zi = DMatrix::from_column_slice(n, 1, coord.z.as_slice());
        let diag = vars.sigma_times(row_of(&coord.delta[i]) * &zi) + x_bar_t.right_mul(&zi);
        row.push(diag);
        lower.push(row);
    }

    let mut h_row = zero_row(&widths(&lower), mi);
    h_row[1] = vars.gains[m].affine().scale(hp.h[i]);
    h_row.push(c(DMatrix::identity(mi, mi) * -hp.h[i]));
    lower.push(h_row);

    let mut slack = zero_row(&widths(&lower), n);
    slack[1] = theta.left_mul(x);
    slack.push(c(x * (-1.0 / n_sub)));
    lower.push(slack);
    finish("terminal", lower)
}

/// `[[Z, k_lᵀ], [k_l, I]] ⪰ 0` and `Z(s,s) ≤ u_max[s]²` for each input
/// channel `s`. Both are returned as the positive-semidefinite side.
pub fn build_input_constraint_lmi(
    sys: &LargeScaleSystem,
    i: usize,
    l: usize,
    vars: &SubsystemVars,
) -> Result<(AffineMatrix, Vec<AffineMatrix>), SynthesisError> {
    let sub = &sys.subsystems[i];
    let (n, mi) = (sub.state_dim(), sub.input_dim());
    if l >= vars.gains.len() {
        return Err(ModelError::DimensionMismatch(format!("rule {l} has no gain variable")).into());
    }
    if mi > n {
        return Err(ModelError::DimensionMismatch(format!(
            "{mi} input channels index the diagonal of an {n}×{n} slack"
        ))
        .into());
    }
    let k = vars.gains[l].affine();
    let block = AffineMatrix::symmetric_from_lower(&[
        vec![vars.z.affine()],
        vec![k, c(DMatrix::identity(mi, mi))],
    ])?;
    let caps = (0..mi)
        .map(|s| {
            let mut e = DMatrix::zeros(1, n);
            e[(0, s)] = 1.0;
            let zss = vars.z.affine().left_mul(&e).right_mul(&e.transpose());
            let u = sys.u_max[i][s];
            c(DMatrix::from_element(1, 1, u * u)) - zss
        })
        .collect();
    Ok((block, caps))
}

/// `[[ς, xᵀ], [x, X⁻¹ς]] ⪰ 0` for one history sample.
pub fn build_level_lmi(
    x_sample: &DVector<f64>,
    x_shape: &DMatrix<f64>,
    vars: &SubsystemVars,
    subsystem: usize,
) -> Result<AffineMatrix, SynthesisError> {
    let n = x_shape.nrows();
    if x_sample.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "history sample has length {}, X is {n}×{n}",
            x_sample.len()
        ))
        .into());
    }
    let eig = SymmetricEigen::new(x_shape.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= 1e10) {
        return Err(SynthesisError::SingularX {
            subsystem,
            condition,
        });
    }
    let x_inv = x_shape
        .clone()
        .try_inverse()
        .ok_or(SynthesisError::SingularX {
            subsystem,
            condition,
        })?;
    let xs = DMatrix::from_column_slice(n, 1, x_sample.as_slice());
    Ok(AffineMatrix::symmetric_from_lower(&[
        vec![vars.sigma_times(DMatrix::identity(1, 1))],
        vec![c(xs), vars.sigma_times(x_inv)],
    ])?)
}
