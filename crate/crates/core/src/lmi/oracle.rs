//! Direct numeric expansions of the Schur-complemented inequalities, written
//! independently of the affine builders so the two can be cross-checked.

use nalgebra::{DMatrix, DVector};

use super::{CoordinationSnapshot, SynthesisError, SynthesisHyperparams};
use crate::fuzzy_model::LargeScaleSystem;

/// `M₁₁ - M₁₂ M₂₂⁻¹ M₂₁`, where `M₂₂` is the trailing `tail × tail` block.
pub fn schur_complement_tail(block: &DMatrix<f64>, tail: usize) -> Result<DMatrix<f64>, SynthesisError> {
    let n = block.nrows();
    assert!(tail <= n, "tail larger than block");
    let head = n - tail;
    let m11 = block.view((0, 0), (head, head));
    let m12 = block.view((0, head), (head, tail));
    let m22 = block.view((head, head), (tail, tail)).into_owned();
    let lu = m22.lu();
    if lu.determinant().abs() < 1e-300 {
        return Err(SynthesisError::SingularSchurPivot);
    }
    let solved = lu
        .solve(&m12.transpose())
        .ok_or(SynthesisError::SingularSchurPivot)?;
    Ok(m11 - m12 * solved)
}

/// Schur-complement the trailing `tail` rows of `block` and return the
/// largest absolute deviation from `expanded`.
pub fn schur_oracle_check(
    block: &DMatrix<f64>,
    expanded: &DMatrix<f64>,
    tail: usize,
) -> Result<f64, SynthesisError> {
    let sc = schur_complement_tail(block, tail)?;
    if sc.shape() != expanded.shape() {
        return Err(crate::fuzzy_model::ModelError::DimensionMismatch(format!(
            "Schur complement is {:?}, expansion is {:?}",
            sc.shape(),
            expanded.shape()
        ))
        .into());
    }
    Ok((sc - expanded).amax())
}

struct Grid {
    m: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl Grid {
    fn new(sizes: &[usize]) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let total = *offsets.last().unwrap();
        Self {
            m: DMatrix::zeros(total, total),
            offsets,
        }
    }

    /// Write block `(r, c)` and its transpose at `(c, r)`.
    fn put(&mut self, r: usize, c: usize, b: &DMatrix<f64>) {
        let (r0, c0) = (self.offsets[r], self.offsets[c]);
        for p in 0..b.nrows() {
            for q in 0..b.ncols() {
                self.m[(r0 + p, c0 + q)] = b[(p, q)];
                self.m[(c0 + q, r0 + p)] = b[(p, q)];
            }
        }
    }
}

struct Common {
    theta: DMatrix<f64>,
    fs: Vec<DMatrix<f64>>,
    sum_fxf: DMatrix<f64>,
}

fn common(sys: &LargeScaleSystem, hp: &SynthesisHyperparams, i: usize, l: usize, k: &DMatrix<f64>) -> Common {
    let sub = &sys.subsystems[i];
    let n = sub.state_dim();
    let theta = &sub.a[l] + &sub.b[l] * k;
    let mut fs = Vec::new();
    let mut sum_fxf = DMatrix::zeros(n, n);
    for j in 0..sys.len() {
        if j == i {
            continue;
        }
        let f = sub
            .interconnections
            .get(&j)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(n, sys.subsystems[j].state_dim()));
        sum_fxf += f.transpose() * &hp.x_shape[j] * &f;
        fs.push(f);
    }
    Common { theta, fs, sum_fxf }
}

fn neighbour_rows(grid: &mut Grid, c: &Common, x: &DMatrix<f64>, w: &DMatrix<f64>, ad: &DMatrix<f64>, alpha: f64) {
    for (p, f) in c.fs.iter().enumerate() {
        let row = 3 + p;
        grid.put(row, 0, &(f.transpose() * x * w));
        grid.put(row, 1, &(f.transpose() * x * &c.theta * (1.0 - alpha.sqrt())));
        grid.put(row, 2, &(f.transpose() * x * ad));
        for (q, g) in c.fs.iter().enumerate().take(p + 1) {
            grid.put(row, 3 + q, &(f.transpose() * x * g * -(alpha - 1.0)));
        }
    }
}

/// The invariance inequality with its slack row eliminated, evaluated at
/// gain `k` (the `m`-th vertex gain) and level `sigma`.
pub fn expand_a1(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    l: usize,
    k: &DMatrix<f64>,
    sigma: f64,
) -> DMatrix<f64> {
    let sub = &sys.subsystems[i];
    let (n, cd) = (sub.state_dim(), sub.disturbance_dim());
    let x = &hp.x_shape[i];
    let (w, ad) = (&sub.w[l], &sub.a_d[l]);
    let nn = sys.len() as f64;
    let lam = hp.lambda[i];
    let c = common(sys, hp, i, l, k);

    let mut sizes = vec![cd, n, n];
    sizes.extend(c.fs.iter().map(|f| f.ncols()));
    let mut g = Grid::new(&sizes);
    let phi = c.theta.transpose() * x * &c.theta * nn + &c.sum_fxf * (nn * hp.alpha.sqrt())
        - x * (hp.rho[i] * (1.0 - lam));
    g.put(0, 0, &(w.transpose() * x * w - DMatrix::identity(cd, cd) * (sigma * lam * hp.varpi[i])));
    g.put(1, 0, &(c.theta.transpose() * x * w));
    g.put(1, 1, &phi);
    g.put(2, 0, &(ad.transpose() * x * w));
    g.put(2, 1, &(ad.transpose() * x * &c.theta));
    g.put(2, 2, &(ad.transpose() * x * ad - x * ((1.0 - lam) * hp.rho_d[i])));
    neighbour_rows(&mut g, &c, x, w, ad, hp.alpha);
    g.m
}

/// The terminal inequality with its input-energy and slack rows eliminated.
#[allow(clippy::too_many_arguments)]
pub fn expand_b1(
    sys: &LargeScaleSystem,
    hp: &SynthesisHyperparams,
    i: usize,
    l: usize,
    k: &DMatrix<f64>,
    sigma: f64,
    x_bar: &DVector<f64>,
    coord: &CoordinationSnapshot,
) -> DMatrix<f64> {
    let sub = &sys.subsystems[i];
    let (n, cd) = (sub.state_dim(), sub.disturbance_dim());
    let x = &hp.x_shape[i];
    let (w, ad) = (&sub.w[l], &sub.a_d[l]);
    let nn = sys.len() as f64;
    let c = common(sys, hp, i, l, k);
    let active = coord.row_active();

    let mut sizes = vec![cd, n, n];
    sizes.extend(c.fs.iter().map(|f| f.ncols()));
    if active {
        sizes.push(1);
    }
    let mut g = Grid::new(&sizes);
    let chi = c.theta.transpose() * x * &c.theta * nn + &c.sum_fxf * (nn * hp.alpha.sqrt()) - x * hp.rho[i]
        + &hp.q[i] * sigma
        + k.transpose() * k * hp.h[i];
    g.put(0, 0, &(w.transpose() * x * w - DMatrix::identity(cd, cd) * (sigma * hp.tau[i])));
    g.put(1, 0, &(c.theta.transpose() * x * w));
    g.put(1, 1, &chi);
    g.put(2, 0, &(ad.transpose() * x * w));
    g.put(2, 1, &(ad.transpose() * x * &c.theta));
    g.put(2, 2, &(ad.transpose() * x * ad - x * hp.rho_d[i]));
    neighbour_rows(&mut g, &c, x, w, ad, hp.alpha);
    if active {
        let row = 3 + c.fs.len();
        let others: Vec<usize> = (0..sys.len()).filter(|&j| j != i).collect();
        for (p, (f, &j)) in c.fs.iter().zip(&others).enumerate() {
            let s = x_bar + &coord.delta[j] * sigma;
            let v = DMatrix::from_row_slice(1, s.len(), s.as_slice()) * f * -0.5;
            g.put(row, 3 + p, &v);
        }
        let diag = coord.delta[i].dot(&coord.z) * sigma + x_bar.dot(&coord.z);
        g.put(row, row, &DMatrix::from_element(1, 1, diag));
    }
    g.m
}
