use std::collections::BTreeMap;
use std::ops::{Add, Neg, Sub};

use nalgebra::DMatrix;

use super::SdpError;

/// A matrix that depends affinely on a decision vector `y`:
/// `M(y) = C + sum_v y[v] * G_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrix {
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            constant: m,
            terms: BTreeMap::new(),
        }
    }

    /// `coeff * y[index]`.
    pub fn term(index: usize, coeff: DMatrix<f64>) -> Self {
        let mut terms = BTreeMap::new();
        let constant = DMatrix::zeros(coeff.nrows(), coeff.ncols());
        terms.insert(index, coeff);
        Self { constant, terms }
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, &DMatrix<f64>)> {
        self.terms.iter().map(|(k, v)| (*k, v))
    }

    pub fn coefficient(&self, index: usize) -> Option<&DMatrix<f64>> {
        self.terms.get(&index)
    }

    /// Largest variable index referenced plus one.
    pub fn min_dim(&self) -> usize {
        self.terms.keys().next_back().map_or(0, |k| k + 1)
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (&v, g) in &self.terms {
            let yv = y.get(v).copied().unwrap_or(0.0);
            if yv != 0.0 {
                out += g * yv;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            constant: &self.constant * s,
            terms: self.terms.iter().map(|(k, g)| (*k, g * s)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            constant: self.constant.transpose(),
            terms: self.terms.iter().map(|(k, g)| (*k, g.transpose())).collect(),
        }
    }

    /// `L * M(y)`.
    pub fn left_mul(&self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.nrows(), "left_mul dimension mismatch");
        Self {
            constant: l * &self.constant,
            terms: self.terms.iter().map(|(k, g)| (*k, l * g)).collect(),
        }
    }

    /// `M(y) * R`.
    pub fn right_mul(&self, r: &DMatrix<f64>) -> Self {
        assert_eq!(self.ncols(), r.nrows(), "right_mul dimension mismatch");
        Self {
            constant: &self.constant * r,
            terms: self.terms.iter().map(|(k, g)| (*k, g * r)).collect(),
        }
    }

    pub fn symmetrized(&self) -> Self {
        let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
        Self {
            constant: sym(&self.constant),
            terms: self.terms.iter().map(|(k, g)| (*k, sym(g))).collect(),
        }
    }

    /// Largest absolute asymmetry over the constant and every coefficient.
    pub fn asymmetry(&self) -> f64 {
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax();
        self.terms
            .values()
            .map(asym)
            .fold(asym(&self.constant), f64::max)
    }

    /// Assemble a block matrix from a grid of affine blocks.
    ///
    /// Every block in a row must share its row count and every block in a
    /// column must share its column count.
    pub fn block(grid: &[Vec<AffineMatrix>]) -> Result<Self, SdpError> {
        if grid.is_empty() {
            return Ok(Self::zeros(0, 0));
        }
        let ncols_grid = grid[0].len();
        let mut row_heights = Vec::with_capacity(grid.len());
        for (r, row) in grid.iter().enumerate() {
            if row.len() != ncols_grid {
                return Err(SdpError::DimensionMismatch(format!(
                    "block row {r} has {} entries, expected {ncols_grid}",
                    row.len()
                )));
            }
            row_heights.push(row[0].nrows());
        }
        let col_widths: Vec<usize> = grid[0].iter().map(|b| b.ncols()).collect();
        for (r, row) in grid.iter().enumerate() {
            for (c, b) in row.iter().enumerate() {
                if b.nrows() != row_heights[r] || b.ncols() != col_widths[c] {
                    return Err(SdpError::DimensionMismatch(format!(
                        "block ({r},{c}) is {}x{}, expected {}x{}",
                        b.nrows(),
                        b.ncols(),
                        row_heights[r],
                        col_widths[c]
                    )));
                }
            }
        }
        let total_r: usize = row_heights.iter().sum();
        let total_c: usize = col_widths.iter().sum();
        let mut out = Self::zeros(total_r, total_c);
        let mut r0 = 0;
        for (r, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (c, b) in row.iter().enumerate() {
                let (h, w) = (row_heights[r], col_widths[c]);
                out.constant.view_mut((r0, c0), (h, w)).copy_from(&b.constant);
                for (&k, g) in &b.terms {
                    out.terms
                        .entry(k)
                        .or_insert_with(|| DMatrix::zeros(total_r, total_c))
                        .view_mut((r0, c0), (h, w))
                        .copy_from(g);
                }
                c0 += w;
            }
            r0 += row_heights[r];
        }
        Ok(out)
    }

    /// Build a symmetric block matrix from its lower triangle.
    ///
    /// `lower[r]` holds blocks `(r, 0..=r)`; upper blocks are the transposes.
    pub fn symmetric_from_lower(lower: &[Vec<AffineMatrix>]) -> Result<Self, SdpError> {
        let n = lower.len();
        for (r, row) in lower.iter().enumerate() {
            if row.len() != r + 1 {
                return Err(SdpError::DimensionMismatch(format!(
                    "lower-triangular row {r} has {} blocks, expected {}",
                    row.len(),
                    r + 1
                )));
            }
        }
        let mut grid = Vec::with_capacity(n);
        for r in 0..n {
            let mut row = Vec::with_capacity(n);
            for c in 0..n {
                if c <= r {
                    row.push(lower[r][c].clone());
                } else {
                    row.push(lower[c][r].transpose());
                }
            }
            grid.push(row);
        }
        Self::block(&grid)
    }

    fn drop_zeros(mut self) -> Self {
        self.terms.retain(|_, g| g.iter().any(|v| *v != 0.0));
        self
    }

    fn combine(mut self, rhs: &AffineMatrix, sign: f64) -> Self {
        assert_eq!(
            (self.nrows(), self.ncols()),
            (rhs.nrows(), rhs.ncols()),
            "affine add/sub dimension mismatch"
        );
        self.constant += &rhs.constant * sign;
        for (&k, g) in &rhs.terms {
            match self.terms.get_mut(&k) {
                Some(existing) => *existing += g * sign,
                None => {
                    self.terms.insert(k, g * sign);
                }
            }
        }
        self.drop_zeros()
    }
}

impl Add for AffineMatrix {
    type Output = AffineMatrix;
    fn add(self, rhs: AffineMatrix) -> AffineMatrix {
        self.combine(&rhs, 1.0)
    }
}

impl Add<&AffineMatrix> for AffineMatrix {
    type Output = AffineMatrix;
    fn add(self, rhs: &AffineMatrix) -> AffineMatrix {
        self.combine(rhs, 1.0)
    }
}

impl Sub for AffineMatrix {
    type Output = AffineMatrix;
    fn sub(self, rhs: AffineMatrix) -> AffineMatrix {
        self.combine(&rhs, -1.0)
    }
}

impl Sub<&AffineMatrix> for AffineMatrix {
    type Output = AffineMatrix;
    fn sub(self, rhs: &AffineMatrix) -> AffineMatrix {
        self.combine(rhs, -1.0)
    }
}

impl Neg for AffineMatrix {
    type Output = AffineMatrix;
    fn neg(self) -> AffineMatrix {
        self.scale(-1.0)
    }
}

impl From<DMatrix<f64>> for AffineMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        Self::constant(m)
    }
}

/// Allocates decision-variable indices and hands out matrix-valued variables.
#[derive(Clone, Debug, Default)]
pub struct VarLayout {
    names: Vec<String>,
}

impl VarLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    fn alloc(&mut self, name: String) -> usize {
        self.names.push(name);
        self.names.len() - 1
    }

    pub fn scalar(&mut self, name: &str) -> MatVar {
        let idx = self.alloc(name.to_string());
        MatVar {
            rows: 1,
            cols: 1,
            index: vec![Some(idx)],
        }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        let mut index = Vec::with_capacity(rows * cols);
        // column-major, matching nalgebra storage
        for c in 0..cols {
            for r in 0..rows {
                index.push(Some(self.alloc(format!("{name}[{r},{c}]"))));
            }
        }
        MatVar { rows, cols, index }
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> MatVar {
        let mut index = vec![None; n * n];
        for c in 0..n {
            for r in c..n {
                let idx = self.alloc(format!("{name}[{r},{c}]"));
                index[c * n + r] = Some(idx);
                index[r * n + c] = Some(idx);
            }
        }
        MatVar {
            rows: n,
            cols: n,
            index,
        }
    }
}

/// A matrix of decision variables. Entries may alias (symmetric matrices)
/// or be fixed at zero (`None`).
#[derive(Clone, Debug)]
pub struct MatVar {
    rows: usize,
    cols: usize,
    index: Vec<Option<usize>>,
}

impl MatVar {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            index: vec![None; rows * cols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn index(&self, r: usize, c: usize) -> Option<usize> {
        self.index[c * self.rows + r]
    }

    /// Distinct variable indices, in allocation order.
    pub fn indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.index.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn affine(&self) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(self.rows, self.cols);
        for c in 0..self.cols {
            for r in 0..self.rows {
                if let Some(k) = self.index(r, c) {
                    let g = out
                        .terms
                        .entry(k)
                        .or_insert_with(|| DMatrix::zeros(self.rows, self.cols));
                    g[(r, c)] = 1.0;
                }
            }
        }
        out
    }

    pub fn value(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| {
            self.index(r, c).map_or(0.0, |k| y[k])
        })
    }
}
