//! Dense semidefinite feasibility and optimisation over affine LMI blocks.
//!
//! Every constraint is stored in the normal form `F(y) ⪯ -margin * I`.
//! [`solve`] runs a two-phase log-barrier interior-point method and
//! [`verify_certificate`] re-checks a point with a symmetric eigensolver
//! that shares no code with the solver.

mod affine;
mod solver;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

pub use affine::{AffineMatrix, MatVar, VarLayout};
pub use solver::{max_eig_bisection, solve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("block `{0}` is not square")]
    NotSquare(String),
    #[error("invalid bounds for variable {0}: lower {1} > upper {2}")]
    InvalidBounds(usize, f64, f64),
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
}

/// One LMI constraint `F(y) ⪯ -margin * I`.
#[derive(Clone, Debug)]
pub struct LmiBlock {
    pub label: String,
    pub f: AffineMatrix,
    pub margin: f64,
}

impl LmiBlock {
    /// `F(y) ⪯ -margin * I`. The affine map is symmetrised on construction.
    pub fn nsd(label: impl Into<String>, f: AffineMatrix, margin: f64) -> Result<Self, SdpError> {
        let label = label.into();
        if f.nrows() != f.ncols() {
            return Err(SdpError::NotSquare(label));
        }
        Ok(Self {
            label,
            f: f.symmetrized(),
            margin,
        })
    }

    /// `G(y) ⪰ margin * I`.
    pub fn psd(label: impl Into<String>, g: AffineMatrix, margin: f64) -> Result<Self, SdpError> {
        Self::nsd(label, -g, margin)
    }

    pub fn size(&self) -> usize {
        self.f.nrows()
    }

    /// Orthonormal basis of the complement of the common null space of
    /// `F_0, F_1, ..., F_p`. Returns `None` when the kernel is trivial.
    pub fn structural_basis(&self) -> Option<DMatrix<f64>> {
        let n = self.size();
        if n == 0 {
            return None;
        }
        let mut gram = &self.f.constant_part().clone() * self.f.constant_part();
        for (_, g) in self.f.terms() {
            gram += g * g;
        }
        let scale = gram.amax().max(f64::MIN_POSITIVE);
        let eig = SymmetricEigen::new(gram);
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-20 * scale)
            .collect();
        if keep.len() == n {
            return None;
        }
        let mut basis = DMatrix::zeros(n, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(i));
        }
        Some(basis)
    }

    /// The block restricted to the complement of its structural kernel.
    pub fn reduced(&self) -> LmiBlock {
        match self.structural_basis() {
            None => self.clone(),
            Some(v) => {
                let vt = v.transpose();
                LmiBlock {
                    label: self.label.clone(),
                    f: self.f.left_mul(&vt).right_mul(&v).symmetrized(),
                    margin: self.margin,
                }
            }
        }
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        self.f.eval(y)
    }
}

/// Decision variables `y`, LMI blocks, an optional linear objective and
/// optional box bounds.
#[derive(Clone, Debug, Default)]
pub struct SdpProblem {
    pub dim: usize,
    pub blocks: Vec<LmiBlock>,
    pub objective: Option<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl SdpProblem {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            blocks: Vec::new(),
            objective: None,
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); dim],
        }
    }

    pub fn push(&mut self, block: LmiBlock) {
        self.blocks.push(block);
    }

    pub fn minimize(&mut self, c: Vec<f64>) {
        self.objective = Some(c);
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.bounds[var] = (lower, upper);
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.bounds.len() != self.dim {
            return Err(SdpError::DimensionMismatch(format!(
                "{} bounds for {} variables",
                self.bounds.len(),
                self.dim
            )));
        }
        for (v, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || !(lo < hi) {
                return Err(SdpError::InvalidBounds(v, lo, hi));
            }
        }
        if let Some(c) = &self.objective {
            if c.len() != self.dim {
                return Err(SdpError::DimensionMismatch(format!(
                    "objective has {} entries for {} variables",
                    c.len(),
                    self.dim
                )));
            }
        }
        for b in &self.blocks {
            if b.f.min_dim() > self.dim {
                return Err(SdpError::DimensionMismatch(format!(
                    "block `{}` references variable {} but dim is {}",
                    b.label,
                    b.f.min_dim() - 1,
                    self.dim
                )));
            }
            if b.f.nrows() != b.f.ncols() {
                return Err(SdpError::NotSquare(b.label.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Duality-gap tolerance of the barrier method.
    pub tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Project blocks off their structural kernel before solving.
    pub reduce_structural: bool,
    /// Keep maximising the margin in phase I even when there is an objective.
    pub max_margin: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 60,
            max_newton: 80,
            reduce_structural: true,
            max_margin: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Best point found. For infeasible problems this is the max-margin
    /// (least violating) point.
    pub y: Vec<f64>,
    /// Largest `λ_max(F_b(y)) + margin_b` over the (reduced) blocks.
    /// Negative when every block holds strictly.
    pub violation: f64,
    pub objective: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BlockMargin {
    pub label: String,
    pub max_eig: f64,
    pub reduced_max_eig: f64,
    pub margin: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CertificateReport {
    pub blocks: Vec<BlockMargin>,
    pub tolerance: f64,
    pub valid: bool,
}

impl CertificateReport {
    pub fn worst_reduced(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.reduced_max_eig)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_raw(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_eig)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Re-evaluate each block at `y` and check `λ_max ≤ -margin + tol` on the
/// structurally reduced block.
pub fn verify_certificate(blocks: &[LmiBlock], y: &[f64], tol: f64) -> CertificateReport {
    let rows: Vec<BlockMargin> = blocks
        .iter()
        .map(|b| {
            let full = b.eval(y);
            let max_eig = max_eigenvalue(&full);
            let reduced_max_eig = match b.structural_basis() {
                None => max_eig,
                Some(v) => max_eigenvalue(&(v.transpose() * &full * &v)),
            };
            BlockMargin {
                label: b.label.clone(),
                max_eig,
                reduced_max_eig,
                margin: b.margin,
                holds: reduced_max_eig <= -b.margin + tol,
            }
        })
        .collect();
    let valid = rows.iter().all(|r| r.holds);
    CertificateReport {
        blocks: rows,
        tolerance: tol,
        valid,
    }
}
