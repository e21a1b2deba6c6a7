//! JSON file formats for systems and gains. Matrices are row-major nested
//! arrays.

use std::collections::BTreeMap;
use std::path::Path;

use fuzzy_lsmpc_core::fuzzy_model::{LargeScaleSystem, Membership, SubsystemRules};
use fuzzy_lsmpc_core::lmi::GainSet;
use fuzzy_lsmpc_core::sdp::{CertificateReport, SolveStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Rows, what: &str) -> Result<DMatrix<f64>, CliError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::Invalid(format!("{what}: ragged matrix rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Invalid(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemFile {
    /// One matrix per rule.
    #[serde(rename = "A")]
    pub a: Vec<Rows>,
    #[serde(rename = "B")]
    pub b: Vec<Rows>,
    #[serde(rename = "A_d")]
    pub a_d: Vec<Rows>,
    pub w: Vec<Rows>,
    /// Interconnections keyed by the neighbour's index.
    #[serde(default)]
    pub f: BTreeMap<usize, Rows>,
    pub membership: Membership,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub subsystems: Vec<SubsystemFile>,
    pub h: usize,
    pub gamma: Vec<f64>,
    pub u_max: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Rows>>,
}

impl SystemFile {
    pub fn from_system(sys: &LargeScaleSystem) -> Self {
        let rows = |ms: &[DMatrix<f64>]| ms.iter().map(to_rows).collect();
        Self {
            subsystems: sys
                .subsystems
                .iter()
                .map(|s| SubsystemFile {
                    a: rows(&s.a),
                    b: rows(&s.b),
                    a_d: rows(&s.a_d),
                    w: rows(&s.w),
                    f: s.interconnections.iter().map(|(j, f)| (*j, to_rows(f))).collect(),
                    membership: s.membership.clone(),
                })
                .collect(),
            h: sys.delay_bound,
            gamma: sys.gamma.clone(),
            u_max: sys.u_max.clone(),
            outputs: sys.outputs.as_ref().map(|o| rows(o)),
        }
    }

    pub fn to_system(&self) -> Result<LargeScaleSystem, CliError> {
        let mats = |ms: &[Rows], what: String| -> Result<Vec<DMatrix<f64>>, CliError> {
            ms.iter().map(|m| from_rows(m, &what)).collect()
        };
        let subsystems = self
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(SubsystemRules {
                    a: mats(&s.a, format!("subsystem {i} A"))?,
                    b: mats(&s.b, format!("subsystem {i} B"))?,
                    a_d: mats(&s.a_d, format!("subsystem {i} A_d"))?,
                    w: mats(&s.w, format!("subsystem {i} w"))?,
                    interconnections: s
                        .f
                        .iter()
                        .map(|(j, f)| Ok((*j, from_rows(f, &format!("subsystem {i} f[{j}]"))?)))
                        .collect::<Result<_, CliError>>()?,
                    membership: s.membership.clone(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let sys = LargeScaleSystem::new(subsystems, self.h, self.gamma.clone(), self.u_max.clone())?;
        match &self.outputs {
            None => Ok(sys),
            Some(o) => Ok(sys.with_outputs(mats(o, "outputs".into())?)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    /// `k[i][l]` per subsystem and rule.
    pub k: Vec<Vec<Rows>>,
    pub sigma: Vec<f64>,
    pub x_shape: Vec<Rows>,
    #[serde(default)]
    pub z: Option<Vec<Rows>>,
    #[serde(default)]
    pub x_bar: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub status: Option<Vec<SolveStatus>>,
    #[serde(default)]
    pub certified: bool,
    /// Worst reduced eigenvalue per subsystem when synthesised.
    #[serde(default)]
    pub margins: Option<Vec<Option<f64>>>,
}

impl GainsFile {
    pub fn from_gains(g: &GainSet) -> Self {
        Self {
            k: g.k.iter().map(|ki| ki.iter().map(to_rows).collect()).collect(),
            sigma: g.sigma.clone(),
            x_shape: g.x_shape.iter().map(to_rows).collect(),
            z: Some(g.z.iter().map(to_rows).collect()),
            x_bar: Some(g.x_bar.iter().map(|v| v.as_slice().to_vec()).collect()),
            status: Some(g.status.clone()),
            certified: g.certified(),
            margins: Some(g.worst_margins()),
        }
    }

    /// Certificates are not stored; the result is a frozen gain set.
    pub fn to_gains(&self) -> Result<GainSet, CliError> {
        let n_sub = self.k.len();
        if n_sub == 0 {
            return Err(CliError::Invalid("gains file holds no subsystems".into()));
        }
        if self.sigma.len() != n_sub || self.x_shape.len() != n_sub {
            return Err(CliError::Invalid("gains file: k, sigma and x_shape lengths differ".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(CliError::Invalid("gains file: sigma must be positive".into()));
        }
        let k = self
            .k
            .iter()
            .enumerate()
            .map(|(i, ki)| {
                if ki.is_empty() {
                    return Err(CliError::Invalid(format!("gains file: subsystem {i} has no rule gains")));
                }
                ki.iter().map(|m| from_rows(m, &format!("k[{i}]"))).collect()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let x_shape = self
            .x_shape
            .iter()
            .map(|m| from_rows(m, "x_shape"))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = GainSet::frozen(k, x_shape, self.sigma.clone());
        if let Some(z) = &self.z {
            if z.len() != n_sub {
                return Err(CliError::Invalid("gains file: z length".into()));
            }
            g.z = z.iter().map(|m| from_rows(m, "z")).collect::<Result<_, _>>()?;
        }
        if let Some(xb) = &self.x_bar {
            if xb.len() != n_sub {
                return Err(CliError::Invalid("gains file: x_bar length".into()));
            }
            g.x_bar = xb.iter().map(|v| DVector::from_column_slice(v)).collect();
        }
        if let Some(st) = &self.status {
            g.status = st.clone();
        }
        g.certificates = vec![None::<CertificateReport>; n_sub];
        Ok(g)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::Invalid(format!("{} is empty", path.display())));
    }
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
