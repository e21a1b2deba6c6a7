//! Trajectory CSV, manifests and hashing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuzzy_lsmpc_core::simulation::Trajectory;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::files::write_json;
use crate::CliError;

pub const CSV_HEADER: &str = "k,subsystem,state_index,x,u_index,u,d_index,d,V,Vbar,stage_cost,in_rpi";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per scalar signal: row `r` of `(k, i)` carries state entry `r`,
/// input entry `r` and disturbance entry `r` where they exist. The final
/// state has no input, disturbance or stage cost.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for k in 0..=traj.steps {
        for i in 0..traj.subsystems() {
            let x = &traj.states[k][i];
            let u = traj.inputs.get(k).map(|u| &u[i]);
            let d = traj.disturbances.get(k).map(|d| &d[i]);
            let rows = x.len().max(u.map_or(0, |u| u.len())).max(d.map_or(0, |d| d.len()));
            let v = traj.v.get(k).map(|v| v[i]);
            let vbar = traj.vbar.get(k).map(|v| v[i]);
            let cost = traj.stage_costs.get(k).map(|c| c[i]);
            let rpi = traj.in_rpi.get(k).map(|r| r[i]);
            for r in 0..rows {
                let xr = x.get(r).copied();
                let ur = u.and_then(|u| u.get(r).copied());
                let dr = d.and_then(|d| d.get(r).copied());
                let _ = writeln!(
                    s,
                    "{k},{i},{},{},{},{},{},{},{},{},{},{}",
                    opt(xr.map(|_| r)),
                    opt(xr),
                    opt(ur.map(|_| r)),
                    opt(ur),
                    opt(dr.map(|_| r)),
                    opt(dr),
                    opt(v),
                    opt(vbar),
                    opt(cost),
                    opt(rpi),
                );
            }
        }
    }
    s
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub system: String,
    pub seed: u64,
    pub config_hash: String,
    pub gains_source: Option<String>,
    pub config: C,
    pub outputs: Vec<String>,
}

/// Output directory that remembers what was written into it.
pub struct OutDir {
    pub root: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        write_json(&self.root.join(name), value)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.root.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }
}
