//! Run-summary manifest written as JSON next to the other outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::geometry::Grid;
use crate::solver::{Conservation, RunOutput};
use crate::verification::Check;

#[derive(Clone, Debug, Serialize)]
pub struct GridSummary {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub h: f64,
    pub interior_nodes: usize,
    pub loops: usize,
}

impl From<&Grid> for GridSummary {
    fn from(g: &Grid) -> Self {
        Self {
            nx: g.nx,
            ny: g.ny,
            nz: g.nz,
            h: g.h,
            interior_nodes: g.num_interior(),
            loops: g.num_loops(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolverSummary {
    pub t_end: f64,
    pub windows: usize,
    pub window_length: f64,
    pub c_hat: f64,
    pub outer_tol: f64,
    pub outer_iterations: usize,
    /// Last `δⁿ` of every window.
    pub final_deltas: Vec<f64>,
    pub q0_max: f64,
    pub q_max: f64,
    /// Largest `|detJ - 1|` over the converged window maps.
    pub area_distortion: f64,
    pub conservation: Option<Conservation>,
}

impl SolverSummary {
    pub fn new(out: &RunOutput, q0_max: f64, conservation: Option<Conservation>) -> Self {
        Self {
            t_end: out.t_end(),
            windows: out.snapshots.len(),
            window_length: out.window,
            c_hat: out.c_hat,
            outer_tol: out.outer_tol,
            outer_iterations: out.snapshots.iter().map(|s| s.n).sum(),
            final_deltas: out
                .snapshots
                .iter()
                .filter_map(|s| s.last_delta())
                .collect(),
            q0_max,
            q_max: out.final_q().max_abs(),
            area_distortion: out.max_area_distortion(),
            conservation,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl From<&Check> for CheckSummary {
    fn from(c: &Check) -> Self {
        Self {
            id: c.id,
            name: c.name.to_string(),
            passed: c.passed,
            detail: c.detail.clone(),
            seconds: c.seconds,
        }
    }
}

/// Top-level manifest. Sections that do not apply to a subcommand are
/// omitted.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub version: String,
    pub status: String,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSummary>,
    /// Scalar results keyed by name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

impl RunSummary {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: "ok".to_string(),
            wall_seconds: 0.0,
            grid: None,
            solver: None,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_serializes_without_empty_sections() {
        let mut s = RunSummary::new("invert");
        s.metrics.insert("error_linf".into(), 1e-3);
        let v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(v["command"], "invert");
        assert_eq!(v["metrics"]["error_linf"], 1e-3);
        assert!(v.get("solver").is_none() && v.get("checks").is_none());
    }
}
