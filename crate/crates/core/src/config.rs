//! Run configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the defaults of
//! [`RunConfig::default`]. The effective configuration is echoed next to
//! the outputs and parses back to the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elliptic::EllipticOptions;
use crate::error::{QgError, Result};
use crate::geometry::DomainSpec;
use crate::solver::SolverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub initial: InitialConfig,
    pub circulation: CirculationConfig,
    pub elliptic: EllipticOptions,
    pub solver: SolverConfig,
    pub greens: GreensConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Dipole,
    Radial,
    RandomBounded,
    /// The annulus test problem with a known stream function; `invert`
    /// reports the error against it.
    Manufactured,
    /// Values read from `path`, a CSV with columns `x,y,z,value`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub preset: Preset,
    pub amplitude: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Require zero mean on every level.
    pub homogeneous: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirculationConfig {
    /// One constant per loop, outer loop first; empty means all zero.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreensConfig {
    /// Source nodes for the decay estimates.
    pub sources: usize,
    /// Source pairs for the quasi-Lipschitz report.
    pub pairs: usize,
    pub seed: u64,
    /// Cache budget for kernel responses, in MiB.
    pub cache_mib: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a field snapshot every this many windows (0 disables them).
    pub every: usize,
    pub vtk: bool,
    /// Write the forward trajectory of the last window.
    pub trajectories: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domain: DomainSpec::annulus(1.0, 2.0),
            grid: GridConfig::default(),
            time: TimeConfig::default(),
            initial: InitialConfig::default(),
            circulation: CirculationConfig::default(),
            elliptic: EllipticOptions::default(),
            solver: SolverConfig::default(),
            greens: GreensConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nx: 48,
            ny: 48,
            nz: 5,
        }
    }
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t_end: 0.1 }
    }
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Dipole,
            amplitude: 1.0,
            seed: 1,
            path: None,
            homogeneous: true,
        }
    }
}

impl Default for GreensConfig {
    fn default() -> Self {
        Self {
            sources: 6,
            pairs: 200,
            seed: 11,
            cache_mib: 512,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            every: 1,
            vtk: false,
            trajectories: false,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| QgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            QgError::Config(m) => QgError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QgError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QgError::Config(m));
        let g = &self.grid;
        if g.nx < 4 || g.ny < 4 || g.nz < 2 {
            return bad(format!(
                "grid.nx, grid.ny must be at least 4 and grid.nz at least 2, got {}x{}x{}",
                g.nx, g.ny, g.nz
            ));
        }
        if !(self.time.t_end >= 0.0) {
            return bad(format!(
                "time.t_end must be non-negative, got {}",
                self.time.t_end
            ));
        }
        if !(self.initial.amplitude > 0.0) {
            return bad("initial.amplitude must be positive".into());
        }
        if self.initial.preset == Preset::File && self.initial.path.is_none() {
            return bad("initial.path is required with preset = \"file\"".into());
        }
        if self.initial.preset == Preset::Manufactured
            && !matches!(self.domain, DomainSpec::Annulus { .. })
        {
            return bad("the manufactured preset needs an annulus domain".into());
        }
        if self.circulation.values.iter().any(|v| !v.is_finite()) {
            return bad("circulation.values must be finite".into());
        }
        let e = &self.elliptic;
        if !(e.solver_tol > 0.0 && e.compat_tol > 0.0) {
            return bad("elliptic tolerances must be positive".into());
        }
        if self.greens.sources == 0 || self.greens.pairs == 0 {
            return bad("greens.sources and greens.pairs must be positive".into());
        }
        self.solver.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let text = r#"
            [domain]
            kind = "rectangle"
            outer = [0.0, 0.0, 3.0, 3.0]
            holes = [[1.0, 1.0, 2.0, 2.0]]

            [grid]
            nx = 30
            ny = 30
            nz = 4

            [initial]
            preset = "random-bounded"
            seed = 5

            [circulation]
            values = [0.0, 0.0]

            [solver]
            sigma = 0.25
            c_hat = 3.0

            [solver.picard]
            seed = "linear-drift"
            schedule = "sweep"
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.grid.nx, 30);
        assert_eq!(cfg.solver.c_hat, Some(3.0));
        let echoed = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&echoed).unwrap(), cfg);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().to_toml().unwrap()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("[grid]\nnx = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("nx") && e.contains("line 2"), "{e}");
        let e = RunConfig::parse("[solver]\nsigmaa = 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("sigmaa"), "{e}");
        let e = RunConfig::parse("[solver]\nsigma = 1.5\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("sigma"), "{e}");
        assert!(RunConfig::parse("[initial]\npreset = \"file\"\n").is_err());
    }
}
