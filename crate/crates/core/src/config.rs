//! Run configuration: one TOML file per experiment, checked strictly.
//! Omitted tables and keys fall back to the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::NmpcConfig;
use crate::dynamics::VehicleParams;
use crate::estimation::MheConfig;
use crate::learning::GpConfig;
use crate::planner::PlannerConfig;
use crate::registry::{self, PlantSettings};
use crate::sim::SimConfig;
use crate::track::{fit_track, synthesize_track, TrackError, TrackGeometry, Waypoints};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration `{path}`: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Either a synthesized track looked up by name or a waypoint CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// registered synthesizer name; ignored when `file` is set
    pub name: String,
    /// waypoint CSV with columns `x,y,half_width`
    pub file: Option<PathBuf>,
    pub closed: bool,
    pub scale: f64,
    pub width: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            name: "oval".into(),
            file: None,
            closed: true,
            scale: 6.0,
            width: 0.8,
        }
    }
}

impl TrackConfig {
    /// Short label used in file names and reports.
    pub fn label(&self) -> String {
        match &self.file {
            Some(f) => f.file_stem().map_or("track".into(), |s| s.to_string_lossy().into_owned()),
            None => self.name.clone(),
        }
    }

    pub fn geometry(&self) -> Result<TrackGeometry, ConfigError> {
        let waypoints = match &self.file {
            Some(path) => {
                if !path.exists() {
                    return Err(ConfigError::MissingFile(path.clone()));
                }
                Waypoints::read_csv(path)?
            }
            None => {
                let factory = *registry::tracks().get(&self.name).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                synthesize_track(&factory(self.scale, self.width))?
            }
        };
        Ok(fit_track(&waypoints, self.closed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub laps: usize,
    pub controller: String,
    pub plant: String,
    /// derivative bias of the `biased` plant over (X, Y, psi, v)
    pub plant_bias: [f64; 4],
    pub out_dir: PathBuf,
    /// race-line CSV; defaults to `<out_dir>/raceline.csv`
    pub raceline: Option<PathBuf>,
    pub track: TrackConfig,
    pub vehicle: VehicleParams,
    pub nmpc: NmpcConfig,
    pub mhe: MheConfig,
    pub planner: PlannerConfig,
    pub gp: GpConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            laps: 2,
            controller: "mpc".into(),
            plant: "full".into(),
            plant_bias: [0.0; 4],
            out_dir: PathBuf::from("out"),
            raceline: None,
            track: TrackConfig::default(),
            vehicle: VehicleParams::default(),
            nmpc: NmpcConfig::default(),
            mhe: MheConfig::default(),
            planner: PlannerConfig::default(),
            gp: GpConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Relative paths inside the file resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        if let Some(p) = cfg.raceline.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.track.file.as_mut() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.laps < 1 {
            return Err(ConfigError::Invalid("laps must be at least 1".into()));
        }
        registry::controllers().get(&self.controller).map_err(|e| invalid(&e))?;
        registry::plants().get(&self.plant).map_err(|e| invalid(&e))?;
        if self.track.file.is_none() {
            registry::tracks().get(&self.track.name).map_err(|e| invalid(&e))?;
            if !(self.track.scale > 0.0 && self.track.width > 0.0) {
                return Err(ConfigError::Invalid("track scale and width must be positive".into()));
            }
        }
        if let Some(f) = &self.track.file {
            if !f.exists() {
                return Err(ConfigError::MissingFile(f.clone()));
            }
        }
        if !self.plant_bias.iter().all(|b| b.is_finite()) {
            return Err(ConfigError::Invalid("plant_bias must be finite".into()));
        }
        self.vehicle.validate().map_err(|e| invalid(&e))?;
        self.nmpc.validate().map_err(|e| invalid(&e))?;
        self.mhe.validate().map_err(|e| invalid(&e))?;
        self.planner.validate().map_err(|e| invalid(&e))?;
        self.gp.validate().map_err(|e| invalid(&e))?;
        self.sim_config().validate().map_err(|e| invalid(&e))?;
        if (self.nmpc.ts - self.sim.ts).abs() > 1e-12 || (self.mhe.ts - self.sim.ts).abs() > 1e-12 {
            return Err(ConfigError::Invalid(format!(
                "nmpc.ts ({}), mhe.ts ({}) and sim.ts ({}) must agree",
                self.nmpc.ts, self.mhe.ts, self.sim.ts
            )));
        }
        Ok(())
    }

    /// Simulation settings with the top-level lap count applied.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            laps: self.laps,
            ..self.sim.clone()
        }
    }

    pub fn raceline_path(&self) -> PathBuf {
        self.raceline.clone().unwrap_or_else(|| self.out_dir.join("raceline.csv"))
    }

    pub fn plant_settings(&self) -> PlantSettings {
        PlantSettings {
            params: self.vehicle,
            bias: self.plant_bias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "");
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.nmpc, NmpcConfig::default());
        assert_eq!(cfg.vehicle, VehicleParams::default());
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.raceline_path(), dir.path().join("out").join("raceline.csv"));
    }

    #[test]
    fn nested_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.toml",
            "seed = 7\nlaps = 3\ncontroller = \"l-mpc\"\n[track]\nname = \"l_shape\"\n[nmpc]\nhorizon = 12\n[mhe]\nwindow = 4\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!((cfg.seed, cfg.laps, cfg.controller.as_str()), (7, 3, "l-mpc"));
        assert_eq!(cfg.track.name, "l_shape");
        assert_eq!(cfg.nmpc.horizon, 12);
        assert_eq!(cfg.nmpc.q, NmpcConfig::default().q);
        assert_eq!(cfg.sim_config().laps, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["sed = 1\n", "[nmpc]\nhorizn = 3\n", "[track]\nkind = \"oval\"\n"] {
            let p = write(dir.path(), "bad.toml", text);
            assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })), "{text}");
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "laps = 0\n",
            "controller = \"pid\"\n",
            "[nmpc]\nhorizon = 0\n",
            "[sim]\nspeed_scale = 1.5\n",
            "[nmpc]\nts = 0.05\n",
        ] {
            let p = write(dir.path(), "bad.toml", text);
            assert!(matches!(RunConfig::load(&p), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::load(&dir.path().join("nope.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)));
        let p = write(dir.path(), "run.toml", "[track]\nfile = \"absent.csv\"\n");
        match RunConfig::load(&p).unwrap_err() {
            ConfigError::MissingFile(f) => assert_eq!(f, dir.path().join("absent.csv")),
            e => panic!("unexpected {e}"),
        }
    }
}
