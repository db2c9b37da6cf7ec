use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::BaselineConfig;
use crate::density::GridSpec;
use crate::dynamics::SystemConfig;
use crate::error::{config_err, Error, Result};
use crate::model::ModelOptions;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train_steps: usize,
    pub test_steps: usize,
}

fn default_l() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PisaSection {
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for PisaSection {
    fn default() -> Self {
        PisaSection {
            l: default_l(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
        }
    }
}

/// A half-open range `start..end` of test steps (0-based: index 0 is the first predicted step).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    pub axes: [usize; 2],
    /// Cells per axis; defaults to the lattice resolution or 32.
    #[serde(default)]
    pub bins: Option<usize>,
    /// Points in the projected plane whose neighbourhood mass is reported.
    #[serde(default)]
    pub centers: Vec<[f64; 2]>,
    #[serde(default)]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Centres (full state dimension) for the terminal-density mass concentration.
    #[serde(default)]
    pub centers: Vec<Vec<f64>>,
    #[serde(default)]
    pub radius: f64,
    /// Windows over the test horizon; empty means one window spanning all of it.
    #[serde(default)]
    pub windows: Vec<Window>,
    #[serde(default)]
    pub heatmap: Option<HeatmapConfig>,
    /// Coordinates per block for a finite-difference gradient check before training
    /// (0 skips it).
    #[serde(default)]
    pub fd_coords: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Pisa,
    Baseline,
}

fn default_models() -> Vec<ModelChoice> {
    vec![ModelChoice::Pisa, ModelChoice::Baseline]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ArtifactConfig {
    /// Write the simulated trajectories as CSV.
    #[serde(default)]
    pub trajectories: bool,
    /// Write the estimated density series as JSON.
    #[serde(default)]
    pub series: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    /// State axes kept before density estimation (all when absent).
    #[serde(default)]
    pub project_axes: Option<Vec<usize>>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// KDE bandwidth; the Scott rule when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub split: Split,
    #[serde(default = "default_models")]
    pub models: Vec<ModelChoice>,
    #[serde(default)]
    pub pisa: PisaSection,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate_static()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let SystemConfig::ExternalCsv { path: csv, .. } = &mut cfg.system {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks that do not need the data (the `train + test <= K` check runs once `K` is known).
    pub fn validate_static(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let SystemConfig::ExternalCsv { path, .. } = &self.system {
            if !path.exists() {
                return Err(config_err(format!("system.path: {} does not exist", path.display())));
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err(format!("sigma must be positive, got {s}")));
            }
        }
        if self.split.train_steps == 0 {
            return Err(config_err("split.train_steps must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(config_err("models must name at least one model"));
        }
        self.pisa.train.validate().map_err(|e| prefix(e, "pisa.train"))?;
        self.baseline.validate().map_err(|e| prefix(e, "baseline"))?;
        let a = &self.analysis;
        if !(a.radius >= 0.0) {
            return Err(config_err("analysis.radius must be >= 0"));
        }
        for w in &a.windows {
            if w.start >= w.end || w.end > self.split.test_steps {
                return Err(config_err(format!(
                    "analysis.windows: `{}` = {}..{} is empty or exceeds the {} test steps",
                    w.name, w.start, w.end, self.split.test_steps
                )));
            }
        }
        if let Some(h) = &a.heatmap {
            if h.axes[0] == h.axes[1] {
                return Err(config_err("analysis.heatmap.axes must be two distinct axes"));
            }
            if h.bins == Some(0) {
                return Err(config_err("analysis.heatmap.bins must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn wants(&self, m: ModelChoice) -> bool {
        self.models.contains(&m)
    }

    /// Windows to report, defaulting to the whole test horizon.
    pub fn windows(&self) -> Vec<Window> {
        if self.analysis.windows.is_empty() && self.split.test_steps > 0 {
            vec![Window {
                name: "all".into(),
                start: 0,
                end: self.split.test_steps,
            }]
        } else {
            self.analysis.windows.clone()
        }
    }
}

fn prefix(e: Error, path: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "system": {"kind": "vdp", "n_agents": 10, "t_final": 1.0, "tau": 0.1,
                   "init_box": {"lower": [-1, -1], "upper": [1, 1]},
                   "domain": {"lower": [-4, -4], "upper": [4, 4]}},
        "split": {"train_steps": 6, "test_steps": 4}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.pisa.l, 5);
        assert_eq!(c.pisa.train.n_epochs, 1000);
        assert_eq!(c.baseline.iterations, 1000);
        assert_eq!(c.models, vec![ModelChoice::Pisa, ModelChoice::Baseline]);
        assert_eq!(c.windows().len(), 1);
    }

    #[test]
    fn error_paths_are_reported() {
        let bad = MINIMAL.replace("\"t_final\": 1.0", "\"t_final\": \"x\"");
        let e = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(e.to_string().contains("system"), "{e}");
        let bad = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("\"split\"", "\"bogus\": 1, \"split\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn window_bounds_checked() {
        let bad = MINIMAL.replace(
            "\"split\"",
            "\"analysis\": {\"windows\": [{\"name\": \"w\", \"start\": 2, \"end\": 9}]}, \"split\"",
        );
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_seed() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.hash(), c.clone().hash());
        assert_ne!(c.hash(), c.clone().with_seed(Some(3)).hash());
        assert_eq!(c.hash().len(), 16);
    }
}
