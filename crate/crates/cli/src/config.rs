//! JSON configuration files and the run manifest.
//!
//! Any command's `manifest.json` is also accepted as `--config`; its
//! resolved snapshot is used, so a run can be repeated exactly.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mgcp::bench::{BenchConfig, ScenarioSpec};
use mgcp::{DameConfig, DomainSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub path: PathBuf,
    /// Present when the source's inputs differ from the target's; the
    /// source is then marginalized and expanded before fitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSpec<f64>>,
}

/// Configuration of `fit` and `sweep-gamma`. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub sources: Vec<SourceEntry>,
    pub target: PathBuf,
    /// Feature-only CSV of prediction points; defaults to the target inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    /// Root seed. Training uses it directly; each adapted source derives
    /// its own child seed from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dame: DameConfig,
}

impl FitConfig {
    /// Makes paths absolute, applies the seed override and checks every
    /// section.
    pub fn resolve(mut self, base: &Path, seed: Option<u64>) -> CliResult<Self> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        for s in &mut self.sources {
            s.path = abs(&s.path);
        }
        self.target = abs(&self.target);
        self.query = self.query.as_deref().map(abs);
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        self.train.validate()?;
        if self.sources.iter().any(|s| s.domain.is_some()) {
            self.dame.validate()?;
        }
        for (i, s) in self.sources.iter().enumerate() {
            if let Some(spec) = &s.domain {
                spec.validate(None)
                    .map_err(|e| CliError::Config(format!("sources[{i}].domain: {e}")))?;
            }
        }
        Ok(self)
    }
}

/// Configuration of the simulation commands. Missing sections take the
/// case defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

/// Reads a config file, unwrapping a manifest's snapshot if given one.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            value = obj.remove("config").expect("checked");
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Directory that relative paths in `path` refer to.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration; feeding it back reproduces the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> CliResult<()> {
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Output(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
    }
}
