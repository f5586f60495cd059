use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::costmap::CostMapping;
use crate::extract::CropSpec;
use crate::gateway::{BackendConfig, BackendKind};
use crate::prompt::{PromptStrategy, QueryMode};

/// Declarative description of one rating run, read from TOML.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: PathBuf,
    /// Parent of the run directory; the run writes to `<output_dir>/<run_id>`.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds backoff jitter.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<PromptStrategy>,
    /// Robot ids from the manifest; all robots when omitted.
    #[serde(default)]
    pub robots: Option<Vec<String>>,
    #[serde(default = "default_query_modes")]
    pub query_modes: Vec<QueryMode>,
    /// Sampling temperatures; each backend's own `temperature` when omitted.
    #[serde(default)]
    pub temperatures: Option<Vec<f64>>,
    /// Directory of prompt templates replacing the built-in ones.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Extra model queries after an unparseable answer.
    #[serde(default)]
    pub parse_retries: u32,
    /// Write every instance crop to `<run>/crops/<instance_id>.png`.
    #[serde(default)]
    pub save_crops: bool,
    #[serde(default)]
    pub crop: CropSpec,
    #[serde(default)]
    pub costmap: CostmapConfig,
    pub backends: Vec<BackendConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_strategies() -> Vec<PromptStrategy> {
    vec![PromptStrategy::Plain]
}

fn default_query_modes() -> Vec<QueryMode> {
    vec![QueryMode::PerInstanceCrop]
}

/// Cost values plus the one configuration whose predictions are painted.
/// Unset selectors pick the first value of the corresponding axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostmapConfig {
    pub costs: [u8; 4],
    pub unassigned: u8,
    pub overlay_alpha: f64,
    pub backend: Option<String>,
    pub strategy: Option<PromptStrategy>,
    pub temperature: Option<f64>,
    pub query_mode: Option<QueryMode>,
    pub robot: Option<String>,
}

impl Default for CostmapConfig {
    fn default() -> Self {
        let m = CostMapping::default();
        CostmapConfig {
            costs: m.costs,
            unassigned: m.unassigned,
            overlay_alpha: 0.5,
            backend: None,
            strategy: None,
            temperature: None,
            query_mode: None,
            robot: None,
        }
    }
}

impl CostmapConfig {
    pub fn mapping(&self) -> CostMapping {
        CostMapping {
            costs: self.costs,
            unassigned: self.unassigned,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Read a config file and resolve its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.prompts_dir {
            fix(p);
        }
        for b in &mut self.backends {
            if let Some(p) = &mut b.mock_script {
                fix(p);
            }
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Temperatures swept for backend `b`.
    pub fn temperatures_for(&self, b: &BackendConfig) -> Vec<f64> {
        self.temperatures.clone().unwrap_or_else(|| vec![b.temperature])
    }

    /// Checks that need no files. Robot ids are checked against the manifest later.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        let id_ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.run_id.starts_with('.');
        if !id_ok {
            return bad("run_id must be non-empty and use only [A-Za-z0-9._-]");
        }
        if self.backends.is_empty() {
            return bad("at least one [[backends]] entry is required");
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty");
        }
        if self.query_modes.is_empty() {
            return bad("query_modes must not be empty");
        }
        if self.robots.as_ref().is_some_and(|r| r.is_empty()) {
            return bad("robots must not be empty");
        }
        if let Some(t) = &self.temperatures {
            if t.is_empty() {
                return bad("temperatures must not be empty");
            }
            if t.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return bad("temperatures must be finite and >= 0");
            }
        }
        let mut labels: Vec<&str> = self.backends.iter().map(|b| b.label()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("backend labels (name or model_tag) must be unique");
        }
        for b in &self.backends {
            b.validate()?;
            if b.kind == BackendKind::Mock && b.mock_script.is_none() {
                return Err(RunError::Config(format!(
                    "mock backend {} needs a mock_script",
                    b.label()
                )));
            }
        }
        self.crop
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.costmap
            .mapping()
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.costmap.overlay_alpha) {
            return bad("costmap.overlay_alpha must be in [0, 1]");
        }
        if let Some(b) = &self.costmap.backend {
            if !self.backends.iter().any(|x| x.label() == b) {
                return Err(RunError::Config(format!("costmap.backend {b} is not a configured backend")));
            }
        }
        Ok(())
    }
}
