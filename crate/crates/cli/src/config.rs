use std::path::{Path, PathBuf};

use amn_core::data::{NormScheme, Schema, SyntheticSpec, Task};
use amn_core::experiment::DEFAULT_FRACTIONS;
use amn_core::explain::DEFAULT_GRID;
use amn_core::train::TrainConfig;
use amn_core::{AmnError, Result};
use serde::{Deserialize, Serialize};

/// Where samples come from and how they are windowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV file, relative to the config file. Absent means `[synthetic]`.
    pub path: Option<PathBuf>,
    pub schema: Option<Schema>,
    pub target: Option<String>,
    pub inputs: Option<Vec<String>>,
    pub window: usize,
    pub horizon: usize,
    pub fractions: [f64; 3],
    pub scheme: NormScheme,
    /// Defaults to true for regression, false for classification.
    pub normalize_target: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            schema: None,
            target: None,
            inputs: None,
            window: 1,
            horizon: 1,
            fractions: DEFAULT_FRACTIONS,
            scheme: NormScheme::Zscore,
            normalize_target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub grid: usize,
    pub max_samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            grid: DEFAULT_GRID,
            max_samples: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synthetic: Option<SyntheticSpec>,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Parse a TOML file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AmnError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| AmnError::Config(format!("{}: {e}", path.display())))?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(AmnError::Config(
                    "give either data.path or a [synthetic] section, not both".into(),
                ))
            }
            (Some(_), None) if self.data.target.is_none() => {
                return Err(AmnError::Config("data.target is required with data.path".into()))
            }
            _ => {}
        }
        if let Some(spec) = &self.synthetic {
            if spec.task != self.train.task {
                return Err(AmnError::Config(format!(
                    "synthetic.task ({}) disagrees with train.task ({})",
                    spec.task.as_str(),
                    self.train.task.as_str()
                )));
            }
        }
        if self.data.window == 0 || self.data.horizon == 0 {
            return Err(AmnError::Config("data.window and data.horizon must be >= 1".into()));
        }
        self.train.validate()
    }

    pub fn set_task(&mut self, task: Task) {
        self.train.task = task;
        if let Some(spec) = &mut self.synthetic {
            spec.task = task;
        }
    }

    /// With neither a CSV nor a generator configured, use the default generator.
    pub fn synthetic_or_default(&self) -> Option<SyntheticSpec> {
        match (&self.data.path, &self.synthetic) {
            (Some(_), _) => None,
            (None, Some(s)) => Some(s.clone()),
            (None, None) => Some(SyntheticSpec {
                task: self.train.task,
                ..SyntheticSpec::default()
            }),
        }
    }
}
