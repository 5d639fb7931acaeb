//! Run configuration files. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use llmpa_core::episode::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::formats::{read_json, FormatError};
use crate::http::HttpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted { script: PathBuf },
    Template,
    Http(HttpConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Flag,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_paths: Option<PathBuf>,
    /// Task ids to run; all tasks when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<String>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Configurations for `eval`; `run` uses `pipeline`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matrix: Vec<PipelineConfig>,
    #[serde(default)]
    pub classifier: ClassifierKind,
    #[serde(default = "default_true")]
    pub redact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_cache: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Reserved; every bundled backend is deterministic.
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

impl RunConfig {
    pub fn new(world: impl Into<PathBuf>, backend: BackendConfig) -> Self {
        Self {
            world: world.into(),
            key_paths: None,
            tasks: Vec::new(),
            backend,
            pipeline: PipelineConfig::default(),
            matrix: Vec::new(),
            classifier: ClassifierKind::Flag,
            redact: true,
            chain_cache: None,
            output_dir: default_output(),
            jobs: 1,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.world);
        if let Some(p) = &mut self.key_paths {
            fix(p);
        }
        if let BackendConfig::Scripted { script } = &mut self.backend {
            fix(script);
        }
        if let Some(p) = &mut self.chain_cache {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Paths that must exist before anything runs.
    pub fn check_paths(&self) -> Result<(), FormatError> {
        let mut required = vec![&self.world];
        required.extend(self.key_paths.as_ref());
        if let BackendConfig::Scripted { script } = &self.backend {
            required.push(script);
        }
        match required.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(FormatError::invalid(p, "file does not exist")),
            None => Ok(()),
        }
    }
}
