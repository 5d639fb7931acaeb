//! JSON fixture loading with errors that name the file and the offending field.

use std::fs;
use std::path::{Path, PathBuf};

use llmpa_core::chain::InstructionChain;
use llmpa_core::history::KeyPath;
use llmpa_core::layout::DetectionFixture;
use llmpa_core::ui::PageSnapshot;
use llmpa_core::world::WorldSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: field `{field}`: {message}", path.display())]
    Parse { path: PathBuf, field: String, message: String },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

impl FormatError {
    pub fn invalid(path: &Path, message: impl ToString) -> Self {
        FormatError::Invalid { path: path.to_path_buf(), message: message.to_string() }
    }
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        FormatError::Parse { path: path.to_path_buf(), field, message: e.into_inner().to_string() }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    parse_json(path, &text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let io = |source| FormatError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FormatError::invalid(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io)
}

pub fn load_page(path: &Path) -> Result<PageSnapshot, FormatError> {
    let page: PageSnapshot = read_json(path)?;
    page.validate().map_err(|e| FormatError::invalid(path, e))?;
    Ok(page)
}

/// Loads a world and checks every invariant, including gold replay of each task.
pub fn load_world(path: &Path) -> Result<WorldSpec, FormatError> {
    let world: WorldSpec = read_json(path)?;
    world.validate().map_err(|e| FormatError::invalid(path, e))?;
    Ok(world)
}

pub fn load_key_paths(path: &Path) -> Result<Vec<KeyPath>, FormatError> {
    let paths: Vec<KeyPath> = read_json(path)?;
    for (i, kp) in paths.iter().enumerate() {
        kp.validate().map_err(|e| FormatError::invalid(path, format!("key path {i}: {e}")))?;
    }
    Ok(paths)
}

pub fn load_detection_fixture(path: &Path) -> Result<DetectionFixture, FormatError> {
    read_json(path)
}

/// Sidecar cache of generated chains, one `<task_id>.json` file per task.
#[derive(Debug, Clone)]
pub struct ChainCache {
    dir: PathBuf,
}

impl ChainCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, task_id: &str) -> PathBuf {
        let safe: String = task_id
            .chars()
            .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}.json"))
    }

    pub fn load(&self, task_id: &str) -> Result<Option<InstructionChain>, FormatError> {
        let path = self.path_for(task_id);
        if !path.exists() {
            return Ok(None);
        }
        let chain: InstructionChain = read_json(&path)?;
        chain.validate().map_err(|e| FormatError::invalid(&path, e))?;
        Ok(Some(chain))
    }

    pub fn store(&self, task_id: &str, chain: &InstructionChain) -> Result<(), FormatError> {
        write_json(&self.path_for(task_id), chain)
    }
}
