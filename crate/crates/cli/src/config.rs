use std::fs;
use std::path::{Path, PathBuf};

use pkmlab::encoder::EncoderConfig;
use pkmlab::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::BenchConfig;
use crate::vocab::TokenizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: at `{field}`: {message}")]
    Schema { path: PathBuf, field: String, message: String },
    #[error("{0}")]
    Missing(String),
}

/// Everything a subcommand reads. Relative paths are resolved against the
/// directory of the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Plain-text corpus, one document per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// `label<TAB>text` lines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    /// Existing vocabulary; built from the input text when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub model: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Checkpoint directory read by `analyze` and `classdiv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text, path)?;
        cfg.resolve(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.labeled);
        fix(&mut self.vocab);
        fix(&mut self.checkpoint);
        if let Some(t) = &mut self.train {
            fix(&mut t.init_from);
        }
    }

    pub fn train(&self) -> Result<&TrainConfig, ConfigError> {
        self.train.as_ref().ok_or_else(|| ConfigError::Missing("config needs a `train` section".into()))
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, ConfigError> {
        field.as_deref().ok_or_else(|| ConfigError::Missing(format!("config needs `{name}`")))
    }
}
