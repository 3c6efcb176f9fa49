use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pkmlab::encoder::special;
use serde::{Deserialize, Serialize};

pub const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Word,
    Char,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    #[serde(default)]
    pub mode: TokenizerMode,
    /// Total ids, reserved ones included.
    #[serde(default = "default_max_size")]
    pub max_size: usize,
}

fn default_max_size() -> usize {
    8192
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Word,
            max_size: default_max_size(),
        }
    }
}

/// Token ↔ id map. Ids `0..4` are `[PAD] [MASK] [UNK] [CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenizerMode,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    mode: TokenizerMode,
    tokens: Vec<String>,
}

fn split(mode: TokenizerMode, line: &str) -> Vec<&str> {
    match mode {
        TokenizerMode::Word => line.split_whitespace().collect(),
        TokenizerMode::Char => line.char_indices().map(|(i, c)| &line[i..i + c.len_utf8()]).collect(),
    }
}

impl Vocab {
    /// Frequency-ranked vocabulary over `lines`; ties broken lexicographically.
    pub fn build<S: AsRef<str>>(lines: &[S], cfg: &TokenizerConfig) -> Result<Self> {
        if cfg.max_size <= RESERVED.len() {
            bail!("tokenizer.max_size must exceed {} reserved ids", RESERVED.len());
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for tok in split(cfg.mode, line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            bail!("cannot build a vocabulary from an empty corpus");
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cfg.max_size - RESERVED.len());
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t.to_string())).collect();
        Ok(Self::from_tokens(cfg.mode, tokens))
    }

    fn from_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { mode, tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<u32> {
        split(self.mode, line).into_iter().map(|t| self.id(t).unwrap_or(special::UNK)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            mode: self.mode,
            tokens: self.tokens.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: VocabFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if file.tokens.len() < RESERVED.len() || file.tokens[..RESERVED.len()] != RESERVED {
            bail!("{}: reserved tokens missing", path.display());
        }
        let v = Self::from_tokens(file.mode, file.tokens);
        if v.ids.len() != v.tokens.len() {
            bail!("{}: duplicate tokens", path.display());
        }
        Ok(v)
    }
}
