//! One JSON document configures every subcommand. Unknown keys are
//! rejected at every level; omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    build_sequences, five_core_filter, leave_one_out_split, rating_positivity_filter, read_interactions,
    synth_generate, Corpus, DatasetSplit, LogFormat, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::rqvae::RqvaeConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction log; ignored when `synth` is set.
    pub input: Option<PathBuf>,
    /// Inferred from the file extension when unset.
    pub format: Option<LogFormat>,
    /// Keep only ratings strictly above this value.
    pub rating_threshold: Option<f64>,
    /// Minimum interactions per user and per item (0 disables).
    pub core: usize,
    pub max_len: usize,
    /// Generate a synthetic corpus instead of reading `input`.
    pub synth: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: None,
            rating_threshold: None,
            core: 5,
            max_len: 20,
            synth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the training, tokenizer and synthetic-data
    /// sections when the config is resolved.
    pub seed: u64,
    /// Parent of all run directories.
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub tokenizer: RqvaeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            tokenizer: RqvaeConfig::default(),
        }
    }
}

/// Why a config could not be loaded.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error(transparent)]
    Other(#[from] Error),
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> std::result::Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Reads a config file; relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(inp) = cfg.data.input.as_mut() {
            if inp.is_relative() {
                *inp = base.join(&*inp);
            }
        }
        Ok(cfg)
    }

    /// Applies the master seed everywhere and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.tokenizer.seed = self.seed;
        self.model.backbone.max_len = self.data.max_len;
        self.model.validate()?;
        self.train.validate()?;
        self.tokenizer.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Outcome of data preparation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: DatasetSplit,
    /// Human-readable log of the filtering stages.
    pub notes: Vec<String>,
}

/// Builds the split described by `data` (synthetic when configured).
pub fn prepare(data: &DataConfig, seed: u64) -> Result<Prepared> {
    if let Some(s) = &data.synth {
        let d = synth_generate(s, seed, data.max_len)?;
        return Ok(Prepared {
            notes: vec![format!("synthetic corpus: {} users, {} items", s.n_users, s.n_items)],
            corpus: d.corpus,
            split: d.split,
        });
    }
    let input = data
        .input
        .as_ref()
        .ok_or_else(|| Error::invalid("data.input is not set (and data.synth is absent)"))?;
    let format = data.format.unwrap_or_else(|| LogFormat::from_path(input));
    let mut rows = read_interactions(input, format)?;
    let mut notes = vec![format!("read {} interactions from {}", rows.len(), input.display())];
    if let Some(t) = data.rating_threshold {
        let (r, rep) = rating_positivity_filter(&rows, t)?;
        notes.push(format!("rating > {t}: {} -> {} rows", rep.rows_in, rep.rows_out));
        rows = r;
    }
    if data.core > 0 {
        let (r, rep) = five_core_filter(&rows, data.core);
        notes.push(format!(
            "{}-core: {} -> {} rows in {} rounds",
            data.core, rep.rows_in, rep.rows_out, rep.rounds
        ));
        rows = r;
    }
    let corpus = build_sequences(&rows);
    let split = leave_one_out_split(&corpus, data.max_len)?;
    if split.excluded > 0 {
        notes.push(format!("{} users with fewer than 3 items excluded", split.excluded));
    }
    Ok(Prepared { corpus, split, notes })
}
