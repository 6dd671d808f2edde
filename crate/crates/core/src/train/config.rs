//! Run configuration: flat `section.key=value` text with a default for
//! every key. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::VocabMode;
use crate::error::{Error, Result};
use crate::noise::tower_config;
use crate::transformer::{AttentionMode, TransformerConfig};

/// What the main encoder is trained to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Energy-based cloze model trained with NCE.
    Electric,
    /// Same encoder and noise, binary replaced-token detection.
    Electra,
    /// Masked language model baseline; no noise model.
    Mlm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Electric => "electric",
            Objective::Electra => "electra",
            Objective::Mlm => "mlm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "electric" => Ok(Objective::Electric),
            "electra" => Ok(Objective::Electra),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub embedding_size: usize,
    /// Framed length, sentinels included; longer lines are truncated.
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Tower width relative to the main encoder. Small on purpose: towers
    /// that predict too well leave the main model few useful negatives.
    pub tower_ratio: f64,
    /// Towers reuse the main encoder's token table.
    pub share_embeddings: bool,
    pub objective: Objective,
    pub vocab_mode: VocabMode,
    /// Vocabulary capacity including the reserved ids.
    pub vocab_max_size: usize,

    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub noise_fraction: f64,
    /// 0 disables periodic evaluation; the final one always runs.
    pub eval_every: u64,
    pub eval_sentences: usize,
    /// Trailing share of corpus lines held out from training.
    pub heldout_fraction: f64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,

    pub corpus: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            embedding_size: 64,
            max_seq_len: 64,
            dropout: 0.0,
            tower_ratio: 0.0625,
            share_embeddings: true,
            objective: Objective::Electric,
            vocab_mode: VocabMode::Char,
            vocab_max_size: 128,
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            seed: 0,
            noise_fraction: 0.15,
            eval_every: 200,
            eval_sentences: 64,
            heldout_fraction: 0.02,
            checkpoint_every: 500,
            corpus: PathBuf::from("corpus.txt"),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Every key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "model.num_layers",
        "model.hidden_size",
        "model.num_heads",
        "model.ffn_size",
        "model.embedding_size",
        "model.max_seq_len",
        "model.dropout",
        "model.tower_ratio",
        "model.share_embeddings",
        "model.objective",
        "model.vocab_mode",
        "model.vocab_max_size",
        "train.steps",
        "train.batch_size",
        "train.learning_rate",
        "train.warmup_steps",
        "train.weight_decay",
        "train.seed",
        "train.noise_fraction",
        "train.eval_every",
        "train.eval_sentences",
        "train.heldout_fraction",
        "train.checkpoint_every",
        "paths.corpus",
        "paths.checkpoint_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "model.num_layers" => self.num_layers = parse_value(key, v)?,
            "model.hidden_size" => self.hidden_size = parse_value(key, v)?,
            "model.num_heads" => self.num_heads = parse_value(key, v)?,
            "model.ffn_size" => self.ffn_size = parse_value(key, v)?,
            "model.embedding_size" => self.embedding_size = parse_value(key, v)?,
            "model.max_seq_len" => self.max_seq_len = parse_value(key, v)?,
            "model.dropout" => self.dropout = parse_value(key, v)?,
            "model.tower_ratio" => self.tower_ratio = parse_value(key, v)?,
            "model.share_embeddings" => self.share_embeddings = parse_value(key, v)?,
            "model.objective" => self.objective = v.parse()?,
            "model.vocab_mode" => self.vocab_mode = v.parse()?,
            "model.vocab_max_size" => self.vocab_max_size = parse_value(key, v)?,
            "train.steps" => self.steps = parse_value(key, v)?,
            "train.batch_size" => self.batch_size = parse_value(key, v)?,
            "train.learning_rate" => self.learning_rate = parse_value(key, v)?,
            "train.warmup_steps" => self.warmup_steps = parse_value(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "train.seed" => self.seed = parse_value(key, v)?,
            "train.noise_fraction" => self.noise_fraction = parse_value(key, v)?,
            "train.eval_every" => self.eval_every = parse_value(key, v)?,
            "train.eval_sentences" => self.eval_sentences = parse_value(key, v)?,
            "train.heldout_fraction" => self.heldout_fraction = parse_value(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "paths.corpus" => self.corpus = PathBuf::from(v),
            "paths.checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        // `{}` on f64 round-trips exactly
        Some(match key {
            "model.num_layers" => self.num_layers.to_string(),
            "model.hidden_size" => self.hidden_size.to_string(),
            "model.num_heads" => self.num_heads.to_string(),
            "model.ffn_size" => self.ffn_size.to_string(),
            "model.embedding_size" => self.embedding_size.to_string(),
            "model.max_seq_len" => self.max_seq_len.to_string(),
            "model.dropout" => self.dropout.to_string(),
            "model.tower_ratio" => self.tower_ratio.to_string(),
            "model.share_embeddings" => self.share_embeddings.to_string(),
            "model.objective" => self.objective.to_string(),
            "model.vocab_mode" => self.vocab_mode.to_string(),
            "model.vocab_max_size" => self.vocab_max_size.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.learning_rate" => self.learning_rate.to_string(),
            "train.warmup_steps" => self.warmup_steps.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.noise_fraction" => self.noise_fraction.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.eval_sentences" => self.eval_sentences.to_string(),
            "train.heldout_fraction" => self.heldout_fraction.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "paths.corpus" => self.corpus.display().to_string(),
            "paths.checkpoint_dir" => self.checkpoint_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_fraction > 0.0 && self.noise_fraction <= 0.5) {
            return Err(Error::Config(format!("noise_fraction {} not in (0, 0.5]", self.noise_fraction)));
        }
        if !(self.tower_ratio > 0.0 && self.tower_ratio <= 1.0) {
            return Err(Error::Config(format!("tower_ratio {} not in (0, 1]", self.tower_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be finite and non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!("heldout_fraction {} not in [0, 1)", self.heldout_fraction)));
        }
        if self.vocab_max_size <= crate::data::NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_max_size {} leaves no room beyond the reserved ids",
                self.vocab_max_size
            )));
        }
        self.encoder_config(self.vocab_max_size)?;
        Ok(())
    }

    /// Main encoder shape for a vocabulary of `vocab_size`.
    pub fn encoder_config(&self, vocab_size: usize) -> Result<TransformerConfig> {
        let c = TransformerConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            max_seq_len: self.max_seq_len,
            vocab_size,
            embedding_size: self.embedding_size,
            attention_mode: AttentionMode::Bidirectional,
            dropout_rate: self.dropout,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn tower_config(&self, vocab_size: usize) -> Result<TransformerConfig> {
        let c = tower_config(&self.encoder_config(vocab_size)?, self.tower_ratio);
        c.validate()?;
        Ok(c)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
