//! Training configuration: a flat key/value file (TOML syntax) where every
//! key can also be set individually, which is how command-line overrides
//! are applied.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::MaskingConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{AnchorEmbeddingSource, ObjectiveConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
    pub masking: MaskingConfig,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Longest encoded sequence, `[CLS]` and `[SEP]` included.
    pub max_seq_len: usize,
    /// Minimum token count when the vocabulary is built from the corpus.
    pub vocab_min_count: usize,
    /// Probe every this many steps; 0 disables probing.
    pub probe_every: u64,
    /// Upper bound on the number of tokens sampled per probe.
    pub probe_samples: usize,
    /// Upper bound on the number of probe sequences encoded per probe.
    pub probe_sequences: usize,
    /// Seed of the probe sampling stream, independent of `seed`.
    pub probe_seed: u64,
    /// Checkpoint every this many steps; 0 saves only the final checkpoint.
    pub checkpoint_every: u64,
    /// Fill the `elapsed_ms` metrics column (disable for byte-comparable CSVs).
    pub log_elapsed: bool,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub probe_corpus: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::desk(),
            masking: MaskingConfig::default(),
            lr: 1e-4,
            warmup_steps: 250,
            total_steps: 5000,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
            max_seq_len: 64,
            vocab_min_count: 1,
            probe_every: 500,
            probe_samples: 2000,
            probe_sequences: 256,
            probe_seed: 0,
            checkpoint_every: 1000,
            log_elapsed: true,
            corpus: None,
            vocab: None,
            probe_corpus: None,
            pairs: None,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "preset",
        "variant",
        "negatives",
        "window",
        "temperature",
        "anchor_embedding_source",
        "tc_weight",
        "shared_negatives",
        "num_layers",
        "hidden_size",
        "num_heads",
        "ffn_size",
        "vocab_size",
        "max_positions",
        "dropout",
        "tie_embeddings",
        "freeze_embeddings",
        "init_embeddings_from",
        "init_range",
        "layer_norm_eps",
        "mask_ratio",
        "mask_token_prob",
        "random_token_prob",
        "lr",
        "warmup_steps",
        "total_steps",
        "batch_size",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "max_grad_norm",
        "seed",
        "max_seq_len",
        "vocab_min_count",
        "probe_every",
        "probe_samples",
        "probe_sequences",
        "probe_seed",
        "checkpoint_every",
        "log_elapsed",
        "corpus",
        "vocab",
        "probe_corpus",
        "pairs",
        "output_dir",
    ];

    /// Sets one key from its textual value. `preset` replaces the whole
    /// encoder block with a named size (`desk`, `small`, `base`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.objective;
        let e = &mut self.encoder;
        let m = &mut self.masking;
        match key {
            "preset" => {
                *e = EncoderConfig::preset(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown encoder preset `{value}`")))?
            }
            "variant" => {
                o.variant = Variant::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown variant `{value}`")))?
            }
            "negatives" => o.negatives = parse(key, value)?,
            "window" => o.window = parse(key, value)?,
            "temperature" => o.temperature = parse(key, value)?,
            "anchor_embedding_source" => {
                o.anchor_embedding_source = AnchorEmbeddingSource::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown anchor_embedding_source `{value}`")))?
            }
            "tc_weight" => o.tc_weight = parse(key, value)?,
            "shared_negatives" => o.shared_negatives = parse(key, value)?,
            "num_layers" => e.num_layers = parse(key, value)?,
            "hidden_size" => e.hidden_size = parse(key, value)?,
            "num_heads" => e.num_heads = parse(key, value)?,
            "ffn_size" => e.ffn_size = parse(key, value)?,
            "vocab_size" => e.vocab_size = parse(key, value)?,
            "max_positions" => e.max_positions = parse(key, value)?,
            "dropout" => e.dropout = parse(key, value)?,
            "tie_embeddings" => e.tie_embeddings = parse(key, value)?,
            "freeze_embeddings" => e.freeze_embeddings = parse(key, value)?,
            "init_embeddings_from" => e.init_embeddings_from = optional_path(value),
            "init_range" => e.init_range = parse(key, value)?,
            "layer_norm_eps" => e.layer_norm_eps = parse(key, value)?,
            "mask_ratio" => m.ratio = parse(key, value)?,
            "mask_token_prob" => m.mask_token_prob = parse(key, value)?,
            "random_token_prob" => m.random_token_prob = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "vocab_min_count" => self.vocab_min_count = parse(key, value)?,
            "probe_every" => self.probe_every = parse(key, value)?,
            "probe_samples" => self.probe_samples = parse(key, value)?,
            "probe_sequences" => self.probe_sequences = parse(key, value)?,
            "probe_seed" => self.probe_seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_elapsed" => self.log_elapsed = parse(key, value)?,
            "corpus" => self.corpus = optional_path(value),
            "vocab" => self.vocab = optional_path(value),
            "probe_corpus" => self.probe_corpus = optional_path(value),
            "pairs" => self.pairs = optional_path(value),
            "output_dir" => self.output_dir = optional_path(value),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` TOML text on top of the defaults. A
    /// `preset` key is applied before all others.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("cannot parse configuration: {e}")))?;
        let mut cfg = TrainConfig::default();
        let mut entries: Vec<(&String, &toml::Value)> = table.iter().collect();
        entries.sort_by_key(|(k, _)| *k != "preset");
        for (key, value) in entries {
            let text = match value {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "`{key}` must be a scalar, found {}",
                        other.type_str()
                    )))
                }
            };
            cfg.set(key, &text)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.objective.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.objective.variant.uses_contrastive() && self.batch_size < 2 {
            return bad("the contrastive loss needs batch_size ≥ 2".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("adam_eps and max_grad_norm must be positive, weight_decay non-negative".into());
        }
        let m = &self.masking;
        if !(m.ratio > 0.0 && m.ratio <= 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1], got {}", m.ratio));
        }
        if m.mask_token_prob < 0.0 || m.random_token_prob < 0.0 || m.mask_token_prob + m.random_token_prob > 1.0 {
            return bad("mask_token_prob and random_token_prob must be non-negative and sum to at most 1".into());
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must leave room for [CLS], one token and [SEP]".into());
        }
        if self.max_seq_len > self.encoder.max_positions {
            return bad(format!(
                "max_seq_len {} exceeds max_positions {}",
                self.max_seq_len, self.encoder.max_positions
            ));
        }
        if self.probe_every > 0 && self.probe_samples == 0 {
            return bad("probe_samples must be positive when probing".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> super::AdamWConfig {
        super::AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}
