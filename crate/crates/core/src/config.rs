//! Flat `section.key = value` run configuration.
//!
//! Every setting except `run.seed` has a default. Unknown keys are rejected
//! so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bias_corpus::BiasSamplingConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::losses::TrainConfig;
use crate::model::ModelConfig;
use crate::synth_data::SynthConfig;

/// Environment variable that overrides `run.seed`.
pub const SEED_ENV: &str = "CBA_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for decoding and per-utterance gradients; 0 = all cores.
    pub jobs: usize,
    pub synth: SynthConfig,
    pub min_pair_frequency: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline_epochs: usize,
    pub cba_epochs: usize,
    pub cba_learning_rate: f64,
    pub bias: BiasSamplingConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        Self {
            seed,
            jobs: 0,
            synth: SynthConfig::default(),
            min_pair_frequency: 2,
            model: ModelConfig::default(),
            baseline_epochs: train.epochs,
            cba_epochs: 80,
            cba_learning_rate: 2e-3,
            train,
            bias: BiasSamplingConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

trait Field {
    fn set(&mut self, raw: &str) -> std::result::Result<(), String>;
    fn show(&self) -> String;
}

macro_rules! parsed_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn set(&mut self, raw: &str) -> std::result::Result<(), String> {
                *self = raw.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
parsed_field!(usize, u64, f64, bool);

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn Field)> {
        let s = &mut self.synth;
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut self.bias;
        let d = &mut self.decode;
        vec![
            ("run.seed", &mut self.seed),
            ("run.jobs", &mut self.jobs),
            ("synth.d_feat", &mut s.d_feat),
            ("synth.dur_min", &mut s.dur_min),
            ("synth.dur_max", &mut s.dur_max),
            ("synth.noise_sigma", &mut s.noise_sigma),
            ("synth.syllables", &mut s.syllables),
            ("synth.vocab_words", &mut s.vocab_words),
            ("synth.function_words", &mut s.function_words),
            ("synth.rare_phrase_count", &mut s.rare_phrase_count),
            ("synth.rare_train_occurrences", &mut s.rare_train_occurrences),
            ("synth.distractor_phrase_count", &mut s.distractor_phrase_count),
            ("synth.min_sentence_words", &mut s.min_sentence_words),
            ("synth.max_sentence_words", &mut s.max_sentence_words),
            ("synth.n_train", &mut s.n_train),
            ("synth.n_dev", &mut s.n_dev),
            ("synth.n_general_test", &mut s.n_general_test),
            ("synth.n_bias_test", &mut s.n_bias_test),
            ("tokenizer.vocab_size", &mut s.bpe_vocab_size),
            ("tokenizer.min_pair_frequency", &mut self.min_pair_frequency),
            ("model.d_model", &mut m.d_model),
            ("model.num_encoder_layers", &mut m.num_encoder_layers),
            ("model.num_decoder_layers", &mut m.num_decoder_layers),
            ("model.num_heads", &mut m.num_heads),
            ("model.d_ff", &mut m.d_ff),
            ("model.bias_lstm_hidden", &mut m.bias_lstm_hidden),
            ("model.subsample", &mut m.subsample),
            ("train.lambda_ctc", &mut t.lambda_ctc),
            ("train.beta_bias", &mut t.beta_bias),
            ("train.learning_rate", &mut t.learning_rate),
            ("train.cba_learning_rate", &mut self.cba_learning_rate),
            ("train.batch_size", &mut t.batch_size),
            ("train.baseline_epochs", &mut self.baseline_epochs),
            ("train.cba_epochs", &mut self.cba_epochs),
            ("train.warmup_steps", &mut t.warmup_steps),
            ("train.grad_clip", &mut t.grad_clip),
            ("train.cba_bias_only", &mut t.bias_only),
            ("bias.n_phrases_max", &mut b.n_phrases_max),
            ("bias.n_order_max", &mut b.n_order_max),
            ("bias.distractor_floor", &mut b.distractor_floor),
            ("bias.top_frequency_exclusion", &mut b.top_frequency_exclusion),
            ("decode.beam_size", &mut d.beam_size),
            ("decode.lambda_ctc", &mut d.lambda_ctc),
            ("decode.bias_score", &mut d.bias_score),
            ("decode.max_len_ratio", &mut d.max_len_ratio),
            ("decode.pre_beam_ratio", &mut d.pre_beam_ratio),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if raw.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        if !raw.contains_key("run.seed") {
            return Err(Error::MissingKey("run.seed".into()));
        }
        let mut cfg = Self::with_seed(0);
        for (key, field) in cfg.fields() {
            if let Some(v) = raw.remove(key) {
                field
                    .set(&v)
                    .map_err(|e| Error::Config(format!("{key} = `{v}`: {e}")))?;
            }
        }
        if let Some(k) = raw.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut section = "";
        for (key, field) in copy.fields() {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = sec;
            }
            let _ = writeln!(out, "{key} = {}", field.show());
        }
        out
    }

    /// Applies a `CBA_SEED` value if one is given.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.train.seed = self.seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.bias.validate()?;
        self.decode.validate()?;
        if self.min_pair_frequency == 0 {
            return Err(Error::Config("tokenizer.min_pair_frequency must be >= 1".into()));
        }
        if !(self.cba_learning_rate > 0.0) {
            return Err(Error::Config("train.cba_learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Model shape for a tokenizer of `vocab_size` pieces.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_feat: self.synth.d_feat,
            ..self.model.clone()
        }
    }
}
