//! Flat `key = value` run configuration covering every stage.
//!
//! Keys are fixed; unknown keys are rejected. `auto` is accepted for the
//! model's length limits and the decode length, which are then resolved
//! from data.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{CorpusRequest, PseudoEncoderConfig, TemplateGrammar};
use crate::error::{Error, Result};
use crate::generator::{DecodeConfig, OutputKind, SearchMode};
use crate::model::ModelConfig;
use crate::trainer::{MaskingPolicy, Regime, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("corpus.grammar", "fsc-like"),
    ("corpus.n_train", "2000"),
    ("corpus.n_dev", "200"),
    ("corpus.n_test", "200"),
    ("corpus.d_speech", "32"),
    ("corpus.frames_min", "2"),
    ("corpus.frames_max", "4"),
    ("corpus.jitter", "0.05"),
    ("vocab.size", "512"),
    ("vocab.min_freq", "2"),
    ("model.n_layers", "2"),
    ("model.n_heads", "4"),
    ("model.d_model", "64"),
    ("model.d_ff", "256"),
    ("model.d_speech", "32"),
    ("model.max_frames", "auto"),
    ("model.max_text", "auto"),
    ("model.ln_eps", "1e-12"),
    ("model.init_std", "0.02"),
    ("model.position_sinusoid", "0"),
    ("model.dropout", "0"),
    ("train.regime", "pretrain"),
    ("train.batch_size", "16"),
    ("train.lr", "1e-4"),
    ("train.epochs", "1"),
    ("train.clip_norm", "off"),
    ("train.shuffle", "true"),
    ("mask.rate", "0.15"),
    ("mask.replace_mask", "0.8"),
    ("mask.replace_random", "0.1"),
    ("mask.keep", "0.1"),
    ("mask.unigram", "0.8"),
    ("mask.multigram", "0.2"),
    ("decode.mode", "beam"),
    ("decode.beam_size", "4"),
    ("decode.max_len", "auto"),
    ("decode.output", "slu"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn is_known(key: &str) -> bool {
        DEFAULTS.iter().any(|(k, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !Self::is_known(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = value.into();
        if value.contains('\n') || value.trim().is_empty() {
            return Err(Error::Config(format!("{key}: empty or multi-line value")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.get(key))
    }

    fn auto_or(&self, key: &str, resolved: usize) -> Result<usize> {
        match self.get(key) {
            "auto" => Ok(resolved),
            v => parse_value(key, v),
        }
    }

    /// Every key with its current value, sorted by key.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn grammar(&self) -> Result<TemplateGrammar> {
        TemplateGrammar::by_name(self.get("corpus.grammar"))
    }

    pub fn corpus_request(&self) -> Result<CorpusRequest> {
        let seed = self.seed()?;
        let encoder = PseudoEncoderConfig {
            d_speech: self.parse("corpus.d_speech")?,
            frames_per_char: (self.parse("corpus.frames_min")?, self.parse("corpus.frames_max")?),
            jitter_std: self.parse("corpus.jitter")?,
            seed,
        };
        encoder.validate()?;
        Ok(CorpusRequest {
            n_train: self.parse("corpus.n_train")?,
            n_dev: self.parse("corpus.n_dev")?,
            n_test: self.parse("corpus.n_test")?,
            encoder,
            seed,
        })
    }

    /// Model shape; `auto` length limits take the given data-derived values.
    pub fn model_config(&self, vocab_size: usize, auto_frames: usize, auto_text: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_layers: self.parse("model.n_layers")?,
            n_heads: self.parse("model.n_heads")?,
            d_model: self.parse("model.d_model")?,
            d_ff: self.parse("model.d_ff")?,
            vocab_size,
            d_speech: self.parse("model.d_speech")?,
            max_frames: self.auto_or("model.max_frames", auto_frames)?,
            max_text: self.auto_or("model.max_text", auto_text)?,
            ln_eps: self.parse("model.ln_eps")?,
            init_std: self.parse("model.init_std")?,
            position_sinusoid: self.parse("model.position_sinusoid")?,
            dropout: self.parse("model.dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn masking(&self) -> Result<MaskingPolicy> {
        let p = MaskingPolicy {
            mask_rate: self.parse("mask.rate")?,
            replace_mask_p: self.parse("mask.replace_mask")?,
            replace_random_p: self.parse("mask.replace_random")?,
            keep_original_p: self.parse("mask.keep")?,
            unigram_p: self.parse("mask.unigram")?,
            multigram_p: self.parse("mask.multigram")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn regime(&self) -> Result<Regime> {
        self.get("train.regime").parse()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let regime = self.regime()?;
        let clip_norm = match self.get("train.clip_norm") {
            "off" => None,
            v => Some(parse_value("train.clip_norm", v)?),
        };
        let mut c = TrainConfig::new(regime);
        c.batch_size = self.parse("train.batch_size")?;
        c.lr = self.parse("train.lr")?;
        c.epochs = self.parse("train.epochs")?;
        c.seed = self.seed()?;
        c.clip_norm = clip_norm;
        c.shuffle = self.parse("train.shuffle")?;
        c.validate()?;
        Ok(c)
    }

    pub fn decode_config(&self, max_text: usize) -> Result<DecodeConfig> {
        let mode: SearchMode = self.get("decode.mode").parse()?;
        let output: OutputKind = self.get("decode.output").parse()?;
        let c = DecodeConfig {
            mode,
            beam_size: self.parse("decode.beam_size")?,
            max_len: self.auto_or("decode.max_len", max_text)?,
            output,
        };
        c.validate(max_text)?;
        Ok(c)
    }
}
