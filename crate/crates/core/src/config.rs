//! Flat `key = value` configuration with `#` comments. Every CLI flag
//! mirrors a key here; command-line values override file values.

use std::path::Path;

use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LossMode, TrainConfig};

/// Full application configuration: model structure, training schedule,
/// decoding knobs, and bench behavior.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Bench sessions run concurrently when > 1 (timings then marked
    /// non-comparable).
    pub parallel: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            parallel: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigFile(format!("bad value {value:?} for key {key}")))
}

impl AppConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors so
    /// typos fail loudly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_model" => self.model.d_model = parse(key, value)?,
            "n_layers" => self.model.n_layers = parse(key, value)?,
            "n_heads" => self.model.n_heads = parse(key, value)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, value)?,
            "slots" => self.model.slots = parse(key, value)?,
            "m_max" => self.model.m_max = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "base_lr" => self.train.base_lr = parse(key, value)?,
            "clip_threshold" => self.train.clip_threshold = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "anchor_stride" => self.train.anchor_stride = parse(key, value)?,
            "seed" => {
                let seed: u64 = parse(key, value)?;
                self.train.seed = seed;
                self.decode.seed = seed;
            }
            "loss" => {
                self.train.loss_mode = match value {
                    "ctc" => LossMode::Ctc,
                    "ce" => LossMode::CrossEntropy,
                    _ => {
                        return Err(Error::ConfigFile(format!(
                            "loss must be ctc or ce, got {value:?}"
                        )))
                    }
                }
            }
            "mode" => {
                self.decode.mode = match value {
                    "greedy" => DecodeMode::Greedy,
                    "sample" => DecodeMode::Sample,
                    _ => {
                        return Err(Error::ConfigFile(format!(
                            "mode must be greedy or sample, got {value:?}"
                        )))
                    }
                }
            }
            "k" => self.decode.k = parse(key, value)?,
            "beam" => self.decode.beam = parse(key, value)?,
            "temperature" => self.decode.temperature = parse(key, value)?,
            "max_new_tokens" => self.decode.max_new_tokens = parse(key, value)?,
            "collapse" => {
                self.decode.collapse = match value {
                    "on" => true,
                    "off" => false,
                    _ => {
                        return Err(Error::ConfigFile(format!(
                            "collapse must be on or off, got {value:?}"
                        )))
                    }
                }
            }
            "parallel" => self.parallel = parse(key, value)?,
            _ => return Err(Error::ConfigFile(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigFile(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut config = AppConfig::default();
        config.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(config)
    }

    /// Summary echoed into bench reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "lr": self.train.lr,
            "base_lr": self.train.base_lr,
            "clip_threshold": self.train.clip_threshold,
            "epochs": self.train.epochs,
            "batch_size": self.train.batch_size,
            "anchor_stride": self.train.anchor_stride,
            "loss": match self.train.loss_mode { LossMode::Ctc => "ctc", LossMode::CrossEntropy => "ce" },
            "seed": self.decode.seed,
            "k": self.decode.k,
            "beam": self.decode.beam,
            "mode": match self.decode.mode { DecodeMode::Greedy => "greedy", DecodeMode::Sample => "sample" },
            "temperature": self.decode.temperature,
            "collapse": if self.decode.collapse { "on" } else { "off" },
            "max_new_tokens": self.decode.max_new_tokens,
            "parallel": self.parallel,
        })
    }
}
