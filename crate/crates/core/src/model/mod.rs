//! Model configuration, vocabulary, the base transformer, the attention
//! draft module, and checkpoint serialization.

pub mod base;
pub mod checkpoint;
pub mod draft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural hyperparameters shared by the base model and draft module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token vocabulary including specials (BOS, EOS, blank).
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Parallel draft positions per anchor (the CTC alignment length L).
    pub slots: usize,
    /// Longest collapsed target extracted per anchor during training.
    pub m_max: usize,
}

impl ModelConfig {
    /// Desk-scale defaults. The setting used at full scale keeps a context of
    /// 2048; that stays a documented config value, not the default.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: Vocab::byte_level().size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            slots: 5,
            m_max: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.m_max == 0 {
            return Err(Error::InvalidConfig("m_max must be at least 1".into()));
        }
        // An m_max-token target of one repeated token needs 2·m_max−1 slots.
        if 2 * self.m_max - 1 > self.slots {
            return Err(Error::InvalidConfig(format!(
                "m_max {} needs at least {} slots, config has {}",
                self.m_max,
                2 * self.m_max - 1,
                self.slots
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab too small".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::InvalidConfig("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token id space. Byte-level by default: ids 0..=255 are raw bytes, then
/// BOS, EOS and the CTC blank. The blank may appear in raw draft alignments
/// but never in committed output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub bos: u32,
    pub eos: u32,
    pub blank: u32,
}

impl Vocab {
    pub fn byte_level() -> Self {
        Vocab {
            size: 259,
            bos: 256,
            eos: 257,
            blank: 258,
        }
    }

    /// Tiny synthetic vocabulary for sampling-equivalence tests; the last
    /// three ids serve as BOS/EOS/blank.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 4);
        Vocab {
            size,
            bos: size as u32 - 3,
            eos: size as u32 - 2,
            blank: size as u32 - 1,
        }
    }

    pub fn for_config(config: &ModelConfig) -> Self {
        if config.vocab_size == 259 {
            Vocab::byte_level()
        } else {
            Vocab::synthetic(config.vocab_size)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Decodes byte tokens, skipping specials.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        assert!(ModelConfig::desk_default().validate().is_ok());
    }

    #[test]
    fn m_max_slot_bound_enforced() {
        let mut cfg = ModelConfig::desk_default();
        cfg.slots = 4; // m_max 3 needs 5
        assert!(cfg.validate().is_err());
        cfg.m_max = 2;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn byte_vocab_is_dense_259() {
        let v = Vocab::byte_level();
        assert_eq!(v.size, 259);
        assert_eq!(v.bos, 256);
        assert_eq!(v.eos, 257);
        assert_eq!(v.blank, 258);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocab::byte_level();
        let toks = v.encode("hello, world");
        assert_eq!(v.decode(&toks), "hello, world");
        // specials are skipped on decode
        let mut with_specials = vec![v.bos];
        with_specials.extend(&toks);
        with_specials.push(v.eos);
        assert_eq!(v.decode(&with_specials), "hello, world");
    }
}
