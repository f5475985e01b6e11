//! Checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "CTCD" | version u32 = 1 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | dtype u8 (0=f32, 1=f64)
//!             | rank u8 | dims u32 × rank | raw row-major data
//! JSON footer (ModelConfig) | footer byte offset as trailing u64
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"CTCD";
const VERSION: u32 = 1;

/// Writes `store` (optionally only names under `prefix`) and the config.
/// Round-trips bit-exactly.
pub fn save_checkpoint<S: Scalar>(
    store: &ParamStore<S>,
    config: &ModelConfig,
    path: &Path,
    prefix: Option<&str>,
) -> Result<()> {
    let selected: Vec<(&String, &Tensor<S>)> = store
        .iter()
        .filter(|(name, _)| prefix.map_or(true, |p| name.starts_with(p)))
        .collect();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(selected.len() as u32).to_le_bytes());
    for (name, tensor) in &selected {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(S::DTYPE);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let footer_offset = buf.len() as u64;
    let footer = serde_json::to_vec(config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&footer);
    buf.extend_from_slice(&footer_offset.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a checkpoint written by [`save_checkpoint`] with matching scalar
/// width. Errors name the problem: wrong magic, wrong version, dtype
/// mismatch, or truncation.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, ModelConfig)> {
    let buf = fs::read(path)?;
    if buf.len() < 20 {
        return Err(Error::Checkpoint(format!(
            "truncated checkpoint: {} bytes",
            buf.len()
        )));
    }
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"CTCD\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }

    let footer_offset =
        u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap()) as usize;
    if footer_offset >= buf.len() - 8 {
        return Err(Error::Checkpoint("corrupt footer offset".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&buf[footer_offset..buf.len() - 8])
        .map_err(|e| Error::Checkpoint(format!("bad config footer: {e}")))?;

    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        let dtype = r.u8()?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype tag {dtype}, expected {}",
                S::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * S::BYTE_WIDTH)?;
        let data: Vec<S> = raw
            .chunks_exact(S::BYTE_WIDTH)
            .map(|c| S::read_le(c))
            .collect();
        store.insert(name, Tensor::new(shape, data));
    }
    Ok((store, config))
}

/// Checks loaded tensors against the shapes `expected` config implies,
/// reporting the first offender.
pub fn validate_shapes<S: Scalar>(
    store: &ParamStore<S>,
    reference: &ParamStore<S>,
) -> Result<()> {
    for (name, tensor) in store.iter() {
        if let Some(expected) = reference.get(name) {
            if expected.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint has {:?}, config implies {:?}",
                    tensor.shape(),
                    expected.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Freshly initialized store whose shapes encode what `config` implies;
/// the reference side of [`validate_shapes`].
pub fn reference_store<S: Scalar>(config: &ModelConfig, with_draft: bool) -> ParamStore<S> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    crate::model::base::init_base_params(config, &mut rng, &mut store);
    if with_draft {
        crate::model::draft::init_draft_params(config, &mut rng, &mut store);
    }
    store
}

/// SHA-256 of a checkpoint file, hex-encoded; recorded in bench reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::base::init_base_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_and_config(seed: u64, d_model: usize) -> (ParamStore<f32>, ModelConfig) {
        let mut config = ModelConfig::desk_default();
        config.d_model = d_model;
        config.n_heads = 2;
        config.n_layers = 1;
        config.vocab_size = 16;
        config.max_seq_len = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_base_params(&config, &mut rng, &mut store);
        (store, config)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (store, config) = store_and_config(1, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &config, &path, None).unwrap();
        let (loaded, loaded_config) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded.len(), store.len());
        for (name, tensor) in store.iter() {
            let other = loaded.expect(name);
            assert_eq!(other.shape(), tensor.shape());
            assert_eq!(other.data(), tensor.data(), "mismatch in {name}");
        }
        // insertion order preserved
        let a: Vec<_> = store.names().collect();
        let b: Vec<_> = loaded.names().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_magic_names_expected_value() {
        let (store, config) = store_and_config(2, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &config, &path, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("CTCD"), "{err}");
    }

    #[test]
    fn truncated_file_errors() {
        let (store, config) = store_and_config(3, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &config, &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn shape_mismatch_names_first_offending_tensor() {
        let (store_a, _) = store_and_config(4, 8);
        let (store_b, _) = store_and_config(5, 16);
        let err = validate_shapes(&store_a, &store_b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("base.tok_emb"), "{msg}");
        assert!(msg.contains("[16, 8]") && msg.contains("[16, 16]"), "{msg}");
    }

    #[test]
    fn prefix_filter_saves_subset() {
        let (mut store, config) = store_and_config(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        crate::model::draft::init_draft_params(&config, &mut rng, &mut store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draft.ckpt");
        save_checkpoint(&store, &config, &path, Some("draft.")).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        assert!(loaded.len() > 0);
        assert!(loaded.names().all(|n| n.starts_with("draft.")));
    }

    #[test]
    fn sha256_is_stable() {
        let (store, config) = store_and_config(8, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &config, &path, None).unwrap();
        let h1 = file_sha256(&path).unwrap();
        let h2 = file_sha256(&path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }
}
