//! Distilled training labels: the frozen base model's per-position argmax
//! over the original corpus (teacher forcing, not free-running generation).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::min_alignment_length;
use crate::error::{Error, Result};
use crate::model::base::BaseModel;
use crate::model::{ModelConfig, Vocab};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::ParamStore;

/// One teacher-forced example: the input tokens and the teacher's argmax at
/// every position. `labels[t]` is the teacher's next-token prediction given
/// `input[..=t]`, so it never contains the blank (excluded from the argmax,
/// as everywhere a base-model token is committed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistilledExample {
    pub input: Vec<u32>,
    pub labels: Vec<u32>,
}

fn blank_masked_argmax<S: Scalar>(row: &[S], blank: u32) -> u32 {
    let mut best = 0u32;
    let mut best_v = S::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if i as u32 == blank {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}

/// Splits an over-long sequence into max_seq_len chunks with one-token
/// overlap, so every next-token transition appears in some chunk.
pub fn chunk_sequence(tokens: &[u32], max_len: usize) -> Vec<Vec<u32>> {
    assert!(max_len >= 2);
    if tokens.len() <= max_len {
        return vec![tokens.to_vec()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + max_len).min(tokens.len());
        out.push(tokens[start..end].to_vec());
        if end == tokens.len() {
            break;
        }
        start = end - 1;
    }
    out
}

/// Teacher-forces each corpus sequence through the frozen base model and
/// records per-position argmax labels. Deterministic given parameters and
/// corpus; examples keep corpus order.
pub fn make_distilled_dataset<S: Scalar>(
    corpus: &[Vec<u32>],
    config: &ModelConfig,
    params: &ParamStore<S>,
) -> Result<Vec<DistilledExample>> {
    let base = BaseModel::new(config, params);
    let vocab = Vocab::for_config(config);
    let mut out = Vec::new();
    for sequence in corpus {
        if sequence.is_empty() {
            continue;
        }
        for chunk in chunk_sequence(sequence, config.max_seq_len) {
            let mut tape = Tape::no_grad();
            let fwd = base.forward_full(&mut tape, &chunk)?;
            let logits = tape.value(fwd.logits);
            let v = config.vocab_size;
            let labels: Vec<u32> = (0..chunk.len())
                .map(|t| blank_masked_argmax(&logits[t * v..(t + 1) * v], vocab.blank))
                .collect();
            out.push(DistilledExample {
                input: chunk,
                labels,
            });
        }
    }
    Ok(out)
}

/// CTC target for one anchor: the longest run of labels starting at `t`
/// that is at most `m_max` tokens and feasible within `slots` alignment
/// positions. May be shorter near the sequence end; an empty target is
/// legal (it contributes a blank-only CTC term).
pub fn extract_anchor_targets(
    ex: &DistilledExample,
    t: usize,
    m_max: usize,
    slots: usize,
) -> Vec<u32> {
    let available = ex.labels.len().saturating_sub(t);
    let mut m = m_max.min(available);
    while m > 0 {
        let target = &ex.labels[t..t + m];
        if min_alignment_length(target) <= slots {
            return target.to_vec();
        }
        m -= 1;
    }
    Vec::new()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: u32,
    checkpoint_sha256: String,
    config: ModelConfig,
    examples: usize,
}

/// Writes the dataset: one JSON header line, then per example a u32 length
/// followed by that many input ids and that many label ids, all
/// little-endian u32.
pub fn write_dataset(
    path: &Path,
    examples: &[DistilledExample],
    config: &ModelConfig,
    checkpoint_sha256: &str,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = DatasetHeader {
        schema: 1,
        checkpoint_sha256: checkpoint_sha256.to_string(),
        config: config.clone(),
        examples: examples.len(),
    };
    let mut line = serde_json::to_string(&header)
        .map_err(|e| Error::Dataset(format!("header serialization: {e}")))?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    for ex in examples {
        file.write_all(&(ex.input.len() as u32).to_le_bytes())?;
        for &tok in ex.input.iter().chain(ex.labels.iter()) {
            file.write_all(&tok.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; returns the examples, the
/// config echoed in the header, and the teacher checkpoint hash.
pub fn read_dataset(path: &Path) -> Result<(Vec<DistilledExample>, ModelConfig, String)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: DatasetHeader = serde_json::from_str(header_line.trim())
        .map_err(|e| Error::Dataset(format!("bad dataset header: {e}")))?;
    let mut examples = Vec::with_capacity(header.examples);
    let mut len_buf = [0u8; 4];
    for _ in 0..header.examples {
        reader.read_exact(&mut len_buf)?;
        let n = u32::from_le_bytes(len_buf) as usize;
        let mut read_tokens = |count: usize| -> Result<Vec<u32>> {
            let mut buf = vec![0u8; count * 4];
            reader.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let input = read_tokens(n)?;
        let labels = read_tokens(n)?;
        examples.push(DistilledExample { input, labels });
    }
    Ok((examples, header.config, header.checkpoint_sha256))
}
