//! Training loops: next-token cross-entropy for the base model, per-anchor
//! CTC (or the per-slot cross-entropy ablation) for the draft module.
//!
//! The base stays frozen during draft training by clearing `requires_grad`
//! on every `base.*` tensor, which also keeps the backward pass off the
//! base graph entirely. The shared LM head lives under `base.lm_head`, so
//! freezing the base freezes it too.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::ctc_log_prob_grouped;
use crate::distill::{chunk_sequence, extract_anchor_targets, DistilledExample};
use crate::error::{Error, Result};
use crate::model::base::{init_base_params, BaseModel};
use crate::model::draft::{init_draft_params, DraftModule};
use crate::model::{ModelConfig, Vocab};
use crate::optim::{adam_step, clip_gradients, AdamState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ctc,
    CrossEntropy,
}

/// Optimizer and schedule settings. `lr` is the draft-module rate (the
/// published setting); `base_lr` drives the from-scratch base training this
/// artifact needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub base_lr: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Anchor subsampling stride; 1 anchors every position.
    pub anchor_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            base_lr: 3e-4,
            clip_threshold: 0.5,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            loss_mode: LossMode::Ctc,
            anchor_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.clip_threshold <= 0.0 {
            return Err(Error::InvalidConfig("clip threshold must be positive".into()));
        }
        if self.batch_size == 0 || self.anchor_stride == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and anchor_stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of a training run; `aborted_at` is set when a non-finite loss cut
/// the run short, in which case `params` is the last epoch-end checkpoint.
pub struct TrainResult<S: Scalar> {
    pub params: ParamStore<S>,
    pub completed_epochs: usize,
    pub final_loss: f64,
    pub aborted_at: Option<usize>,
}

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

fn log_step(
    log: &mut Option<&mut dyn Write>,
    step: usize,
    loss: f64,
    grad_norm: f64,
    lr: f64,
) {
    if let Some(w) = log {
        let line = serde_json::json!({
            "step": step,
            "loss": loss,
            "grad_norm": grad_norm,
            "lr": lr,
        });
        let _ = writeln!(w, "{line}");
    }
}

/// Trains the base model from scratch with next-token cross-entropy.
/// Deterministic given the seed; `epochs = 0` returns the initialization.
pub fn train_base<S: Scalar>(
    corpus: &[u32],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult<S>> {
    model_config.validate()?;
    config.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Dataset("corpus too small to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    init_base_params(model_config, &mut rng, &mut params);

    let chunks = chunk_sequence(corpus, model_config.max_seq_len);
    let mut adam = AdamState::new();
    let mut step = 0usize;
    let mut last_good = params.clone();
    let mut final_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = {
                let mut tape = Tape::new();
                let base = BaseModel::new(model_config, &params);
                let mut total: Option<crate::tape::Var> = None;
                let mut n_labels = 0usize;
                for &ci in batch {
                    let chunk = &chunks[ci];
                    if chunk.len() < 2 {
                        continue;
                    }
                    let inputs = &chunk[..chunk.len() - 1];
                    let labels = &chunk[1..];
                    let out = base.forward_full(&mut tape, inputs)?;
                    let logp = tape.log_softmax(out.logits);
                    let v = model_config.vocab_size;
                    let ids: Vec<usize> = labels
                        .iter()
                        .enumerate()
                        .map(|(row, &l)| row * v + l as usize)
                        .collect();
                    let picked = tape.gather(logp, &ids);
                    let s = tape.sum(picked);
                    n_labels += labels.len();
                    total = Some(match total {
                        Some(t) => tape.add(t, s)?,
                        None => s,
                    });
                }
                let Some(total) = total else { continue };
                let scaled = tape.scale(total, S::from_f64(-1.0 / n_labels as f64));
                let loss = tape.value(scaled)[0].as_f64();
                let grads = tape.backward(scaled)?;
                (loss, grads)
            };
            if !loss.is_finite() {
                log::error!("non-finite base loss at step {step}; aborting");
                return Ok(TrainResult {
                    params: last_good,
                    completed_epochs: epoch,
                    final_loss,
                    aborted_at: Some(step),
                });
            }
            grads.apply(&mut params);
            let grad_norm = clip_gradients(&mut params, config.clip_threshold);
            adam_step(&mut params, &mut adam, config.base_lr, ADAM_BETAS, ADAM_EPS);
            log_step(&mut log, step, loss, grad_norm, config.base_lr);
            final_loss = loss;
            step += 1;
        }
        last_good = params.clone();
    }
    Ok(TrainResult {
        params,
        completed_epochs: config.epochs,
        final_loss,
        aborted_at: None,
    })
}

/// Mean next-token cross-entropy of `params` over a token stream; the
/// memorization yardstick.
pub fn eval_base_ce<S: Scalar>(
    corpus: &[u32],
    model_config: &ModelConfig,
    params: &ParamStore<S>,
) -> Result<f64> {
    let base = BaseModel::new(model_config, params);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in chunk_sequence(corpus, model_config.max_seq_len) {
        if chunk.len() < 2 {
            continue;
        }
        let mut tape = Tape::no_grad();
        let out = base.forward_full(&mut tape, &chunk[..chunk.len() - 1])?;
        let logp = tape.log_softmax(out.logits);
        let v = model_config.vocab_size;
        let values = tape.value(logp);
        for (row, &label) in chunk[1..].iter().enumerate() {
            total -= values[row * v + label as usize].as_f64();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Trains the draft module on a distilled dataset with the base frozen.
///
/// CTC mode: per-anchor sequence loss −(1/A)·Σ log p(target | slots) via the
/// differentiable DP, anchors grouped by target length. Cross-entropy mode
/// (the linear-head ablation's objective): per-slot log-loss against the
/// positional labels, padded with the blank past the target.
pub fn train_draft<S: Scalar>(
    dataset: &[DistilledExample],
    mut params: ParamStore<S>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult<S>> {
    model_config.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty distilled dataset".into()));
    }
    let vocab = Vocab::for_config(model_config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    if params.get("draft.slot_emb").is_none() {
        init_draft_params(model_config, &mut rng, &mut params);
    }

    // Freeze the base (including the shared LM head): no gradients flow.
    let base_names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("base."))
        .cloned()
        .collect();
    for name in &base_names {
        params.get_mut(name).unwrap().set_requires_grad(false);
    }

    let mut adam = AdamState::new();
    let mut step = 0usize;
    let mut last_good = params.clone();
    let mut final_loss = f64::NAN;
    let mut aborted_at = None;
    let mut completed = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = {
                let mut tape = Tape::new();
                let base = BaseModel::new(model_config, &params);
                let draft = DraftModule::new(model_config, &params);
                let mut total: Option<crate::tape::Var> = None;
                let mut n_anchors = 0usize;
                for &ei in batch {
                    let ex = &dataset[ei];
                    if ex.input.is_empty() {
                        continue;
                    }
                    let fwd = base.forward_full(&mut tape, &ex.input)?;
                    let anchors: Vec<usize> =
                        (0..ex.input.len()).step_by(config.anchor_stride).collect();
                    let Some(grid) = draft.forward(&mut tape, fwd.hidden, &anchors)? else {
                        continue;
                    };
                    let term = match config.loss_mode {
                        LossMode::Ctc => ctc_example_loss(
                            &mut tape,
                            grid,
                            ex,
                            &anchors,
                            model_config,
                            vocab.blank,
                        )?,
                        LossMode::CrossEntropy => ce_example_loss(
                            &mut tape,
                            grid,
                            ex,
                            &anchors,
                            model_config,
                            vocab.blank,
                        )?,
                    };
                    n_anchors += anchors.len();
                    total = Some(match total {
                        Some(t) => tape.add(t, term)?,
                        None => term,
                    });
                }
                let Some(total) = total else { continue };
                let scaled = tape.scale(total, S::from_f64(-1.0 / n_anchors as f64));
                let loss = tape.value(scaled)[0].as_f64();
                let grads = tape.backward(scaled)?;
                (loss, grads)
            };
            if !loss.is_finite() {
                log::error!("non-finite draft loss at step {step}; aborting");
                aborted_at = Some(step);
                completed = epoch;
                params = last_good.clone();
                break 'epochs;
            }
            grads.apply(&mut params);
            let grad_norm = clip_gradients(&mut params, config.clip_threshold);
            adam_step(&mut params, &mut adam, config.lr, ADAM_BETAS, ADAM_EPS);
            log_step(&mut log, step, loss, grad_norm, config.lr);
            final_loss = loss;
            step += 1;
        }
        last_good = params.clone();
        completed = epoch + 1;
    }

    for name in &base_names {
        params.get_mut(name).unwrap().set_requires_grad(true);
    }
    Ok(TrainResult {
        params,
        completed_epochs: completed,
        final_loss,
        aborted_at,
    })
}

/// Sum over this example's anchors of CTC log-probability (to be negated by
/// the caller). Anchors are grouped by target length so each group runs one
/// batched DP.
fn ctc_example_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    grid: crate::tape::Var,
    ex: &DistilledExample,
    anchors: &[usize],
    config: &ModelConfig,
    blank: u32,
) -> Result<crate::tape::Var> {
    let mut groups: BTreeMap<usize, Vec<(usize, Vec<u32>)>> = BTreeMap::new();
    for (ai, &t) in anchors.iter().enumerate() {
        let target = extract_anchor_targets(ex, t, config.m_max, config.slots);
        groups.entry(target.len()).or_default().push((ai, target));
    }
    let mut total: Option<crate::tape::Var> = None;
    for (_, group) in groups {
        let batch: Vec<(usize, &[u32])> =
            group.iter().map(|(ai, tg)| (*ai, tg.as_slice())).collect();
        let lp = ctc_log_prob_grouped(
            tape,
            grid,
            config.slots,
            config.vocab_size,
            &batch,
            blank,
        )?;
        let s = tape.sum(lp);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one anchor group"))
}

/// Sum over anchors of mean per-slot log-likelihood (to be negated by the
/// caller), the token-level objective: slot i learns the i-th label after
/// the anchor, blank past the target end.
fn ce_example_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    grid: crate::tape::Var,
    ex: &DistilledExample,
    anchors: &[usize],
    config: &ModelConfig,
    blank: u32,
) -> Result<crate::tape::Var> {
    let v = config.vocab_size;
    let l = config.slots;
    let mut ids = Vec::with_capacity(anchors.len() * l);
    for (ai, &t) in anchors.iter().enumerate() {
        let target = extract_anchor_targets(ex, t, config.m_max, config.slots);
        for slot in 0..l {
            let label = target.get(slot).copied().unwrap_or(blank);
            ids.push((ai * l + slot) * v + label as usize);
        }
    }
    let picked = tape.gather(grid, &ids);
    let total = tape.sum(picked);
    // normalize per anchor (mean over slots)
    Ok(tape.scale(total, S::from_f64(1.0 / l as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::make_distilled_dataset;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 24,
            slots: 5,
            m_max: 3,
        }
    }

    fn repetitive_corpus(len: usize) -> Vec<u32> {
        let pattern = [1u32, 2, 3, 4, 5, 6, 7, 8];
        (0..len).map(|i| pattern[i % pattern.len()]).collect()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let config = tiny_config();
        let train = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let result = train_base::<f32>(&repetitive_corpus(64), &config, &train, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut fresh = ParamStore::<f32>::new();
        init_base_params(&config, &mut rng, &mut fresh);
        for (name, t) in fresh.iter() {
            assert_eq!(t.data(), result.params.expect(name).data(), "{name}");
        }
    }

    #[test]
    fn base_training_is_seed_deterministic() {
        let config = tiny_config();
        let train = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let corpus = repetitive_corpus(96);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = train_base::<f32>(&corpus, &config, &train, Some(&mut log_a)).unwrap();
        let b = train_base::<f32>(&corpus, &config, &train, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b, "loss curves must match bit-for-bit");
        assert_eq!(a.final_loss, b.final_loss);
    }

    #[test]
    fn base_memorizes_a_repetitive_corpus() {
        let config = tiny_config();
        let train = TrainConfig {
            epochs: 60,
            batch_size: 4,
            base_lr: 1e-2,
            clip_threshold: 1.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let corpus = repetitive_corpus(256);
        let result = train_base::<f32>(&corpus, &config, &train, None).unwrap();
        let ce = eval_base_ce(&corpus, &config, &result.params).unwrap();
        assert!(ce < 0.1, "memorization CE was {ce}");
    }

    #[test]
    fn draft_training_freezes_base_and_moves_draft() {
        let config = tiny_config();
        let train = TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let corpus = repetitive_corpus(96);
        let base_result = train_base::<f32>(
            &corpus,
            &config,
            &TrainConfig {
                epochs: 2,
                ..train.clone()
            },
            None,
        )
        .unwrap();
        let dataset =
            make_distilled_dataset(&[corpus.clone()], &config, &base_result.params).unwrap();

        let base_before: Vec<(String, Vec<f32>)> = base_result
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("base."))
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();

        let result =
            train_draft(&dataset, base_result.params.clone(), &config, &train, None).unwrap();

        for (name, data) in &base_before {
            assert_eq!(
                result.params.expect(name).data(),
                data.as_slice(),
                "frozen base tensor {name} changed"
            );
        }
        // at least one draft tensor moved
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
        let mut fresh = ParamStore::<f32>::new();
        init_draft_params(&config, &mut rng, &mut fresh);
        let moved = fresh
            .iter()
            .any(|(n, t)| result.params.expect(n).data() != t.data());
        assert!(moved, "draft parameters did not move");
        assert!(result.final_loss.is_finite());
    }

    #[test]
    fn ctc_loss_decreases_on_memorized_corpus() {
        let config = tiny_config();
        let corpus = repetitive_corpus(96);
        let base = train_base::<f32>(
            &corpus,
            &config,
            &TrainConfig {
                epochs: 30,
                batch_size: 4,
                base_lr: 1e-2,
                clip_threshold: 1.0,
                seed: 3,
                ..TrainConfig::default()
            },
            None,
        )
        .unwrap();
        let dataset = make_distilled_dataset(&[corpus], &config, &base.params).unwrap();
        let mut log = Vec::new();
        let result = train_draft(
            &dataset,
            base.params,
            &config,
            &TrainConfig {
                epochs: 12,
                batch_size: 4,
                lr: 3e-3,
                seed: 3,
                ..TrainConfig::default()
            },
            Some(&mut log),
        )
        .unwrap();
        let lines: Vec<f64> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
            .collect();
        assert!(lines.len() >= 4);
        let first = lines[..2].iter().sum::<f64>() / 2.0;
        let last = lines[lines.len() - 2..].iter().sum::<f64>() / 2.0;
        assert!(
            last < first,
            "loss should fall on a memorized corpus: {first} -> {last}"
        );
        assert!(result.final_loss >= 0.0, "CTC loss is a negative log-prob");
    }

    #[test]
    fn ce_mode_runs_end_to_end() {
        let config = tiny_config();
        let corpus = repetitive_corpus(96);
        let base = train_base::<f32>(
            &corpus,
            &config,
            &TrainConfig {
                epochs: 2,
                seed: 4,
                ..TrainConfig::default()
            },
            None,
        )
        .unwrap();
        let dataset = make_distilled_dataset(&[corpus], &config, &base.params).unwrap();
        let result = train_draft(
            &dataset,
            base.params,
            &config,
            &TrainConfig {
                epochs: 1,
                loss_mode: LossMode::CrossEntropy,
                lr: 1e-3,
                seed: 4,
                ..TrainConfig::default()
            },
            None,
        )
        .unwrap();
        assert!(result.final_loss.is_finite());
        assert!(result.aborted_at.is_none());
    }
}
