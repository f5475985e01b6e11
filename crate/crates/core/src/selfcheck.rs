//! Oracle suites runnable on demand: CTC dynamic program vs brute-force
//! enumeration, CTC gradients vs finite differences, collapsed-prefix
//! marginals vs enumeration, tree-mask equivalence vs sequential
//! recomputation, and greedy losslessness. The `selfcheck` CLI subcommand
//! and the acceptance suite both drive these.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{
    brute_force_log_prob, collapsed_prefix_marginals, ctc_log_prob, ctc_log_prob_value,
    min_alignment_length,
};
use crate::decode::{generate, DecodeConfig, Engine};
use crate::distill::make_distilled_dataset;
use crate::model::base::{BaseModel, KvCache, Mask};
use crate::model::ModelConfig;
use crate::pipeline::{build_trie, CandidatePath};
use crate::tape::Tape;
use crate::tensor::{ParamStore, Tensor};
use crate::train::{train_draft, TrainConfig};

/// One suite's verdict.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}: {} ({}, {:.2}s)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn random_rows(slots: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows = Vec::with_capacity(slots * vocab);
    for _ in 0..slots {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        rows.extend(logits.iter().map(|l| l - lse));
    }
    rows
}

fn random_target(vocab: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen_range(0..vocab as u32 - 1)).collect()
}

/// DP vs enumeration over ≥`instances` random (L ≤ 5, V ≤ 5) cases at
/// 64-bit; passes when every |Δ| < 1e-6.
pub fn check_ctc_oracle(instances: usize, seed: u64) -> CheckOutcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_delta = 0.0f64;
    let mut done = 0;
    while done < instances {
        let slots = rng.gen_range(1..=5);
        let vocab = rng.gen_range(2..=5);
        let blank = vocab as u32 - 1;
        let rows = random_rows(slots, vocab, &mut rng);
        let target = random_target(vocab, 3.min(slots), &mut rng);
        if min_alignment_length(&target) > slots {
            continue;
        }
        let dp = ctc_log_prob_value(&rows, vocab, &target, blank).unwrap();
        let bf = brute_force_log_prob(&rows, vocab, &target, blank).unwrap();
        max_delta = max_delta.max((dp - bf).abs());
        done += 1;
    }
    CheckOutcome {
        name: "ctc-oracle-equivalence",
        passed: max_delta < 1e-6,
        detail: format!("{done} instances, max |Δ| = {max_delta:.2e}"),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// CTC gradient vs central finite differences on the slot log-probs,
/// 64-bit; passes when every relative error < 1e-4.
pub fn check_ctc_gradients(instances: usize, seed: u64) -> CheckOutcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut max_rel = 0.0f64;
    let mut done = 0;
    while done < instances {
        let slots = rng.gen_range(2..=5);
        let vocab = rng.gen_range(3..=5);
        let blank = vocab as u32 - 1;
        let rows = random_rows(slots, vocab, &mut rng);
        let target = random_target(vocab, 2, &mut rng);
        if target.is_empty() || min_alignment_length(&target) > slots {
            continue;
        }
        let mut store = ParamStore::new();
        store.insert("grid", Tensor::new(vec![slots, vocab], rows.clone()));
        let grads = {
            let mut tape = Tape::new();
            let grid = tape.param("grid", store.expect("grid"));
            let lp = ctc_log_prob(&mut tape, grid, &target, blank).unwrap();
            tape.backward(lp).unwrap()
        };
        grads.apply(&mut store);
        let analytic = store.expect("grid").grad().unwrap().to_vec();
        for idx in 0..rows.len() {
            let mut up = rows.clone();
            up[idx] += h;
            let mut down = rows.clone();
            down[idx] -= h;
            let fd = (ctc_log_prob_value(&up, vocab, &target, blank).unwrap()
                - ctc_log_prob_value(&down, vocab, &target, blank).unwrap())
                / (2.0 * h);
            let denom = analytic[idx].abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max((analytic[idx] - fd).abs() / denom);
        }
        done += 1;
    }
    CheckOutcome {
        name: "ctc-gradient-check",
        passed: max_rel < 1e-4,
        detail: format!("{done} instances, max rel err = {max_rel:.2e}"),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn enumerate_conditional(
    rows: &[f64],
    vocab: usize,
    prefix: &[u32],
    blank: u32,
) -> Option<(Vec<f64>, f64)> {
    let slots = rows.len() / vocab;
    let mut next = vec![0.0f64; vocab];
    let mut end = 0.0;
    let mut total = 0.0;
    let mut alignment = vec![0u32; slots];
    'outer: loop {
        let (collapsed, _) = crate::ctc::collapse(&alignment, blank);
        if collapsed.starts_with(prefix) {
            let p: f64 = alignment
                .iter()
                .enumerate()
                .map(|(t, &a)| rows[t * vocab + a as usize])
                .sum::<f64>()
                .exp();
            total += p;
            if collapsed.len() == prefix.len() {
                end += p;
            } else {
                next[collapsed[prefix.len()] as usize] += p;
            }
        }
        let mut i = 0;
        loop {
            if i == slots {
                break 'outer;
            }
            alignment[i] += 1;
            if (alignment[i] as usize) < vocab {
                break;
            }
            alignment[i] = 0;
            i += 1;
        }
    }
    if total < 1e-300 {
        return None;
    }
    for v in next.iter_mut() {
        *v /= total;
    }
    Some((next, end / total))
}

/// Collapsed-prefix marginals vs enumeration; |Δ| < 1e-8 per entry and the
/// distribution plus end mass within 1e-6 of 1.
pub fn check_marginals(instances: usize, seed: u64) -> CheckOutcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_delta = 0.0f64;
    let mut max_mass_err = 0.0f64;
    let mut done = 0;
    while done < instances {
        let slots = rng.gen_range(1..=5);
        let vocab = rng.gen_range(2..=5);
        let blank = vocab as u32 - 1;
        let rows = random_rows(slots, vocab, &mut rng);
        let prefix = random_target(vocab, 2.min(slots), &mut rng);
        let Some((e_next, e_end)) = enumerate_conditional(&rows, vocab, &prefix, blank) else {
            continue;
        };
        let Ok((next, end)) = collapsed_prefix_marginals(&rows, vocab, &prefix, blank) else {
            continue;
        };
        for c in 0..vocab {
            max_delta = max_delta.max((next[c] - e_next[c]).abs());
        }
        max_delta = max_delta.max((end - e_end).abs());
        let mass: f64 = next.iter().sum::<f64>() + end;
        max_mass_err = max_mass_err.max((mass - 1.0).abs());
        done += 1;
    }
    CheckOutcome {
        name: "collapsed-marginal-oracle",
        passed: max_delta < 1e-8 && max_mass_err < 1e-6,
        detail: format!("{done} instances, max |Δ| = {max_delta:.2e}, mass err = {max_mass_err:.2e}"),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Tree-mask equivalence: per-node logits from one masked batch pass vs a
/// fresh sequential forward over context + that node's root path, within
/// 1e-4 at 32-bit, on random tries of up to 20 nodes.
pub fn check_tree_mask_equivalence(tries: usize, seed: u64) -> CheckOutcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        vocab_size: 23,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 48,
        slots: 4,
        m_max: 2,
    };
    let mut max_delta = 0.0f64;
    for trial in 0..tries {
        let engine = Engine::<f32>::random(config.clone(), seed ^ (trial as u64), false).unwrap();
        let base = BaseModel::new(&config, &engine.params);

        let context_len = rng.gen_range(3..10);
        let context: Vec<u32> = (0..context_len)
            .map(|_| rng.gen_range(0..config.vocab_size as u32))
            .collect();

        // Random candidate strings, deduped, trie capped at 20 nodes.
        let n_cands = rng.gen_range(1..=5);
        let mut seen = std::collections::HashSet::new();
        let mut cands = Vec::new();
        for _ in 0..n_cands {
            let len = rng.gen_range(1..=4);
            let tokens: Vec<u32> = (0..len)
                .map(|_| rng.gen_range(0..config.vocab_size as u32))
                .collect();
            if seen.insert(tokens.clone()) {
                cands.push(CandidatePath {
                    raw: tokens.clone(),
                    score: -(cands.len() as f64),
                    collapsed: tokens,
                    keep_indices: vec![],
                });
            }
        }
        let trie = build_trie(&cands, context.len());
        assert!(trie.nodes.len() <= 20);

        // Cache the context, then one masked batch pass over the trie.
        let mut cache = KvCache::new(&config);
        {
            let mut tape = Tape::no_grad();
            let out = base.forward_full(&mut tape, &context).unwrap();
            let (k, v) = crate::model::base::extract_kv(&tape, &out);
            drop(tape);
            cache.append(&k, &v);
        }
        let mask = trie.additive_mask::<f32>();
        let tokens = trie.tokens();
        let positions = trie.positions();
        let mut tape = Tape::no_grad();
        let out = base
            .forward(&mut tape, &tokens, &positions, Some(&cache), Mask::Explicit(&mask))
            .unwrap();
        let batch_logits = tape.value(out.logits).to_vec();
        drop(tape);

        let v = config.vocab_size;
        for node in 0..trie.nodes.len() {
            let mut sequence = context.clone();
            for &p in &trie.path_to(node) {
                sequence.push(trie.nodes[p].token);
            }
            let mut tape = Tape::no_grad();
            let fresh = base.forward_full(&mut tape, &sequence).unwrap();
            let flogits = tape.value(fresh.logits);
            let fresh_last = &flogits[flogits.len() - v..];
            let batch_row = &batch_logits[node * v..(node + 1) * v];
            for (a, b) in fresh_last.iter().zip(batch_row) {
                max_delta = max_delta.max((a - b).abs() as f64);
            }
        }
    }
    CheckOutcome {
        name: "tree-mask-equivalence",
        passed: max_delta < 1e-4,
        detail: format!("{tries} tries, max |Δ| = {max_delta:.2e}"),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Greedy losslessness across draft-module variants: trained, random-init,
/// and adversarially perturbed. Speculative greedy output must equal
/// vanilla greedy output token-for-token on every prompt.
pub fn check_greedy_losslessness(prompts: usize, seed: u64) -> CheckOutcome {
    let t0 = Instant::now();
    let config = ModelConfig {
        vocab_size: 259,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 96,
        slots: 5,
        m_max: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // A lightly-trained engine over a small corpus.
    let corpus: Vec<u32> = "the quick brown fox jumps over the lazy dog. "
        .repeat(20)
        .bytes()
        .map(u32::from)
        .collect();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        base_lr: 3e-3,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let base = crate::train::train_base::<f32>(&corpus, &config, &tc, None).unwrap();
    let dataset = make_distilled_dataset(&[corpus], &config, &base.params).unwrap();
    let trained = train_draft(&dataset, base.params, &config, &tc, None).unwrap();
    let trained_engine = Engine::new(config.clone(), trained.params, true).unwrap();

    // Random-init draft over the same base.
    let mut random_params = trained_engine.params.clone();
    {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        let names: Vec<String> = random_params
            .names()
            .filter(|n| n.starts_with("draft."))
            .cloned()
            .collect();
        for name in names {
            let t = random_params.get_mut(&name).unwrap();
            let fresh = Tensor::randn(t.shape().to_vec(), 0.5, &mut r);
            *t = fresh;
            t.set_requires_grad(true);
        }
    }
    let random_engine = Engine::new(config.clone(), random_params, true).unwrap();

    // Adversarial: trained draft weights inverted and amplified.
    let mut adv_params = trained_engine.params.clone();
    {
        let names: Vec<String> = adv_params
            .names()
            .filter(|n| n.starts_with("draft."))
            .cloned()
            .collect();
        for name in names {
            for v in adv_params.get_mut(&name).unwrap().data_mut() {
                *v = -3.0 * *v;
            }
        }
    }
    let adv_engine = Engine::new(config.clone(), adv_params, true).unwrap();

    let vanilla = Engine::new(config.clone(), trained_engine.params.clone(), false).unwrap();

    let mut runs = 0;
    let mut mismatches = 0;
    for p in 0..prompts {
        let len = rng.gen_range(3..12);
        let prompt: Vec<u32> = (0..len).map(|_| rng.gen_range(97..123u32)).collect();
        let decode = DecodeConfig {
            max_new_tokens: 24,
            seed: seed ^ (p as u64),
            ..DecodeConfig::default()
        };
        let reference = generate(&vanilla, &prompt, decode.clone()).unwrap();
        for engine in [&trained_engine, &random_engine, &adv_engine] {
            let out = generate(engine, &prompt, decode.clone()).unwrap();
            runs += 1;
            if out.tokens != reference.tokens {
                mismatches += 1;
            }
        }
    }
    CheckOutcome {
        name: "greedy-losslessness",
        passed: mismatches == 0,
        detail: format!("{runs} runs ({prompts} prompts × 3 draft variants), {mismatches} mismatches"),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// The full suite at the documented sizes.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_ctc_oracle(200, seed),
        check_ctc_gradients(50, seed.wrapping_add(1)),
        check_marginals(100, seed.wrapping_add(2)),
        check_tree_mask_equivalence(12, seed.wrapping_add(3)),
        check_greedy_losslessness(20, seed.wrapping_add(4)),
    ]
}
