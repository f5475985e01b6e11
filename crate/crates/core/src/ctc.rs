//! CTC machinery: the collapse function, feasibility, the differentiable
//! log-probability dynamic program, collapsed-prefix marginals, and the
//! brute-force enumeration oracle.
//!
//! An alignment is a raw length-L slot sequence that may contain blanks and
//! repeated tokens. Collapsing merges maximal runs of equal tokens and then
//! deletes blanks; the CTC log-probability of a target sums over every
//! alignment that collapses to it.

use crate::error::{Error, Result};
use crate::kernels::logaddexp;
use crate::scalar::{log_zero, Scalar};
use crate::tape::{Tape, Var};

/// Collapses an alignment: merge maximal runs of equal tokens, then delete
/// blanks. Also returns, per surviving token, the index of the first slot of
/// its source run (ties resolved to the first slot, so downstream masking is
/// reproducible).
pub fn collapse(alignment: &[u32], blank: u32) -> (Vec<u32>, Vec<usize>) {
    let mut out = Vec::new();
    let mut keep = Vec::new();
    let mut i = 0;
    while i < alignment.len() {
        let tok = alignment[i];
        let run_start = i;
        while i < alignment.len() && alignment[i] == tok {
            i += 1;
        }
        if tok != blank {
            out.push(tok);
            keep.push(run_start);
        }
    }
    (out, keep)
}

/// Shortest alignment able to produce `target`: |y| plus one blank for each
/// adjacent equal pair.
pub fn min_alignment_length(target: &[u32]) -> usize {
    if target.is_empty() {
        return 0;
    }
    let pairs = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + pairs
}

fn check_feasible(target: &[u32], slots: usize) -> Result<()> {
    let min_len = min_alignment_length(target);
    if min_len > slots {
        return Err(Error::InfeasibleTarget { min_len, slots });
    }
    Ok(())
}

/// Blank-interleaved extended target: ε y₁ ε y₂ … ε (2m+1 states).
fn extended_target(target: &[u32], blank: u32) -> Vec<u32> {
    let mut z = Vec::with_capacity(2 * target.len() + 1);
    z.push(blank);
    for &t in target {
        z.push(t);
        z.push(blank);
    }
    z
}

/// Differentiable CTC log-probability for a batch of anchors whose targets
/// share one length.
///
/// `grid` holds slot log-distributions as rows: row `anchor·slots + t` is
/// slot t of that anchor, over `vocab` entries. Each batch entry names its
/// anchor index and target. The forward DP runs over tape primitives (gather
/// + logaddexp + add), so `backward` yields exact gradients; per-anchor skip
/// transitions are disabled with an additive log-zero mask rather than
/// control flow.
pub fn ctc_log_prob_grouped<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    grid: Var,
    slots: usize,
    vocab: usize,
    batch: &[(usize, &[u32])],
    blank: u32,
) -> Result<Var> {
    assert!(!batch.is_empty());
    let m = batch[0].1.len();
    for (_, target) in batch {
        assert_eq!(target.len(), m, "grouped CTC batch requires equal target lengths");
        check_feasible(target, slots)?;
    }
    let b = batch.len();
    let n_states = 2 * m + 1;
    let zs: Vec<Vec<u32>> = batch
        .iter()
        .map(|(_, t)| extended_target(t, blank))
        .collect();

    let neg = log_zero::<S>();
    let dead = tape.input(vec![b], vec![neg; b]);

    // emit(t, s): per batch entry, log-prob of its state-s symbol in slot t.
    let emit = |tape: &mut Tape<'p, S>, t: usize, s: usize| -> Var {
        let ids: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(i, (anchor, _))| (anchor * slots + t) * vocab + zs[i][s] as usize)
            .collect();
        tape.gather(grid, &ids)
    };

    // Skip transition s-2 → s is only legal into a non-blank state whose
    // token differs from the one two states back.
    let skip_mask: Vec<Vec<S>> = (0..n_states)
        .map(|s| {
            (0..b)
                .map(|i| {
                    let legal = s >= 2 && zs[i][s] != blank && zs[i][s] != zs[i][s - 2];
                    if legal {
                        S::zero()
                    } else {
                        neg
                    }
                })
                .collect()
        })
        .collect();

    let mut alpha: Vec<Var> = Vec::with_capacity(n_states);
    let e0 = emit(tape, 0, 0);
    alpha.push(e0);
    if n_states > 1 {
        let e1 = emit(tape, 0, 1);
        alpha.push(e1);
    }
    for _ in alpha.len()..n_states {
        alpha.push(dead);
    }

    for t in 1..slots {
        let mut next = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = tape.logaddexp(acc, alpha[s - 1])?;
            }
            if s >= 2 {
                let mask = tape.input(vec![b], skip_mask[s].clone());
                let skip = tape.add(alpha[s - 2], mask)?;
                acc = tape.logaddexp(acc, skip)?;
            }
            let e = emit(tape, t, s);
            next.push(tape.add(acc, e)?);
        }
        alpha = next;
    }

    if n_states == 1 {
        Ok(alpha[0])
    } else {
        tape.logaddexp(alpha[n_states - 1], alpha[n_states - 2])
    }
}

/// CTC log-probability of one target under one anchor's L×V slot rows.
/// Scalar result on the tape; errors on infeasible targets.
pub fn ctc_log_prob<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    slot_log_probs: Var,
    target: &[u32],
    blank: u32,
) -> Result<Var> {
    let shape = tape.shape(slot_log_probs).to_vec();
    assert_eq!(shape.len(), 2, "slot grid must be (slots, vocab)");
    let (slots, vocab) = (shape[0], shape[1]);
    let out = ctc_log_prob_grouped(tape, slot_log_probs, slots, vocab, &[(0, target)], blank)?;
    tape.reshape(out, vec![])
}

/// Convenience: CTC log-probability of raw rows without tape plumbing.
pub fn ctc_log_prob_value(slot_log_probs: &[f64], vocab: usize, target: &[u32], blank: u32) -> Result<f64> {
    let slots = slot_log_probs.len() / vocab;
    let mut tape: Tape<'_, f64> = Tape::no_grad();
    let grid = tape.input(vec![slots, vocab], slot_log_probs.to_vec());
    let lp = ctc_log_prob(&mut tape, grid, target, blank)?;
    Ok(tape.value(lp)[0])
}

/// Enumeration oracle: sums the probability of every length-L alignment that
/// collapses to `target`. Guarded at 10^6 alignments.
pub fn brute_force_log_prob(
    slot_log_probs: &[f64],
    vocab: usize,
    target: &[u32],
    blank: u32,
) -> Result<f64> {
    let slots = slot_log_probs.len() / vocab;
    let paths = (vocab as u128).pow(slots as u32);
    const GUARD: u128 = 1_000_000;
    if paths > GUARD {
        return Err(Error::EnumerationTooLarge { paths, guard: GUARD });
    }

    let mut total = f64::NEG_INFINITY;
    let mut alignment = vec![0u32; slots];
    loop {
        let (collapsed, _) = collapse(&alignment, blank);
        if collapsed == target {
            let lp: f64 = alignment
                .iter()
                .enumerate()
                .map(|(t, &a)| slot_log_probs[t * vocab + a as usize])
                .sum();
            total = logaddexp(total, lp);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == slots {
                return Ok(total);
            }
            alignment[i] += 1;
            if (alignment[i] as usize) < vocab {
                break;
            }
            alignment[i] = 0;
            i += 1;
        }
    }
}

/// Exact distribution of the next collapsed token given a collapsed prefix,
/// plus the probability that the collapsed output ends at the prefix.
///
/// DP state: (slots consumed, prefix tokens matched, whether the last raw
/// symbol continues the run of the last matched token). Returned
/// distribution is over the vocabulary (blank entry always zero) and sums
/// with `end` to 1.
pub fn collapsed_prefix_marginals(
    slot_log_probs: &[f64],
    vocab: usize,
    prefix: &[u32],
    blank: u32,
) -> Result<(Vec<f64>, f64)> {
    let slots = slot_log_probs.len() / vocab;
    let j = prefix.len();

    // probs[t][c] in linear space
    let p = |t: usize, c: usize| slot_log_probs[t * vocab + c].exp();

    // alpha[s][e], e=1 means the run of prefix[s-1] is still open.
    let mut alpha = vec![[0.0f64; 2]; j + 1];
    alpha[0][0] = 1.0;
    let mut next = vec![0.0f64; vocab];
    let mut end_mass = 0.0;

    for t in 0..slots {
        let mut step = vec![[0.0f64; 2]; j + 1];
        for s in 0..=j {
            for e in 0..2 {
                let val = alpha[s][e];
                if val == 0.0 {
                    continue;
                }
                for c in 0..vocab {
                    let pc = p(t, c);
                    if pc == 0.0 {
                        continue;
                    }
                    if c as u32 == blank {
                        step[s][0] += val * pc;
                    } else if e == 1 && s > 0 && c as u32 == prefix[s - 1] {
                        // same run continues: no new emission
                        step[s][1] += val * pc;
                    } else if s < j && c as u32 == prefix[s] {
                        step[s + 1][1] += val * pc;
                    } else if s == j {
                        // first token past the prefix
                        next[c] += val * pc;
                    }
                    // otherwise: emission contradicts the prefix; path dies
                }
            }
        }
        alpha = step;
    }
    end_mass += alpha[j][0] + alpha[j][1];

    let total: f64 = end_mass + next.iter().sum::<f64>();
    if total < 1e-300 {
        return Err(Error::ZeroProbabilityPrefix);
    }
    for v in next.iter_mut() {
        *v /= total;
    }
    Ok((next, end_mass / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use crate::tensor::{ParamStore, Tensor};

    const EPS: u32 = 2; // blank id in the tiny test vocab {a=0, b=1, ε=2}

    fn uniform_rows(slots: usize, vocab: usize) -> Vec<f64> {
        vec![(1.0 / vocab as f64).ln(); slots * vocab]
    }

    fn random_rows(slots: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut rows = Vec::with_capacity(slots * vocab);
        for _ in 0..slots {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            rows.extend(logits.iter().map(|l| l - lse));
        }
        rows
    }

    #[test]
    fn collapse_merges_then_deletes_blanks() {
        let (out, keep) = collapse(&[0, 0, EPS, 1], EPS);
        assert_eq!(out, vec![0, 1]);
        assert_eq!(keep, vec![0, 3]);
    }

    #[test]
    fn collapse_all_blanks_is_empty() {
        let (out, keep) = collapse(&[EPS, EPS, EPS], EPS);
        assert!(out.is_empty());
        assert!(keep.is_empty());
    }

    #[test]
    fn blank_separates_a_repeat() {
        let (out, _) = collapse(&[0, EPS, 0], EPS);
        assert_eq!(out, vec![0, 0]);
    }

    #[test]
    fn min_alignment_lengths() {
        assert_eq!(min_alignment_length(&[0, 1]), 2);
        assert_eq!(min_alignment_length(&[0, 0]), 3);
        assert_eq!(min_alignment_length(&[]), 0);
        assert_eq!(min_alignment_length(&[0, 0, 0]), 5);
    }

    #[test]
    fn uniform_two_slot_examples() {
        // L=2, uniform over {a,b,ε}: target "a" has alignments aa, aε, εa.
        let rows = uniform_rows(2, 3);
        let lp = ctc_log_prob_value(&rows, 3, &[0], EPS).unwrap();
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-9, "got {lp}");

        let lp_ab = ctc_log_prob_value(&rows, 3, &[0, 1], EPS).unwrap();
        assert!((lp_ab - (1.0f64 / 9.0).ln()).abs() < 1e-9);

        let err = ctc_log_prob_value(&rows, 3, &[0, 0], EPS).unwrap_err();
        assert!(matches!(err, Error::InfeasibleTarget { min_len: 3, slots: 2 }));
    }

    #[test]
    fn empty_target_with_certain_blanks_scores_one() {
        // p(ε)=1 per slot → log prob of "" is 0.
        let mut rows = vec![-1e30f64; 2 * 3];
        rows[EPS as usize] = 0.0;
        rows[3 + EPS as usize] = 0.0;
        let lp = brute_force_log_prob(&rows, 3, &[], EPS).unwrap();
        assert!(lp.abs() < 1e-9);
        let dp = ctc_log_prob_value(&rows, 3, &[], EPS).unwrap();
        assert!(dp.abs() < 1e-9);
    }

    #[test]
    fn enumeration_guard_refuses_large_spaces() {
        let rows = uniform_rows(8, 10); // 10^8 alignments
        let err = brute_force_log_prob(&rows, 10, &[0], 9).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { .. }));
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..60 {
            let slots = rng.gen_range(1..=5);
            let vocab = rng.gen_range(2..=5);
            let blank = (vocab - 1) as u32;
            let rows = random_rows(slots, vocab, &mut rng);
            let target_len = rng.gen_range(0..=3.min(slots));
            let target: Vec<u32> = (0..target_len)
                .map(|_| rng.gen_range(0..vocab as u32 - 1))
                .collect();
            if min_alignment_length(&target) > slots {
                continue;
            }
            let dp = ctc_log_prob_value(&rows, vocab, &target, blank).unwrap();
            let bf = brute_force_log_prob(&rows, vocab, &target, blank).unwrap();
            assert!((dp - bf).abs() < 1e-9, "dp {dp} vs bf {bf} for {target:?}");
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn total_probability_over_collapsed_outputs_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let slots = 3;
        let vocab = 3;
        let rows = random_rows(slots, vocab, &mut rng);
        // Collect distinct collapsed outputs by enumeration.
        let mut outputs = std::collections::BTreeSet::new();
        let mut alignment = vec![0u32; slots];
        'outer: loop {
            outputs.insert(collapse(&alignment, EPS).0);
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
        let mut total = 0.0;
        for target in outputs {
            total += brute_force_log_prob(&rows, vocab, &target, EPS).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn appending_certain_blank_slot_preserves_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let slots = rng.gen_range(1..=4);
            let vocab = 3;
            let mut rows = random_rows(slots, vocab, &mut rng);
            let target = vec![0u32];
            let base = ctc_log_prob_value(&rows, vocab, &target, EPS).unwrap();
            // Append a slot with all mass on blank.
            rows.extend_from_slice(&[-1e30, -1e30, 0.0]);
            let extended = ctc_log_prob_value(&rows, vocab, &target, EPS).unwrap();
            assert!((base - extended).abs() < 1e-9, "{base} vs {extended}");
        }
    }

    #[test]
    fn grouped_batch_matches_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let slots = 4;
        let vocab = 4;
        let anchors = 3;
        let rows: Vec<f64> = random_rows(anchors * slots, vocab, &mut rng);
        let targets: Vec<Vec<u32>> = vec![vec![0, 1], vec![2, 0], vec![1, 1]];

        let mut tape: Tape<'_, f64> = Tape::no_grad();
        let grid = tape.input(vec![anchors * slots, vocab], rows.clone());
        let batch: Vec<(usize, &[u32])> = targets
            .iter()
            .enumerate()
            .map(|(a, t)| (a, t.as_slice()))
            .collect();
        let out = ctc_log_prob_grouped(&mut tape, grid, slots, vocab, &batch, 3).unwrap();
        let batched = tape.value(out).to_vec();

        for (a, target) in targets.iter().enumerate() {
            let single_rows = &rows[a * slots * vocab..(a + 1) * slots * vocab];
            let lp = ctc_log_prob_value(single_rows, vocab, target, 3).unwrap();
            assert!((batched[a] - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for trial in 0..10 {
            let slots = rng.gen_range(2..=4);
            let vocab = rng.gen_range(3..=4);
            let blank = (vocab - 1) as u32;
            let rows = random_rows(slots, vocab, &mut rng);
            let target: Vec<u32> = match trial % 3 {
                0 => vec![0],
                1 => vec![0, 1],
                _ => vec![0, 0],
            };
            if min_alignment_length(&target) > slots {
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
                assert!(
                    (analytic[idx] - fd).abs() / denom < 1e-4,
                    "trial {trial} idx {idx}: {} vs {fd}",
                    analytic[idx]
                );
            }
        }
    }

    #[test]
    fn marginals_single_slot() {
        // L=1: p(a)=0.5, p(b)=0.3, p(ε)=0.2
        let rows = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let (next, end) = collapsed_prefix_marginals(&rows, 3, &[], EPS).unwrap();
        assert!((next[0] - 0.5).abs() < 1e-12);
        assert!((next[1] - 0.3).abs() < 1e-12);
        assert_eq!(next[2], 0.0);
        assert!((end - 0.2).abs() < 1e-12);
    }

    #[test]
    fn marginals_two_uniform_slots() {
        // P(first = a) = 1/3 + (1/3)(1/3) = 4/9
        let rows = uniform_rows(2, 3);
        let (next, _) = collapsed_prefix_marginals(&rows, 3, &[], EPS).unwrap();
        assert!((next[0] - 4.0 / 9.0).abs() < 1e-12, "got {}", next[0]);
    }

    #[test]
    fn marginals_zero_probability_prefix_errors() {
        // All mass on blank; prefix "a" is unreachable.
        let rows = vec![-1e30f64, -1e30, 0.0];
        let err = collapsed_prefix_marginals(&rows, 3, &[0], EPS).unwrap_err();
        assert!(matches!(err, Error::ZeroProbabilityPrefix));
    }

    /// Enumeration-based conditional: bucket alignments by collapse and read
    /// off the next-token distribution after `prefix`.
    fn enumerate_marginals(
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
            let (collapsed, _) = collapse(&alignment, blank);
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

    #[test]
    fn marginals_match_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..40 {
            let slots = rng.gen_range(1..=4);
            let vocab = rng.gen_range(2..=4);
            let blank = (vocab - 1) as u32;
            let rows = random_rows(slots, vocab, &mut rng);
            let plen = rng.gen_range(0..=2.min(slots));
            let prefix: Vec<u32> = (0..plen)
                .map(|_| rng.gen_range(0..vocab as u32 - 1))
                .collect();
            let Some((e_next, e_end)) = enumerate_marginals(&rows, vocab, &prefix, blank) else {
                continue;
            };
            let Ok((next, end)) = collapsed_prefix_marginals(&rows, vocab, &prefix, blank) else {
                continue;
            };
            for c in 0..vocab {
                assert!(
                    (next[c] - e_next[c]).abs() < 1e-10,
                    "token {c}: {} vs {}",
                    next[c],
                    e_next[c]
                );
            }
            assert!((end - e_end).abs() < 1e-10);
            let total: f64 = next.iter().sum::<f64>() + end;
            assert!((total - 1.0).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 20);
    }

    proptest::proptest! {
        #[test]
        fn collapse_output_never_contains_blank(
            raw in proptest::collection::vec(0u32..4, 0..12)
        ) {
            let (out, keep) = collapse(&raw, 3);
            proptest::prop_assert!(!out.contains(&3));
            proptest::prop_assert_eq!(out.len(), keep.len());
            proptest::prop_assert!(min_alignment_length(&out) <= raw.len().max(1));
        }
    }
}
