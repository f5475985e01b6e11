//! From one anchor's slot grid to a verification-ready batch: top-k per
//! slot, exact best-first path enumeration, the CTC transform (collapse +
//! dedupe), and the prefix trie with its attention mask.
//!
//! Draft candidate tokens occupy positions `committed_len + depth - 1`
//! (1-based depth), i.e. the first drafted token competes directly for the
//! next uncommitted position. Each trie node's visibility is the committed
//! context, its ancestors, and itself; slots removed by the collapse simply
//! never enter the batch.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;

use crate::ctc::collapse;
use crate::scalar::{neg_mask, Scalar};
use crate::tensor::Tensor;

/// One raw draft sequence with its collapse.
#[derive(Debug, Clone)]
pub struct CandidatePath {
    /// Raw alignment, exactly L tokens (may contain blanks and repeats).
    pub raw: Vec<u32>,
    /// Sum of the chosen slot log-probabilities.
    pub score: f64,
    /// Tokens submitted for verification. With the collapse enabled this is
    /// `collapse(raw)`; with the ablation (`collapse off`) it is the raw
    /// sequence verbatim, blanks included.
    pub collapsed: Vec<u32>,
    /// Slot index of the first slot of each surviving run.
    pub keep_indices: Vec<usize>,
}

/// Per-slot k best (token, log-prob) pairs, descending; ties to lower id.
pub fn topk_per_slot(rows: &[f64], vocab: usize, k: usize) -> Vec<Vec<(u32, f64)>> {
    assert!(k >= 1 && k <= vocab);
    let slots = rows.len() / vocab;
    let mut out = Vec::with_capacity(slots);
    for t in 0..slots {
        let row = &rows[t * vocab..(t + 1) * vocab];
        let mut idx: Vec<u32> = (0..vocab as u32).collect();
        idx.sort_by(|&a, &b| {
            row[b as usize]
                .total_cmp(&row[a as usize])
                .then(a.cmp(&b))
        });
        out.push(idx[..k].iter().map(|&i| (i, row[i as usize])).collect());
    }
    out
}

#[derive(PartialEq)]
struct Frontier {
    score: f64,
    ranks: Vec<u16>,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap by score; deterministic tie-break on rank vector
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.ranks.cmp(&self.ranks))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-`beam` raw paths from the per-slot candidate lists. Scores are
/// independent sums, so best-first expansion over the rank lattice with a
/// frontier heap enumerates in true descending order — no approximate
/// pruning.
pub fn enumerate_paths(
    per_slot: &[Vec<(u32, f64)>],
    beam: usize,
    blank: u32,
) -> Vec<CandidatePath> {
    assert!(beam >= 1);
    let slots = per_slot.len();
    if slots == 0 {
        return Vec::new();
    }
    let score_of = |ranks: &[u16]| -> f64 {
        ranks
            .iter()
            .enumerate()
            .map(|(t, &r)| per_slot[t][r as usize].1)
            .sum()
    };

    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0u16; slots];
    heap.push(Frontier {
        score: score_of(&start),
        ranks: start.clone(),
    });
    seen.insert(start);

    let mut out = Vec::with_capacity(beam);
    while out.len() < beam {
        let Some(Frontier { score, ranks }) = heap.pop() else {
            break;
        };
        let raw: Vec<u32> = ranks
            .iter()
            .enumerate()
            .map(|(t, &r)| per_slot[t][r as usize].0)
            .collect();
        let (collapsed, keep_indices) = collapse(&raw, blank);
        out.push(CandidatePath {
            raw,
            score,
            collapsed,
            keep_indices,
        });
        for t in 0..slots {
            if (ranks[t] as usize) + 1 < per_slot[t].len() {
                let mut next = ranks.clone();
                next[t] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Frontier {
                        score: score_of(&next),
                        ranks: next,
                    });
                }
            }
        }
    }
    out
}

/// The CTC transform: drop empty collapses, merge candidates that collapse
/// to the same string (keeping the best raw score), sort by score.
///
/// With `collapse_enabled = false` (the Medusa-verify ablation) raw
/// sequences pass through verbatim — blanks and repeats stay in, and the
/// dedupe key is the raw sequence itself.
pub fn ctc_transform(mut paths: Vec<CandidatePath>, collapse_enabled: bool) -> Vec<CandidatePath> {
    if !collapse_enabled {
        for p in paths.iter_mut() {
            p.collapsed = p.raw.clone();
            p.keep_indices = (0..p.raw.len()).collect();
        }
    }
    let mut best: Vec<CandidatePath> = Vec::new();
    let mut index: std::collections::HashMap<Vec<u32>, usize> = std::collections::HashMap::new();
    for p in paths {
        if p.collapsed.is_empty() {
            continue;
        }
        match index.get(&p.collapsed) {
            Some(&i) => {
                if p.score > best[i].score {
                    best[i] = p;
                }
            }
            None => {
                index.insert(p.collapsed.clone(), best.len());
                best.push(p);
            }
        }
    }
    best.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.collapsed.cmp(&b.collapsed)));
    best
}

/// One node of the draft trie. Depth is 1-based: a node at depth d verifies
/// the token at position `committed_len + d - 1`.
#[derive(Debug, Clone)]
pub struct TrieNode {
    pub token: u32,
    /// Parent node index; `None` for first-token nodes.
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<usize>,
    /// Candidate whose token string ends exactly here, if any.
    pub candidate_end: Option<usize>,
}

/// Prefix-merged candidate trie, flattened breadth-first.
#[derive(Debug, Clone)]
pub struct DraftTrie {
    pub nodes: Vec<TrieNode>,
    /// Indices of depth-1 nodes (children of the committed context).
    pub roots: Vec<usize>,
    pub committed_len: usize,
}

impl DraftTrie {
    /// Flat token batch in node order.
    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    /// Position ids: committed_len + depth − 1.
    pub fn positions(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .map(|n| self.committed_len + n.depth - 1)
            .collect()
    }

    /// Batch-local ancestor indices of a node, root-first, excluding itself.
    pub fn ancestry(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Root-path node indices including `node` itself, root-first.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = self.ancestry(node);
        path.push(node);
        path
    }

    /// Child of `parent` carrying `token`; `None` parent means a depth-1
    /// lookup.
    pub fn child_with_token(&self, parent: Option<usize>, token: u32) -> Option<usize> {
        let list = match parent {
            Some(p) => &self.nodes[p].children,
            None => &self.roots,
        };
        list.iter().copied().find(|&c| self.nodes[c].token == token)
    }

    /// Additive attention mask, rows = batch nodes, cols = committed context
    /// then batch nodes. A node sees the whole context, its ancestors, and
    /// itself: exactly `committed_len + depth` admitted entries per row.
    pub fn additive_mask<S: Scalar>(&self) -> Tensor<S> {
        let n = self.nodes.len();
        let c = self.committed_len;
        let mut rows = vec![neg_mask::<S>(); n * (c + n)];
        for (i, row) in rows.chunks_mut(c + n).enumerate() {
            for slot in row.iter_mut().take(c) {
                *slot = S::zero();
            }
            for a in self.ancestry(i) {
                row[c + a] = S::zero();
            }
            row[c + i] = S::zero();
        }
        Tensor::new(vec![n, c + n], rows)
    }
}

/// Builds the prefix trie over the transformed candidates. Candidates must
/// be deduped (distinct token strings); list order is preserved for
/// provenance.
pub fn build_trie(candidates: &[CandidatePath], committed_len: usize) -> DraftTrie {
    assert!(!candidates.is_empty(), "build_trie requires candidates");
    let mut trie = DraftTrie {
        nodes: Vec::new(),
        roots: Vec::new(),
        committed_len,
    };
    for (ci, cand) in candidates.iter().enumerate() {
        let mut parent: Option<usize> = None;
        for (depth0, &token) in cand.collapsed.iter().enumerate() {
            let found = trie.child_with_token(parent, token);
            let node = match found {
                Some(n) => n,
                None => {
                    let idx = trie.nodes.len();
                    trie.nodes.push(TrieNode {
                        token,
                        parent,
                        depth: depth0 + 1,
                        children: Vec::new(),
                        candidate_end: None,
                    });
                    match parent {
                        Some(p) => trie.nodes[p].children.push(idx),
                        None => trie.roots.push(idx),
                    }
                    idx
                }
            };
            if depth0 + 1 == cand.collapsed.len() {
                trie.nodes[node].candidate_end = Some(ci);
            }
            parent = Some(node);
        }
    }
    // Re-index breadth-first so shallow nodes come first in the flat batch.
    let mut order = Vec::with_capacity(trie.nodes.len());
    let mut queue: std::collections::VecDeque<usize> = trie.roots.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        order.push(n);
        queue.extend(trie.nodes[n].children.iter().copied());
    }
    let mut remap = vec![0usize; trie.nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let mut nodes = vec![None; trie.nodes.len()];
    for (old, node) in trie.nodes.into_iter().enumerate() {
        let mut node = TrieNode {
            parent: node.parent.map(|p| remap[p]),
            children: node.children.iter().map(|&c| remap[c]).collect(),
            ..node
        };
        node.children.sort_unstable();
        nodes[remap[old]] = Some(node);
    }
    trie.nodes = nodes.into_iter().map(Option::unwrap).collect();
    trie.roots = trie.roots.iter().map(|&r| remap[r]).collect();
    trie.roots.sort_unstable();
    trie
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: u32 = 2;

    fn path(raw: &[u32], score: f64) -> CandidatePath {
        let (collapsed, keep_indices) = collapse(raw, EPS);
        CandidatePath {
            raw: raw.to_vec(),
            score,
            collapsed,
            keep_indices,
        }
    }

    #[test]
    fn topk_orders_by_prob_then_id() {
        // probs {a:0.5, b:0.2, ε:0.3} → k=2 keeps [a, ε]
        let rows = [0.5f64.ln(), 0.2f64.ln(), 0.3f64.ln()];
        let top = topk_per_slot(&rows, 3, 2);
        assert_eq!(top[0][0].0, 0);
        assert_eq!(top[0][1].0, 2);
    }

    #[test]
    fn topk_uniform_tie_breaks_to_lowest_id() {
        let rows = [0.25f64.ln(); 4];
        let top = topk_per_slot(&rows, 4, 1);
        assert_eq!(top[0][0].0, 0);
    }

    #[test]
    fn topk_full_width_is_a_sorted_permutation() {
        let rows = [0.1f64.ln(), 0.4f64.ln(), 0.2f64.ln(), 0.3f64.ln()];
        let top = topk_per_slot(&rows, 4, 4);
        let ids: Vec<u32> = top[0].iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![1, 3, 2, 0]);
    }

    #[test]
    fn k1_enumeration_is_the_argmax_path() {
        let per_slot = vec![vec![(1u32, -0.1)], vec![(0u32, -0.2)]];
        let paths = enumerate_paths(&per_slot, 8, EPS);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].raw, vec![1, 0]);
        assert!((paths[0].score + 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_enumeration_is_exhaustive_and_sorted() {
        let per_slot = vec![
            vec![(0u32, -0.1), (1u32, -0.7)],
            vec![(0u32, -0.2), (1u32, -0.3)],
        ];
        let paths = enumerate_paths(&per_slot, 4, EPS);
        assert_eq!(paths.len(), 4);
        for w in paths.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        let expected_best = vec![0u32, 0];
        assert_eq!(paths[0].raw, expected_best);
    }

    #[test]
    fn best_first_matches_full_enumeration_on_small_grids() {
        // k=3 over L=4 slots: verify the heap returns the true top set.
        let mut per_slot = Vec::new();
        for t in 0..4 {
            let mut opts = Vec::new();
            for k in 0..3u32 {
                opts.push((k, -(((t as f64) * 0.37 + k as f64 * 1.1).sin().abs() + 0.01)));
            }
            opts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            per_slot.push(opts);
        }
        let got = enumerate_paths(&per_slot, 10, EPS);
        // brute force all 81 combos
        let mut all = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        let ranks = [a, b, c, d];
                        let score: f64 =
                            ranks.iter().enumerate().map(|(t, &r)| per_slot[t][r].1).sum();
                        all.push(score);
                    }
                }
            }
        }
        all.sort_by(|x, y| y.total_cmp(x));
        for (i, p) in got.iter().enumerate() {
            assert!((p.score - all[i]).abs() < 1e-12, "rank {i}");
        }
    }

    #[test]
    fn transform_merges_equal_collapses_keeping_best_score() {
        let paths = vec![path(&[0, EPS, 1], -1.0), path(&[0, 1, EPS], -0.5)];
        let out = ctc_transform(paths, true);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].collapsed, vec![0, 1]);
        assert_eq!(out[0].score, -0.5);
    }

    #[test]
    fn transform_drops_all_blank_paths() {
        let out = ctc_transform(vec![path(&[EPS, EPS, EPS], -0.1)], true);
        assert!(out.is_empty());
    }

    #[test]
    fn transform_keeps_distinct_strings() {
        let paths = vec![path(&[0, EPS, EPS], -0.2), path(&[0, 1, EPS], -0.4)];
        let out = ctc_transform(paths, true);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].collapsed, vec![0]);
        assert_eq!(out[1].collapsed, vec![0, 1]);
    }

    #[test]
    fn transform_disabled_passes_raw_through() {
        let out = ctc_transform(vec![path(&[0, 0, EPS], -0.2)], false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].collapsed, vec![0, 0, EPS]);
        assert_eq!(out[0].keep_indices, vec![0, 1, 2]);
    }

    #[test]
    fn trie_merges_shared_prefixes() {
        // {"ab", "ac"} → nodes a, b, c with b and c children of a
        let cands = ctc_transform(
            vec![path(&[0, 1, EPS], -0.2), path(&[0, 3, EPS], -0.4)],
            true,
        );
        let trie = build_trie(&cands, 10);
        assert_eq!(trie.nodes.len(), 3);
        assert_eq!(trie.roots.len(), 1);
        let a = trie.roots[0];
        assert_eq!(trie.nodes[a].token, 0);
        assert_eq!(trie.nodes[a].children.len(), 2);
        for &c in &trie.nodes[a].children {
            assert_eq!(trie.nodes[c].parent, Some(a));
            assert_eq!(trie.ancestry(c), vec![a]);
        }
    }

    #[test]
    fn trie_positions_follow_committed_length() {
        let cands = ctc_transform(vec![path(&[0, 1, 3], -0.2)], true);
        let trie = build_trie(&cands, 10);
        assert_eq!(trie.positions(), vec![10, 11, 12]);
        assert_eq!(trie.tokens(), vec![0, 1, 3]);
    }

    #[test]
    fn mask_rows_admit_committed_plus_depth() {
        let cands = ctc_transform(
            vec![
                path(&[0, 1, 3], -0.2),
                path(&[0, 3, EPS], -0.3),
                path(&[1, EPS, EPS], -0.9),
            ],
            true,
        );
        let trie = build_trie(&cands, 7);
        let mask = trie.additive_mask::<f32>();
        let n = trie.nodes.len();
        let width = 7 + n;
        assert_eq!(mask.shape(), &[n, width]);
        for (i, node) in trie.nodes.iter().enumerate() {
            let admitted = mask.data()[i * width..(i + 1) * width]
                .iter()
                .filter(|&&v| v == 0.0)
                .count();
            assert_eq!(admitted, 7 + node.depth, "node {i}");
        }
    }

    #[test]
    fn trie_provenance_tracks_candidate_ends() {
        let cands = ctc_transform(
            vec![path(&[0, EPS, EPS], -0.1), path(&[0, 1, EPS], -0.5)],
            true,
        );
        let trie = build_trie(&cands, 0);
        // candidate 0 = "a" ends at the root; candidate 1 = "ab" at the leaf
        let a = trie.roots[0];
        assert_eq!(trie.nodes[a].candidate_end, Some(0));
        let b = trie.nodes[a].children[0];
        assert_eq!(trie.nodes[b].candidate_end, Some(1));
        assert_eq!(trie.path_to(b), vec![a, b]);
    }

    #[test]
    fn bfs_order_puts_parents_before_children() {
        let cands = ctc_transform(
            vec![
                path(&[0, 1, 3], -0.2),
                path(&[1, 0, EPS], -0.4),
                path(&[0, 3, 1], -0.5),
            ],
            true,
        );
        let trie = build_trie(&cands, 0);
        for (i, node) in trie.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                assert!(p < i, "parent {p} of node {i} must precede it");
            }
        }
    }
}
