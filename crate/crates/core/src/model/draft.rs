//! Attention draft module: one transformer layer predicting L slot
//! distributions per anchor in parallel.
//!
//! Each anchor contributes L queries (an affine map of the anchor's hidden
//! state plus a learned per-slot embedding). Queries cross-attend to the
//! hidden states of positions up to the anchor; slots never attend to each
//! other, so the L distributions are produced independently in one pass.
//! Outputs go through the base model's LM head (shared tensor, frozen during
//! draft training) and log-softmax.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels;
use crate::model::ModelConfig;
use crate::scalar::{neg_mask, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// Per-anchor L×V grid of normalized log-probabilities.
#[derive(Debug, Clone)]
pub struct SlotGrid<S: Scalar> {
    pub anchors: usize,
    pub slots: usize,
    pub vocab: usize,
    /// Row-major (anchors·slots, vocab); row a·L+i is slot i of anchor a.
    pub log_probs: Vec<S>,
}

impl<S: Scalar> SlotGrid<S> {
    pub fn row(&self, anchor: usize, slot: usize) -> &[S] {
        let r = anchor * self.slots + slot;
        &self.log_probs[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn is_empty(&self) -> bool {
        self.anchors == 0
    }

    /// One anchor's L×V block as f64, for the marginals DP and sampling.
    pub fn anchor_rows_f64(&self, anchor: usize) -> Vec<f64> {
        let start = anchor * self.slots * self.vocab;
        self.log_probs[start..start + self.slots * self.vocab]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }
}

pub struct DraftModule<'m, S: Scalar> {
    pub config: &'m ModelConfig,
    pub params: &'m ParamStore<S>,
}

/// Initializes draft parameters under the `draft.` prefix. The output
/// projection is `base.lm_head`, shared with the base model, so none is
/// created here.
pub fn init_draft_params<S: Scalar>(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<S>,
) {
    let d = config.d_model;
    let std = 0.02;
    store.insert("draft.anchor_proj.w", Tensor::randn(vec![d, d], std, rng));
    store.insert("draft.anchor_proj.b", Tensor::zeros(vec![d]));
    store.insert(
        "draft.slot_emb",
        Tensor::randn(vec![config.slots, d], std, rng),
    );
    store.insert("draft.ln_q.g", ones(d));
    store.insert("draft.ln_q.b", Tensor::zeros(vec![d]));
    store.insert("draft.q.w", Tensor::randn(vec![d, d], std, rng));
    store.insert("draft.q.b", Tensor::zeros(vec![d]));
    store.insert("draft.k.w", Tensor::randn(vec![d, d], std, rng));
    store.insert("draft.k.b", Tensor::zeros(vec![d]));
    store.insert("draft.v.w", Tensor::randn(vec![d, d], std, rng));
    store.insert("draft.v.b", Tensor::zeros(vec![d]));
    store.insert("draft.attn_out.w", Tensor::randn(vec![d, d], std, rng));
    store.insert("draft.attn_out.b", Tensor::zeros(vec![d]));
    store.insert("draft.ln2.g", ones(d));
    store.insert("draft.ln2.b", Tensor::zeros(vec![d]));
    store.insert("draft.mlp_in.w", Tensor::randn(vec![d, 4 * d], std, rng));
    store.insert("draft.mlp_in.b", Tensor::zeros(vec![4 * d]));
    store.insert("draft.mlp_out.w", Tensor::randn(vec![4 * d, d], std, rng));
    store.insert("draft.mlp_out.b", Tensor::zeros(vec![d]));
    store.insert("draft.ln_f.g", ones(d));
    store.insert("draft.ln_f.b", Tensor::zeros(vec![d]));
}

fn ones<S: Scalar>(d: usize) -> Tensor<S> {
    Tensor::new(vec![d], vec![S::one(); d])
}

/// Names of the tensors train-draft updates.
pub fn draft_param_names<S: Scalar>(store: &ParamStore<S>) -> Vec<String> {
    store
        .names()
        .filter(|n| n.starts_with("draft."))
        .cloned()
        .collect()
}

impl<'m, S: Scalar> DraftModule<'m, S> {
    pub fn new(config: &'m ModelConfig, params: &'m ParamStore<S>) -> Self {
        DraftModule { config, params }
    }

    fn p(&self, name: &str) -> &'m Tensor<S> {
        self.params.expect(name)
    }

    /// Batched slot prediction: `hidden` is (T, d) on the tape, one query
    /// group per anchor. Returns (anchors·L, vocab) log-probabilities.
    /// An empty anchor list yields an empty grid.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        hidden: Var,
        anchors: &[usize],
    ) -> Result<Option<Var>> {
        if anchors.is_empty() {
            return Ok(None);
        }
        let t_len = tape.shape(hidden)[0];
        let l = self.config.slots;

        // Visibility: slot queries of anchor a see hidden positions <= a.
        let mut mask = vec![neg_mask::<S>(); anchors.len() * l * t_len];
        for (ai, &a) in anchors.iter().enumerate() {
            for slot in 0..l {
                let row = (ai * l + slot) * t_len;
                for col in 0..=a.min(t_len - 1) {
                    mask[row + col] = S::zero();
                }
            }
        }
        let mask = tape.input(vec![anchors.len() * l, t_len], mask);

        let k_src = self.project(tape, hidden, "k")?;
        let v_src = self.project(tape, hidden, "v")?;
        let grid = self.slot_queries(tape, hidden, anchors, k_src, v_src, mask)?;
        Ok(Some(grid))
    }

    /// Single-anchor prediction against precomputed draft K/V rows covering
    /// the whole committed prefix (decode-time path; everything is visible).
    pub fn forward_cached<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        anchor_hidden: &'p [S],
        k_rows: &'p [S],
        v_rows: &'p [S],
    ) -> Result<Var> {
        let d = self.config.d_model;
        let t_len = k_rows.len() / d;
        let l = self.config.slots;
        let hidden = tape.ext_slice(vec![1, d], anchor_hidden);
        let k_src = tape.ext_slice(vec![t_len, d], k_rows);
        let v_src = tape.ext_slice(vec![t_len, d], v_rows);
        let mask = tape.input(vec![l, t_len], vec![S::zero(); l * t_len]);
        self.slot_queries(tape, hidden, &[0], k_src, v_src, mask)
    }

    fn project<'p>(&'p self, tape: &mut Tape<'p, S>, x: Var, which: &str) -> Result<Var> {
        let w = tape.param(&format!("draft.{which}.w"), self.p(&format!("draft.{which}.w")));
        let b = tape.param(&format!("draft.{which}.b"), self.p(&format!("draft.{which}.b")));
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }

    fn slot_queries<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        hidden: Var,
        anchors: &[usize],
        k_src: Var,
        v_src: Var,
        mask: Var,
    ) -> Result<Var> {
        let l = self.config.slots;

        let h_anchor = tape.select_rows(hidden, anchors)?;
        let pw = tape.param("draft.anchor_proj.w", self.p("draft.anchor_proj.w"));
        let pb = tape.param("draft.anchor_proj.b", self.p("draft.anchor_proj.b"));
        let proj = tape.matmul(h_anchor, pw)?;
        let proj = tape.add_broadcast(proj, pb)?;
        let proj_rep = tape.repeat_rows(proj, l)?;
        let slot_emb = tape.param("draft.slot_emb", self.p("draft.slot_emb"));
        let slots_tiled = tape.tile_rows(slot_emb, anchors.len())?;
        let mut x = tape.add(proj_rep, slots_tiled)?;

        let lnqg = tape.param("draft.ln_q.g", self.p("draft.ln_q.g"));
        let lnqb = tape.param("draft.ln_q.b", self.p("draft.ln_q.b"));
        let attn_in = tape.layer_norm(x, lnqg, lnqb)?;
        let q = {
            let w = tape.param("draft.q.w", self.p("draft.q.w"));
            let b = tape.param("draft.q.b", self.p("draft.q.b"));
            let y = tape.matmul(attn_in, w)?;
            tape.add_broadcast(y, b)?
        };
        let attn = tape.attention(q, k_src, v_src, mask, self.config.n_heads)?;
        let ow = tape.param("draft.attn_out.w", self.p("draft.attn_out.w"));
        let ob = tape.param("draft.attn_out.b", self.p("draft.attn_out.b"));
        let attn = tape.matmul(attn, ow)?;
        let attn = tape.add_broadcast(attn, ob)?;
        x = tape.add(x, attn)?;

        let ln2g = tape.param("draft.ln2.g", self.p("draft.ln2.g"));
        let ln2b = tape.param("draft.ln2.b", self.p("draft.ln2.b"));
        let normed = tape.layer_norm(x, ln2g, ln2b)?;
        let inw = tape.param("draft.mlp_in.w", self.p("draft.mlp_in.w"));
        let inb = tape.param("draft.mlp_in.b", self.p("draft.mlp_in.b"));
        let outw = tape.param("draft.mlp_out.w", self.p("draft.mlp_out.w"));
        let outb = tape.param("draft.mlp_out.b", self.p("draft.mlp_out.b"));
        let h = tape.matmul(normed, inw)?;
        let h = tape.add_broadcast(h, inb)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, outw)?;
        let h = tape.add_broadcast(h, outb)?;
        x = tape.add(x, h)?;

        let lnfg = tape.param("draft.ln_f.g", self.p("draft.ln_f.g"));
        let lnfb = tape.param("draft.ln_f.b", self.p("draft.ln_f.b"));
        let y = tape.layer_norm(x, lnfg, lnfb)?;
        // Shared LM head: same tensor the base model projects with.
        let head = tape.param("base.lm_head", self.p("base.lm_head"));
        let logits = tape.matmul(y, head)?;
        Ok(tape.log_softmax(logits))
    }

    /// Projects one hidden row into draft K/V rows for the decode cache.
    pub fn project_kv_row(&self, hidden_row: &[S]) -> (Vec<S>, Vec<S>) {
        let d = self.config.d_model;
        let mut k = vec![S::zero(); d];
        let mut v = vec![S::zero(); d];
        kernels::matmul(hidden_row, 1, d, self.p("draft.k.w").data(), d, &mut k);
        for (o, &b) in k.iter_mut().zip(self.p("draft.k.b").data()) {
            *o += b;
        }
        kernels::matmul(hidden_row, 1, d, self.p("draft.v.w").data(), d, &mut v);
        for (o, &b) in v.iter_mut().zip(self.p("draft.v.b").data()) {
            *o += b;
        }
        (k, v)
    }

    /// Materializes a grid from the tape output.
    pub fn grid_from(&self, tape: &Tape<'_, S>, grid: Var, anchors: usize) -> SlotGrid<S> {
        SlotGrid {
            anchors,
            slots: self.config.slots,
            vocab: self.config.vocab_size,
            log_probs: tape.value(grid).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::logsumexp_rows;
    use crate::model::base::{init_base_params, BaseModel};
    use rand::SeedableRng;

    fn setup(seed: u64) -> (ModelConfig, ParamStore<f32>) {
        let config = ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            slots: 5,
            m_max: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_base_params(&config, &mut rng, &mut store);
        init_draft_params(&config, &mut rng, &mut store);
        (config, store)
    }

    fn grid_for(
        config: &ModelConfig,
        store: &ParamStore<f32>,
        tokens: &[u32],
        anchors: &[usize],
    ) -> SlotGrid<f32> {
        let base = BaseModel::new(config, store);
        let draft = DraftModule::new(config, store);
        let mut tape = Tape::no_grad();
        let out = base.forward_full(&mut tape, tokens).unwrap();
        let grid = draft.forward(&mut tape, out.hidden, anchors).unwrap().unwrap();
        draft.grid_from(&tape, grid, anchors.len())
    }

    #[test]
    fn grid_shape_and_normalization() {
        let (config, store) = setup(1);
        let grid = grid_for(&config, &store, &[1, 2, 3, 4], &[3]);
        assert_eq!(grid.anchors, 1);
        assert_eq!(grid.slots, 5);
        assert_eq!(grid.vocab, 11);
        let mut lse = vec![0.0f32; 5];
        logsumexp_rows(&grid.log_probs, 5, 11, &mut lse);
        for l in lse {
            assert!(l.abs() < 1e-5, "row lse {l}");
        }
    }

    #[test]
    fn empty_anchor_list_is_not_an_error() {
        let (config, store) = setup(2);
        let base = BaseModel::new(&config, &store);
        let draft = DraftModule::new(&config, &store);
        let mut tape = Tape::no_grad();
        let out = base.forward_full(&mut tape, &[1, 2]).unwrap();
        assert!(draft.forward(&mut tape, out.hidden, &[]).unwrap().is_none());
    }

    #[test]
    fn permuting_anchors_permutes_grid_rows() {
        let (config, store) = setup(3);
        let tokens = [1u32, 2, 3, 4, 5];
        let fwd = grid_for(&config, &store, &tokens, &[1, 3, 4]);
        let rev = grid_for(&config, &store, &tokens, &[4, 1, 3]);
        let l = config.slots;
        let v = config.vocab_size;
        // anchor 1 is block 0 forward, block 1 reversed
        for (fwd_block, rev_block) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let a = &fwd.log_probs[fwd_block * l * v..(fwd_block + 1) * l * v];
            let b = &rev.log_probs[rev_block * l * v..(rev_block + 1) * l * v];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn slot_embedding_touches_only_its_rows() {
        let (config, mut store) = setup(4);
        let tokens = [1u32, 2, 3, 4];
        let before = grid_for(&config, &store, &tokens, &[2, 3]);
        // zero slot 2's embedding
        let d = config.d_model;
        {
            let emb = store.get_mut("draft.slot_emb").unwrap();
            for v in &mut emb.data_mut()[2 * d..3 * d] {
                *v = 0.0;
            }
        }
        let after = grid_for(&config, &store, &tokens, &[2, 3]);
        let v = config.vocab_size;
        for anchor in 0..2 {
            for slot in 0..config.slots {
                let r = anchor * config.slots + slot;
                let same = before.log_probs[r * v..(r + 1) * v]
                    == after.log_probs[r * v..(r + 1) * v];
                if slot == 2 {
                    assert!(!same, "slot 2 rows should change");
                } else {
                    assert!(same, "anchor {anchor} slot {slot} changed unexpectedly");
                }
            }
        }
    }

    #[test]
    fn cached_path_matches_batched_path_at_last_anchor() {
        let (config, store) = setup(5);
        let tokens = [1u32, 2, 3, 4, 5, 6];
        let anchor = tokens.len() - 1;
        let batched = grid_for(&config, &store, &tokens, &[anchor]);

        let base = BaseModel::new(&config, &store);
        let draft = DraftModule::new(&config, &store);
        let mut tape = Tape::no_grad();
        let out = base.forward_full(&mut tape, &tokens).unwrap();
        let hidden = tape.value(out.hidden).to_vec();
        drop(tape);

        let d = config.d_model;
        let mut k_rows = Vec::new();
        let mut v_rows = Vec::new();
        for row in hidden.chunks(d) {
            let (k, v) = draft.project_kv_row(row);
            k_rows.extend(k);
            v_rows.extend(v);
        }
        let anchor_hidden = hidden[anchor * d..(anchor + 1) * d].to_vec();
        let mut tape = Tape::no_grad();
        let grid = draft
            .forward_cached(&mut tape, &anchor_hidden, &k_rows, &v_rows)
            .unwrap();
        let cached = tape.value(grid);
        for (a, b) in batched.log_probs.iter().zip(cached) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
