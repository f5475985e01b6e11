//! Decoder-only base transformer: pre-LN blocks, learned absolute positions,
//! one LM head shared with the draft module.
//!
//! One forward implementation serves training (causal mask, gradients on) and
//! inference (KV cache plus an arbitrary additive mask, gradients off). The
//! cache holds per-layer projected K/V rows; callers append the rows a
//! forward returns once the tape is dropped.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::{neg_mask, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// Per-layer projected key/value rows for all committed positions.
#[derive(Debug, Clone)]
pub struct KvCache<S: Scalar> {
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    len: usize,
    d_model: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            k: vec![Vec::new(); config.n_layers],
            v: vec![Vec::new(); config.n_layers],
            len: 0,
            d_model: config.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer_k(&self, layer: usize) -> &[S] {
        &self.k[layer]
    }

    pub fn layer_v(&self, layer: usize) -> &[S] {
        &self.v[layer]
    }

    /// Appends one forward's new rows (per layer, row-major (n, d)).
    pub fn append(&mut self, new_k: &[Vec<S>], new_v: &[Vec<S>]) {
        let n = new_k[0].len() / self.d_model;
        for layer in 0..self.k.len() {
            self.k[layer].extend_from_slice(&new_k[layer]);
            self.v[layer].extend_from_slice(&new_v[layer]);
        }
        self.len += n;
    }

    /// Appends a chosen subset of row indices from a verify batch.
    pub fn append_rows(&mut self, new_k: &[Vec<S>], new_v: &[Vec<S>], rows: &[usize]) {
        let d = self.d_model;
        for layer in 0..self.k.len() {
            for &r in rows {
                self.k[layer].extend_from_slice(&new_k[layer][r * d..(r + 1) * d]);
                self.v[layer].extend_from_slice(&new_v[layer][r * d..(r + 1) * d]);
            }
        }
        self.len += rows.len();
    }

    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.len);
        for layer in 0..self.k.len() {
            self.k[layer].truncate(len * self.d_model);
            self.v[layer].truncate(len * self.d_model);
        }
        self.len = len;
    }
}

/// Attention visibility for a forward pass.
pub enum Mask<'a, S: Scalar> {
    /// Each position sees the whole cache plus batch positions up to itself.
    Causal,
    /// Explicit additive rows, shape (batch, cache_len + batch).
    Explicit(&'a Tensor<S>),
}

/// Values a forward pass leaves on the tape.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Post-final-layer-norm features, (n, d); the draft module's input.
    pub hidden: Var,
    /// LM-head outputs per position, (n, vocab).
    pub logits: Var,
    /// Projected K/V rows for the new positions, per layer, (n, d).
    pub new_k: Vec<Var>,
    pub new_v: Vec<Var>,
}

/// Name-keyed view over the base model's parameters.
pub struct BaseModel<'m, S: Scalar> {
    pub config: &'m ModelConfig,
    pub params: &'m ParamStore<S>,
}

/// Initializes base parameters under the `base.` prefix.
pub fn init_base_params<S: Scalar>(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore<S>,
) {
    let d = config.d_model;
    let v = config.vocab_size;
    let std = 0.02;
    store.insert("base.tok_emb", Tensor::randn(vec![v, d], std, rng));
    store.insert(
        "base.pos_emb",
        Tensor::randn(vec![config.max_seq_len, d], std, rng),
    );
    for layer in 0..config.n_layers {
        let p = format!("base.layer{layer}");
        store.insert(format!("{p}.ln1.g"), ones(d));
        store.insert(format!("{p}.ln1.b"), Tensor::zeros(vec![d]));
        store.insert(format!("{p}.qkv.w"), Tensor::randn(vec![d, 3 * d], std, rng));
        store.insert(format!("{p}.qkv.b"), Tensor::zeros(vec![3 * d]));
        store.insert(format!("{p}.attn_out.w"), Tensor::randn(vec![d, d], std, rng));
        store.insert(format!("{p}.attn_out.b"), Tensor::zeros(vec![d]));
        store.insert(format!("{p}.ln2.g"), ones(d));
        store.insert(format!("{p}.ln2.b"), Tensor::zeros(vec![d]));
        store.insert(format!("{p}.mlp_in.w"), Tensor::randn(vec![d, 4 * d], std, rng));
        store.insert(format!("{p}.mlp_in.b"), Tensor::zeros(vec![4 * d]));
        store.insert(format!("{p}.mlp_out.w"), Tensor::randn(vec![4 * d, d], std, rng));
        store.insert(format!("{p}.mlp_out.b"), Tensor::zeros(vec![d]));
    }
    store.insert("base.ln_f.g", ones(d));
    store.insert("base.ln_f.b", Tensor::zeros(vec![d]));
    store.insert("base.lm_head", Tensor::randn(vec![d, v], std, rng));
}

fn ones<S: Scalar>(d: usize) -> Tensor<S> {
    Tensor::new(vec![d], vec![S::one(); d])
}

impl<'m, S: Scalar> BaseModel<'m, S> {
    pub fn new(config: &'m ModelConfig, params: &'m ParamStore<S>) -> Self {
        BaseModel { config, params }
    }

    fn p(&self, name: &str) -> &'m Tensor<S> {
        self.params.expect(name)
    }

    /// Forward over `tokens` at explicit `positions`, attending to `cache`
    /// (when given) plus batch positions allowed by `mask`.
    ///
    /// Gradient behavior follows the tape: a grad-enabled tape trains every
    /// `base.*` tensor whose `requires_grad` is set; a no-grad tape is pure
    /// inference.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        tokens: &[u32],
        positions: &[usize],
        cache: Option<&'p KvCache<S>>,
        mask: Mask<'p, S>,
    ) -> Result<ForwardOutput> {
        assert_eq!(tokens.len(), positions.len());
        let n = tokens.len();
        let d = self.config.d_model;
        let cache_len = cache.map_or(0, |c| c.len());
        let max_pos = positions.iter().copied().max().unwrap_or(0);
        if max_pos >= self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                requested: max_pos + 1,
                max_seq_len: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "token id {t} outside vocab of {}",
                    self.config.vocab_size
                )));
            }
        }

        let mask_var = match mask {
            Mask::Causal => {
                let mut rows = vec![neg_mask::<S>(); n * (cache_len + n)];
                for (i, row) in rows.chunks_mut(cache_len + n).enumerate() {
                    for slot in row.iter_mut().take(cache_len + i + 1) {
                        *slot = S::zero();
                    }
                }
                tape.input(vec![n, cache_len + n], rows)
            }
            Mask::Explicit(m) => {
                assert_eq!(m.shape(), &[n, cache_len + n], "mask shape mismatch");
                tape.ext(m)
            }
        };

        let tok_emb = tape.param("base.tok_emb", self.p("base.tok_emb"));
        let pos_emb = tape.param("base.pos_emb", self.p("base.pos_emb"));
        let tok = tape.embedding(tok_emb, tokens)?;
        let pos_ids: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
        let pos = tape.embedding(pos_emb, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        let mut new_k = Vec::with_capacity(self.config.n_layers);
        let mut new_v = Vec::with_capacity(self.config.n_layers);

        for layer in 0..self.config.n_layers {
            let pfx = format!("base.layer{layer}");
            let ln1g = tape.param(&format!("{pfx}.ln1.g"), self.p(&format!("{pfx}.ln1.g")));
            let ln1b = tape.param(&format!("{pfx}.ln1.b"), self.p(&format!("{pfx}.ln1.b")));
            let normed = tape.layer_norm(x, ln1g, ln1b)?;

            let qkv_w = tape.param(&format!("{pfx}.qkv.w"), self.p(&format!("{pfx}.qkv.w")));
            let qkv_b = tape.param(&format!("{pfx}.qkv.b"), self.p(&format!("{pfx}.qkv.b")));
            let qkv = tape.matmul(normed, qkv_w)?;
            let qkv = tape.add_broadcast(qkv, qkv_b)?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k_new = tape.slice_cols(qkv, d, 2 * d)?;
            let v_new = tape.slice_cols(qkv, 2 * d, 3 * d)?;

            let (k_all, v_all) = match cache {
                Some(c) if c.len() > 0 => {
                    let ck = tape.ext_slice(vec![c.len(), d], c.layer_k(layer));
                    let cv = tape.ext_slice(vec![c.len(), d], c.layer_v(layer));
                    (
                        tape.concat_rows(&[ck, k_new])?,
                        tape.concat_rows(&[cv, v_new])?,
                    )
                }
                _ => (k_new, v_new),
            };

            let attn = tape.attention(q, k_all, v_all, mask_var, self.config.n_heads)?;
            let ow = tape.param(
                &format!("{pfx}.attn_out.w"),
                self.p(&format!("{pfx}.attn_out.w")),
            );
            let ob = tape.param(
                &format!("{pfx}.attn_out.b"),
                self.p(&format!("{pfx}.attn_out.b")),
            );
            let proj = tape.matmul(attn, ow)?;
            let proj = tape.add_broadcast(proj, ob)?;
            x = tape.add(x, proj)?;

            let ln2g = tape.param(&format!("{pfx}.ln2.g"), self.p(&format!("{pfx}.ln2.g")));
            let ln2b = tape.param(&format!("{pfx}.ln2.b"), self.p(&format!("{pfx}.ln2.b")));
            let normed2 = tape.layer_norm(x, ln2g, ln2b)?;
            let inw = tape.param(&format!("{pfx}.mlp_in.w"), self.p(&format!("{pfx}.mlp_in.w")));
            let inb = tape.param(&format!("{pfx}.mlp_in.b"), self.p(&format!("{pfx}.mlp_in.b")));
            let noutw = tape.param(
                &format!("{pfx}.mlp_out.w"),
                self.p(&format!("{pfx}.mlp_out.w")),
            );
            let noutb = tape.param(
                &format!("{pfx}.mlp_out.b"),
                self.p(&format!("{pfx}.mlp_out.b")),
            );
            let h = tape.matmul(normed2, inw)?;
            let h = tape.add_broadcast(h, inb)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, noutw)?;
            let h = tape.add_broadcast(h, noutb)?;
            x = tape.add(x, h)?;

            new_k.push(k_new);
            new_v.push(v_new);
        }

        let lnfg = tape.param("base.ln_f.g", self.p("base.ln_f.g"));
        let lnfb = tape.param("base.ln_f.b", self.p("base.ln_f.b"));
        let hidden = tape.layer_norm(x, lnfg, lnfb)?;
        let head = tape.param("base.lm_head", self.p("base.lm_head"));
        let logits = tape.matmul(hidden, head)?;

        Ok(ForwardOutput {
            hidden,
            logits,
            new_k,
            new_v,
        })
    }

    /// Full-sequence causal forward at positions 0..n with no cache.
    pub fn forward_full<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        tokens: &[u32],
    ) -> Result<ForwardOutput> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.forward(tape, tokens, &positions, None, Mask::Causal)
    }
}

/// Copies a forward's per-layer K/V rows out of the tape so they can be
/// appended to a cache after the tape is dropped.
pub fn extract_kv<S: Scalar>(tape: &Tape<'_, S>, out: &ForwardOutput) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
    let k = out.new_k.iter().map(|&v| tape.value(v).to_vec()).collect();
    let v = out.new_v.iter().map(|&v| tape.value(v).to_vec()).collect();
    (k, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::logsumexp_rows;
    use crate::tape::Tape;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            slots: 3,
            m_max: 2,
        }
    }

    fn tiny_store(seed: u64) -> (ModelConfig, ParamStore<f32>) {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_base_params(&config, &mut rng, &mut store);
        (config, store)
    }

    #[test]
    fn logits_rows_normalize_after_log_softmax() {
        let (config, store) = tiny_store(1);
        let model = BaseModel::new(&config, &store);
        let mut tape = Tape::no_grad();
        let out = model.forward_full(&mut tape, &[1, 2, 3]).unwrap();
        let ls = tape.log_softmax(out.logits);
        let v = tape.value(ls);
        let mut lse = vec![0.0f32; 3];
        logsumexp_rows(v, 3, config.vocab_size, &mut lse);
        for l in lse {
            assert!(l.abs() < 1e-5, "row lse {l}");
        }
    }

    #[test]
    fn single_bos_yields_one_row() {
        let (config, store) = tiny_store(2);
        let model = BaseModel::new(&config, &store);
        let mut tape = Tape::no_grad();
        let out = model.forward_full(&mut tape, &[10]).unwrap();
        assert_eq!(tape.shape(out.hidden), &[1, config.d_model]);
        assert_eq!(tape.shape(out.logits), &[1, config.vocab_size]);
    }

    #[test]
    fn causality_perturbing_later_token_leaves_earlier_logits() {
        let (config, store) = tiny_store(3);
        let model = BaseModel::new(&config, &store);
        let run = |tokens: &[u32]| -> Vec<f32> {
            let mut tape = Tape::no_grad();
            let out = model.forward_full(&mut tape, tokens).unwrap();
            tape.value(out.logits).to_vec()
        };
        let a = run(&[1, 2, 3, 4]);
        let b = run(&[1, 2, 3, 9]);
        let v = config.vocab_size;
        for pos in 0..3 {
            for c in 0..v {
                let d = (a[pos * v + c] - b[pos * v + c]).abs();
                assert!(d <= 1e-5, "pos {pos} changed by {d}");
            }
        }
    }

    #[test]
    fn cache_consistency_matches_full_recompute() {
        let (config, store) = tiny_store(4);
        let model = BaseModel::new(&config, &store);
        let tokens = [1u32, 2, 3, 4, 5, 6];

        let full = {
            let mut tape = Tape::no_grad();
            let out = model.forward_full(&mut tape, &tokens).unwrap();
            tape.value(out.logits).to_vec()
        };

        // Incremental: prefix then one token at a time through the cache.
        let mut cache = KvCache::new(&config);
        let mut last_rows = Vec::new();
        let mut fed = 0usize;
        for chunk in [&tokens[..3], &tokens[3..4], &tokens[4..6]] {
            let positions: Vec<usize> = (fed..fed + chunk.len()).collect();
            let mut tape = Tape::no_grad();
            let out = model
                .forward(&mut tape, chunk, &positions, Some(&cache), Mask::Causal)
                .unwrap();
            last_rows = tape.value(out.logits).to_vec();
            let (k, v) = extract_kv(&tape, &out);
            drop(tape);
            cache.append(&k, &v);
            fed += chunk.len();
        }

        let v = config.vocab_size;
        let full_last = &full[5 * v..6 * v];
        let inc_last = &last_rows[v..2 * v];
        for (a, b) in full_last.iter().zip(inc_last) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(cache.len(), 6);
    }

    #[test]
    fn context_overflow_is_reported() {
        let (config, store) = tiny_store(5);
        let model = BaseModel::new(&config, &store);
        let mut tape = Tape::no_grad();
        let tokens: Vec<u32> = vec![1; config.max_seq_len + 1];
        let err = model.forward_full(&mut tape, &tokens).unwrap_err();
        assert!(matches!(err, Error::ContextOverflow { .. }));
    }

    #[test]
    fn rejects_out_of_vocab_token() {
        let (config, store) = tiny_store(6);
        let model = BaseModel::new(&config, &store);
        let mut tape = Tape::no_grad();
        assert!(model.forward_full(&mut tape, &[200]).is_err());
    }
}
