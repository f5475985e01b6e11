//! The decoding loop: draft → CTC transform → single-pass tree verification
//! → acceptance → cache update.
//!
//! Greedy mode walks the trie against the base model's argmax at each node
//! and always commits at least one token (the bonus from the deepest
//! accepted node), so output is token-identical to plain autoregressive
//! greedy decoding no matter what the draft proposes. Sampling mode verifies
//! the single best collapsed candidate chain with the standard
//! accept/residual rule, drawing each proposal from the collapsed-prefix
//! marginals so the emitted law matches the base model's.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::collapsed_prefix_marginals;
use crate::error::{Error, Result};
use crate::model::base::{extract_kv, BaseModel, KvCache, Mask};
use crate::model::draft::{DraftModule, SlotGrid};
use crate::model::{ModelConfig, Vocab};
use crate::pipeline::{build_trie, ctc_transform, enumerate_paths, topk_per_slot, DraftTrie};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Per-run decoding knobs. Defaults follow the desk-scale tuning: k=3
/// tokens per slot, 16 candidate paths, collapse on.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub k: usize,
    pub beam: usize,
    pub mode: DecodeMode,
    /// Applied to base logits in sampling mode only.
    pub temperature: f64,
    /// CTC transform on/off (off = verify raw alignments, the ablation).
    pub collapse: bool,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 3,
            beam: 16,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            collapse: true,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

/// A base model plus (optionally) its draft module, frozen for decoding.
/// Safe to share across concurrent sessions behind `Arc`.
pub struct Engine<S: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
    pub use_draft: bool,
}

impl<S: Scalar> Engine<S> {
    pub fn new(config: ModelConfig, params: ParamStore<S>, use_draft: bool) -> Result<Self> {
        config.validate()?;
        if use_draft && params.get("draft.slot_emb").is_none() {
            return Err(Error::InvalidConfig(
                "engine configured to draft but no draft parameters present".into(),
            ));
        }
        let vocab = Vocab::for_config(&config);
        Ok(Engine {
            config,
            vocab,
            params,
            use_draft,
        })
    }

    /// Fresh random weights; tests and the sampling-equivalence suite.
    pub fn random(config: ModelConfig, seed: u64, with_draft: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        crate::model::base::init_base_params(&config, &mut rng, &mut params);
        if with_draft {
            crate::model::draft::init_draft_params(&config, &mut rng, &mut params);
        }
        Engine::new(config, params, with_draft)
    }

    fn base(&self) -> BaseModel<'_, S> {
        BaseModel::new(&self.config, &self.params)
    }

    fn draft(&self) -> DraftModule<'_, S> {
        DraftModule::new(&self.config, &self.params)
    }
}

/// Wall time per pipeline stage, seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimers {
    pub base_forward: f64,
    pub draft_forward: f64,
    pub ctc_transform: f64,
    pub tree_verify: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Active,
    Finished,
    /// Context length exhausted; output is truncated.
    Overflow,
}

/// Outcome of one decode step.
#[derive(Debug, Clone)]
pub struct AcceptanceResult {
    /// Committed tokens, oldest first; always at least one (the bonus).
    pub accepted_tokens: Vec<u32>,
    /// Trie node of the deepest accepted draft token, if any.
    pub accepted_node: Option<usize>,
    /// Whether the walk stopped on a mismatch rather than running off the
    /// end of the drafted candidates.
    pub rejected: bool,
}

/// One in-flight decoding stream over a frozen engine.
pub struct DecodeSession<'e, S: Scalar> {
    engine: &'e Engine<S>,
    decode: DecodeConfig,
    committed: Vec<u32>,
    prompt_len: usize,
    cache: KvCache<S>,
    /// Post-ln_f hidden rows for every committed position (draft input).
    hidden: Vec<S>,
    /// Draft-module projected K/V rows per committed position.
    draft_k: Vec<S>,
    draft_v: Vec<S>,
    /// Base logits at the last committed position.
    last_logits: Vec<S>,
    status: SessionStatus,
    steps: usize,
    emitted: usize,
    timers: StageTimers,
    rng: ChaCha8Rng,
}

fn argmax_committed<S: Scalar>(logits: &[S], blank: u32) -> u32 {
    let mut best = 0u32;
    let mut best_v = S::neg_infinity();
    for (i, &v) in logits.iter().enumerate() {
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

/// Base output distribution: softmax over logits with the blank excluded
/// (the blank is a draft-side symbol and is never committed).
fn base_distribution<S: Scalar>(logits: &[S], temperature: f64, blank: u32) -> Vec<f64> {
    let inv_t = 1.0 / temperature.max(1e-6);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 != blank {
            max = max.max(v.as_f64() * inv_t);
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 == blank {
            continue;
        }
        let e = (v.as_f64() * inv_t - max).exp();
        out[i] = e;
        sum += e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // numerical slack: last nonzero entry
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Standard lossless acceptance: accept iff u < min(1, p/q). The caller
/// guarantees q > 0 for any proposed token.
pub fn accept_token(p_base: f64, q_draft: f64, u: f64) -> bool {
    assert!(q_draft > 0.0, "drafted token must have positive draft probability");
    u < (p_base / q_draft).min(1.0)
}

/// norm(max(0, P − Q)); falls back to P when the residual carries no mass.
pub fn residual_distribution(p_base: &[f64], q_draft: &[f64]) -> Vec<f64> {
    let mut residual: Vec<f64> = p_base
        .iter()
        .zip(q_draft)
        .map(|(&p, &q)| (p - q).max(0.0))
        .collect();
    let mass: f64 = residual.iter().sum();
    if mass < 1e-12 {
        return p_base.to_vec();
    }
    for v in residual.iter_mut() {
        *v /= mass;
    }
    residual
}

/// Greedy trie walk: at each node the expected token is the base argmax; a
/// matching child extends the path, the first mismatch stops it and the
/// expected token itself is committed as the bonus.
pub fn greedy_accept<S: Scalar>(
    trie: &DraftTrie,
    root_logits: &[S],
    node_logits: &[S],
    vocab: usize,
    blank: u32,
) -> AcceptanceResult {
    let mut accepted_tokens = Vec::new();
    let mut node: Option<usize> = None;
    let mut logits = root_logits;
    loop {
        let expected = argmax_committed(logits, blank);
        match trie.child_with_token(node, expected) {
            Some(child) => {
                accepted_tokens.push(expected);
                node = Some(child);
                logits = &node_logits[child * vocab..(child + 1) * vocab];
            }
            None => {
                let rejected = match node {
                    Some(n) => !trie.nodes[n].children.is_empty(),
                    None => !trie.roots.is_empty(),
                };
                accepted_tokens.push(expected);
                return AcceptanceResult {
                    accepted_tokens,
                    accepted_node: node,
                    rejected,
                };
            }
        }
    }
}

/// Sampling-mode verification of the best collapsed candidate chain.
///
/// Each position draws a proposal from the collapsed-prefix marginals
/// (renormalized over actual tokens), accepts with min(1, p/q), and on
/// rejection commits one token from the residual distribution. An accepted
/// proposal that leaves the precomputed chain ends the step after that
/// token (its continuation logits do not exist in the batch). Every emitted
/// token is distributed exactly as the base model's, so sampling stays
/// lossless.
#[allow(clippy::too_many_arguments)]
pub fn sample_accept_path<S: Scalar>(
    trie: &DraftTrie,
    best_leaf: usize,
    anchor_rows: &[f64],
    root_logits: &[S],
    node_logits: &[S],
    vocab: usize,
    blank: u32,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> AcceptanceResult {
    let chain = trie.path_to(best_leaf);
    let mut accepted_tokens: Vec<u32> = Vec::new();
    let mut prefix: Vec<u32> = Vec::new();
    let mut node: Option<usize> = None;
    let mut logits = root_logits;

    for &chain_node in &chain {
        let Ok((marginals, end_mass)) =
            collapsed_prefix_marginals(anchor_rows, vocab, &prefix, blank)
        else {
            break;
        };
        let token_mass = 1.0 - end_mass;
        if token_mass < 1e-12 {
            break; // draft says the collapsed output ends here
        }
        let q: Vec<f64> = marginals.iter().map(|&v| v / token_mass).collect();
        let proposal = sample_index(&q, rng) as u32;
        let p = base_distribution(logits, temperature, blank);
        let u: f64 = rng.gen();
        if accept_token(p[proposal as usize], q[proposal as usize], u) {
            accepted_tokens.push(proposal);
            prefix.push(proposal);
            if trie.nodes[chain_node].token == proposal {
                node = Some(chain_node);
                logits = &node_logits[chain_node * vocab..(chain_node + 1) * vocab];
            } else {
                // accepted but off the precomputed chain: step ends here
                return AcceptanceResult {
                    accepted_tokens,
                    accepted_node: node,
                    rejected: false,
                };
            }
        } else {
            let residual = residual_distribution(&p, &q);
            accepted_tokens.push(sample_index(&residual, rng) as u32);
            return AcceptanceResult {
                accepted_tokens,
                accepted_node: node,
                rejected: true,
            };
        }
    }

    // Chain fully accepted (or drafting ended): bonus from the base
    // distribution at the deepest node reached.
    let p = base_distribution(logits, temperature, blank);
    accepted_tokens.push(sample_index(&p, rng) as u32);
    AcceptanceResult {
        accepted_tokens,
        accepted_node: node,
        rejected: false,
    }
}

impl<'e, S: Scalar> DecodeSession<'e, S> {
    /// Forwards the prompt and primes the cache. The prompt must be
    /// non-empty and fit the context window.
    pub fn start(engine: &'e Engine<S>, prompt: &[u32], decode: DecodeConfig) -> Result<Self> {
        assert!(!prompt.is_empty(), "prompt must be non-empty");
        let seed = decode.seed;
        let mut session = DecodeSession {
            engine,
            decode,
            committed: Vec::new(),
            prompt_len: prompt.len(),
            cache: KvCache::new(&engine.config),
            hidden: Vec::new(),
            draft_k: Vec::new(),
            draft_v: Vec::new(),
            last_logits: Vec::new(),
            status: SessionStatus::Active,
            steps: 0,
            emitted: 0,
            timers: StageTimers::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        session.forward_committed(prompt)?;
        session.committed.extend_from_slice(prompt);
        Ok(session)
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    /// Tokens committed after the prompt.
    pub fn output(&self) -> &[u32] {
        &self.committed[self.prompt_len..]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn timers(&self) -> StageTimers {
        self.timers
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Base logits at the last committed position (blank included).
    pub fn last_logits(&self) -> &[S] {
        &self.last_logits
    }

    /// Incremental causal forward of `tokens` at the next positions;
    /// appends KV, hidden and draft-KV rows and refreshes `last_logits`.
    fn forward_committed(&mut self, tokens: &[u32]) -> Result<()> {
        let t0 = Instant::now();
        let base = self.engine.base();
        let start = self.cache.len();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut tape = Tape::no_grad();
        let out = base.forward(&mut tape, tokens, &positions, Some(&self.cache), Mask::Causal)?;
        let logits = tape.value(out.logits);
        let v = self.engine.config.vocab_size;
        self.last_logits = logits[logits.len() - v..].to_vec();
        let hidden = tape.value(out.hidden).to_vec();
        let (k, vv) = extract_kv(&tape, &out);
        drop(tape);
        self.cache.append(&k, &vv);
        self.push_hidden(&hidden);
        self.timers.base_forward += t0.elapsed().as_secs_f64();
        Ok(())
    }

    fn push_hidden(&mut self, hidden_rows: &[S]) {
        let d = self.engine.config.d_model;
        if self.engine.use_draft {
            let draft = self.engine.draft();
            for row in hidden_rows.chunks(d) {
                let (k, v) = draft.project_kv_row(row);
                self.draft_k.extend(k);
                self.draft_v.extend(v);
            }
        }
        self.hidden.extend_from_slice(hidden_rows);
    }

    /// Draft slot distributions at the last committed position.
    fn draft_grid(&mut self) -> Result<SlotGrid<S>> {
        let t0 = Instant::now();
        let d = self.engine.config.d_model;
        let draft = self.engine.draft();
        let anchor = self.committed.len() - 1;
        let anchor_hidden = &self.hidden[anchor * d..(anchor + 1) * d];
        let mut tape = Tape::no_grad();
        let grid = draft.forward_cached(&mut tape, anchor_hidden, &self.draft_k, &self.draft_v)?;
        let grid = draft.grid_from(&tape, grid, 1);
        self.timers.draft_forward += t0.elapsed().as_secs_f64();
        Ok(grid)
    }

    /// Commits tokens accepted along trie nodes by remapping their verify
    /// rows into the cache, then forwards the trailing non-node token (the
    /// bonus or an off-chain accepted sample), which refreshes the last
    /// logits. EOS inside the accepted tokens finishes the session.
    fn commit(
        &mut self,
        result: &AcceptanceResult,
        trie: &DraftTrie,
        verify: Option<&VerifyValues<S>>,
    ) -> Result<Vec<u32>> {
        let eos = self.engine.vocab.eos;
        let mut tokens = result.accepted_tokens.clone();
        if let Some(pos) = tokens.iter().position(|&t| t == eos) {
            tokens.truncate(pos + 1);
            self.status = SessionStatus::Finished;
        }

        // Path nodes covered by the (possibly truncated) commit list.
        let path = result
            .accepted_node
            .map(|n| trie.path_to(n))
            .unwrap_or_default();
        let n_node_tokens = path.len().min(tokens.len());
        if n_node_tokens > 0 {
            let verify = verify.expect("accepted nodes require verify values");
            let d = self.engine.config.d_model;
            let rows = &path[..n_node_tokens];
            self.cache.append_rows(&verify.k, &verify.v, rows);
            let mut hidden = Vec::with_capacity(n_node_tokens * d);
            for &r in rows {
                hidden.extend_from_slice(&verify.hidden[r * d..(r + 1) * d]);
            }
            self.push_hidden(&hidden);
            self.committed.extend_from_slice(&tokens[..n_node_tokens]);
            // Refresh last logits from the deepest committed node so a
            // Finished session still reports a consistent state.
            let v = self.engine.config.vocab_size;
            let last = rows[n_node_tokens - 1];
            self.last_logits = verify.logits[last * v..(last + 1) * v].to_vec();
        }

        for &tok in &tokens[n_node_tokens..] {
            self.forward_committed(&[tok])?;
            self.committed.push(tok);
        }

        self.emitted += tokens.len();
        self.steps += 1;
        Ok(tokens)
    }

    /// Base-only step: one token from the last logits.
    fn fallback_step(&mut self) -> Result<Vec<u32>> {
        let blank = self.engine.vocab.blank;
        let token = match self.decode.mode {
            DecodeMode::Greedy => argmax_committed(&self.last_logits, blank),
            DecodeMode::Sample => {
                let p = base_distribution(&self.last_logits, self.decode.temperature, blank);
                sample_index(&p, &mut self.rng) as u32
            }
        };
        let result = AcceptanceResult {
            accepted_tokens: vec![token],
            accepted_node: None,
            rejected: false,
        };
        self.commit(&result, &EMPTY_TRIE, None)
    }

    /// One full decode step. Returns the tokens committed by this step.
    pub fn decode_step(&mut self) -> Result<Vec<u32>> {
        assert_eq!(
            self.status,
            SessionStatus::Active,
            "decode_step on a finished session"
        );
        debug_assert_eq!(self.cache.len(), self.committed.len());

        let max_seq = self.engine.config.max_seq_len;
        if self.committed.len() >= max_seq {
            self.status = SessionStatus::Overflow;
            return Err(Error::ContextOverflow {
                requested: self.committed.len() + 1,
                max_seq_len: max_seq,
            });
        }

        let slots = self.engine.config.slots;
        let room_for_tree = self.committed.len() + slots < max_seq;
        if !self.engine.use_draft || !room_for_tree {
            return self.fallback_step();
        }

        let grid = self.draft_grid()?;
        let anchor_rows = grid.anchor_rows_f64(0);

        let t0 = Instant::now();
        let per_slot = topk_per_slot(&anchor_rows, grid.vocab, self.decode.k);
        let paths = enumerate_paths(&per_slot, self.decode.beam, self.engine.vocab.blank);
        let candidates = ctc_transform(paths, self.decode.collapse);
        self.timers.ctc_transform += t0.elapsed().as_secs_f64();

        if candidates.is_empty() {
            return self.fallback_step();
        }
        let trie = {
            let t1 = Instant::now();
            let trie = build_trie(&candidates, self.committed.len());
            self.timers.ctc_transform += t1.elapsed().as_secs_f64();
            trie
        };

        let verify = self.tree_verify(&trie)?;
        let vocab = self.engine.config.vocab_size;
        let blank = self.engine.vocab.blank;
        let result = match self.decode.mode {
            DecodeMode::Greedy => {
                greedy_accept(&trie, &self.last_logits, &verify.logits, vocab, blank)
            }
            DecodeMode::Sample => {
                let best_leaf = trie
                    .nodes
                    .iter()
                    .position(|n| n.candidate_end == Some(0))
                    .expect("best candidate has an end node");
                sample_accept_path(
                    &trie,
                    best_leaf,
                    &anchor_rows,
                    &self.last_logits,
                    &verify.logits,
                    vocab,
                    blank,
                    self.decode.temperature,
                    &mut self.rng,
                )
            }
        };
        self.commit(&result, &trie, Some(&verify))
    }

    fn tree_verify(&mut self, trie: &DraftTrie) -> Result<VerifyValues<S>> {
        let t0 = Instant::now();
        let base = self.engine.base();
        let mask = trie.additive_mask::<S>();
        let tokens = trie.tokens();
        let positions = trie.positions();
        let mut tape = Tape::no_grad();
        let out = base.forward(
            &mut tape,
            &tokens,
            &positions,
            Some(&self.cache),
            Mask::Explicit(&mask),
        )?;
        let values = VerifyValues {
            logits: tape.value(out.logits).to_vec(),
            hidden: tape.value(out.hidden).to_vec(),
            k: out.new_k.iter().map(|&v| tape.value(v).to_vec()).collect(),
            v: out.new_v.iter().map(|&v| tape.value(v).to_vec()).collect(),
        };
        self.timers.tree_verify += t0.elapsed().as_secs_f64();
        Ok(values)
    }
}

static EMPTY_TRIE: std::sync::LazyLock<DraftTrie> = std::sync::LazyLock::new(|| DraftTrie {
    nodes: Vec::new(),
    roots: Vec::new(),
    committed_len: 0,
});

struct VerifyValues<S> {
    logits: Vec<S>,
    hidden: Vec<S>,
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

/// Final state of a [`generate`] call.
#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub tokens: Vec<u32>,
    pub steps: usize,
    pub emitted: usize,
    pub wall_seconds: f64,
    pub timers: StageTimers,
    pub truncated_by_overflow: bool,
}

/// Decodes until EOS, the token budget, or context overflow. Output is
/// clipped to `max_new_tokens`.
pub fn generate<S: Scalar>(
    engine: &Engine<S>,
    prompt: &[u32],
    decode: DecodeConfig,
) -> Result<GenerateOutcome> {
    let wall = Instant::now();
    let max_new = decode.max_new_tokens;
    if max_new == 0 {
        return Ok(GenerateOutcome {
            tokens: Vec::new(),
            steps: 0,
            emitted: 0,
            wall_seconds: wall.elapsed().as_secs_f64(),
            timers: StageTimers::default(),
            truncated_by_overflow: false,
        });
    }
    let bos = [engine.vocab.bos];
    let prompt = if prompt.is_empty() { &bos } else { prompt };
    let mut session = DecodeSession::start(engine, prompt, decode)?;
    let mut overflow = false;
    while session.status() == SessionStatus::Active && session.emitted() < max_new {
        match session.decode_step() {
            Ok(_) => {}
            Err(Error::ContextOverflow { .. }) => {
                overflow = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let mut tokens = session.output().to_vec();
    tokens.truncate(max_new);
    Ok(GenerateOutcome {
        emitted: tokens.len(),
        steps: session.steps(),
        wall_seconds: wall.elapsed().as_secs_f64(),
        timers: session.timers(),
        truncated_by_overflow: overflow,
        tokens,
    })
}
