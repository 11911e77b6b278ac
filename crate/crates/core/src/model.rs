//! The hybrid transformer: embedding, the layer stack from [`build_layout`],
//! final norm and an untied output head.
//!
//! Each layer is pre-norm with RMS normalization:
//!
//! ```text
//! x += W_o · attend(rope(W_q·n), rope(W_k·n), W_v·n)   n = rms(x)
//! x += ffn(rms(x))
//! ```
//!
//! Two execution paths exist. [`HybridModel::forward_full`] recomputes every
//! projection for the whole sequence with no cache. The decode path
//! ([`HybridModel::forward_chunk`] / [`HybridModel::commit`]) reads keys and
//! values from per-layer caches. Both feed `attend` the same operands in the
//! same order, so they agree to the last bit.

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::attention::{
    attend, causal_range, rope_in_place, swa_window, AttentionError, AttentionHeadState,
    AttentionInputs, HeadShape,
};
use crate::config::{build_layout, ConfigError, LayerKind, ModelConfig};
use crate::kvcache::{CacheError, GlobalKvCache, KvEntry, LayerCache, WindowKvCache};
use crate::linalg::{add_assign, argmax, entropy_from_logits, rms_norm, Matrix};
use crate::moe::{FeedForward, FeedForwardNet, LayerRecord, MoeError, MoeLayer, RouterState, RoutingRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input")]
    Empty,
    #[error("session does not match this model: {0}")]
    SessionMismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

/// Projections, sinks and rotary settings of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub shape: HeadShape,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// One learnable sink bias per query head.
    pub sinks: Vec<f64>,
    pub rope_base: f64,
    pub rope_rot_dims: usize,
    /// `Some(W)` for sliding-window layers, `None` for global.
    pub window: Option<usize>,
}

impl AttentionParams {
    fn random(
        hidden: usize,
        shape: HeadShape,
        rope_base: f64,
        rope_rot_dims: usize,
        window: Option<usize>,
        std: f64,
        seed: u64,
        stream: u64,
    ) -> Self {
        Self {
            wq: Matrix::randn(shape.q_heads * shape.head_dim_qk, hidden, std, seed, stream),
            wk: Matrix::randn(shape.kv_heads * shape.head_dim_qk, hidden, std, seed, stream + 1),
            wv: Matrix::randn(shape.kv_heads * shape.head_dim_v, hidden, std, seed, stream + 2),
            wo: Matrix::randn(hidden, shape.q_heads * shape.head_dim_v, std, seed, stream + 3),
            sinks: vec![0.0; shape.q_heads],
            shape,
            rope_base,
            rope_rot_dims,
            window,
        }
    }

    pub fn head_states(&self) -> Vec<AttentionHeadState> {
        self.sinks
            .iter()
            .map(|&sink| AttentionHeadState {
                sink,
                head_dim_qk: self.shape.head_dim_qk,
            })
            .collect()
    }

    /// Query, post-RoPE key and value rows for a normalized input at `pos`.
    pub fn project(&self, normed: &[f64], pos: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AttentionError> {
        let qk = self.shape.head_dim_qk;
        let mut q = self.wq.matvec(normed);
        let mut k = self.wk.matvec(normed);
        for head in q.chunks_mut(qk).chain(k.chunks_mut(qk)) {
            rope_in_place(head, pos, self.rope_base, self.rope_rot_dims)?;
        }
        Ok((q, k, self.wv.matvec(normed)))
    }

    pub fn mask_for(&self, pos: usize, mode: MaskMode) -> RangeInclusive<usize> {
        match (self.window, mode) {
            (Some(w), MaskMode::Native) => swa_window(pos, w),
            _ => causal_range(pos),
        }
    }

    pub fn new_cache(&self) -> LayerCache {
        match self.window {
            Some(w) => LayerCache::Window(WindowKvCache::new(w)),
            None => LayerCache::Global(GlobalKvCache::new()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len() + self.wo.len() + self.sinks.len()
    }
}

/// How sliding-window layers mask keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Sliding-window layers see their window, global layers everything.
    #[default]
    Native,
    /// Every layer sees the full causal prefix.
    FullCausal,
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub attn: AttentionParams,
    pub ffn_norm: Vec<f64>,
    pub ffn: FeedForward,
}

/// New cache entries produced by one block over a chunk.
pub type PendingKv = Vec<KvEntry>;

impl Block {
    /// Cache-free pass over a whole sequence starting at position 0.
    pub fn forward_full(
        &self,
        x: &mut [Vec<f64>],
        mode: MaskMode,
        replay: Option<&[crate::moe::TokenRouting]>,
    ) -> Result<Vec<crate::moe::TokenRouting>, ModelError> {
        let mut qs = Vec::with_capacity(x.len());
        let mut ks = Vec::with_capacity(x.len());
        let mut vs = Vec::with_capacity(x.len());
        for (pos, h) in x.iter().enumerate() {
            let (q, k, v) = self.attn.project(&rms_norm(h, &self.attn_norm), pos)?;
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        let positions: Vec<usize> = (0..x.len()).collect();
        let masks: Vec<_> = positions.iter().map(|&p| self.attn.mask_for(p, mode)).collect();
        let inputs = AttentionInputs {
            shape: self.attn.shape,
            queries: qs.iter().map(Vec::as_slice).collect(),
            query_positions: positions.clone(),
            keys: ks.iter().map(Vec::as_slice).collect(),
            values: vs.iter().map(Vec::as_slice).collect(),
            key_positions: positions,
        };
        let attn = attend(&inputs, &self.attn.head_states(), &masks)?;
        self.finish(x, &attn, replay)
    }

    /// Cached pass over tokens at `start..start + x.len()`. The cache is only
    /// read; the new entries are returned for the caller to commit.
    pub fn forward_cached(
        &self,
        x: &mut [Vec<f64>],
        cache: &LayerCache,
        start: usize,
        replay: Option<&[crate::moe::TokenRouting]>,
    ) -> Result<(PendingKv, Vec<crate::moe::TokenRouting>), ModelError> {
        let mut qs = Vec::with_capacity(x.len());
        let mut pending = Vec::with_capacity(x.len());
        for (t, h) in x.iter().enumerate() {
            let pos = start + t;
            let (q, k, v) = self.attn.project(&rms_norm(h, &self.attn_norm), pos)?;
            qs.push(q);
            pending.push(KvEntry {
                position: pos,
                key: k,
                value: v,
            });
        }
        let cached = cache.gather(start)?;
        let all: Vec<&KvEntry> = cached.into_iter().chain(pending.iter()).collect();
        let query_positions: Vec<usize> = (start..start + x.len()).collect();
        let masks: Vec<_> = query_positions
            .iter()
            .map(|&p| self.attn.mask_for(p, MaskMode::Native))
            .collect();
        let inputs = AttentionInputs {
            shape: self.attn.shape,
            queries: qs.iter().map(Vec::as_slice).collect(),
            query_positions,
            keys: all.iter().map(|e| e.key.as_slice()).collect(),
            values: all.iter().map(|e| e.value.as_slice()).collect(),
            key_positions: all.iter().map(|e| e.position).collect(),
        };
        let attn = attend(&inputs, &self.attn.head_states(), &masks)?;
        let routing = self.finish(x, &attn, replay)?;
        Ok((pending, routing))
    }

    fn finish(
        &self,
        x: &mut [Vec<f64>],
        attn: &[Vec<f64>],
        replay: Option<&[crate::moe::TokenRouting]>,
    ) -> Result<Vec<crate::moe::TokenRouting>, ModelError> {
        for (h, o) in x.iter_mut().zip(attn) {
            add_assign(h, &self.attn.wo.matvec(o));
        }
        let normed: Vec<Vec<f64>> = x.iter().map(|h| rms_norm(h, &self.ffn_norm)).collect();
        let (out, routing) = self.ffn.forward(&normed, replay)?;
        for (h, o) in x.iter_mut().zip(&out) {
            add_assign(h, o);
        }
        Ok(routing)
    }

    pub fn param_count(&self) -> usize {
        let ffn = match &self.ffn {
            FeedForward::Dense(f) => f.param_count(),
            FeedForward::Moe(m) => {
                m.router.gate_weights.len() + m.experts.iter().map(|e| e.param_count()).sum::<usize>()
            }
        };
        self.attn_norm.len() + self.attn.param_count() + self.ffn_norm.len() + ffn
    }
}

/// The full hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub layout: Vec<LayerKind>,
    /// `vocab × hidden`.
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    /// `vocab × hidden`, untied from the embedding.
    pub head: Matrix,
}

/// Output of a cache-free forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Residual stream after each block, when requested.
    pub layer_hidden: Option<Vec<Vec<Vec<f64>>>>,
    /// Residual stream after the last block (before the final norm).
    pub final_hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub routing: RoutingRecord,
    /// Entropy in nats of each row's output distribution.
    pub entropy: Vec<f64>,
}

/// Options for [`HybridModel::forward_full_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mask: MaskMode,
    pub replay: Option<&'a RoutingRecord>,
    pub keep_layer_hidden: bool,
}

/// Per-layer caches for one decode stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSession {
    pub caches: Vec<LayerCache>,
    pub next_position: usize,
    /// Residual stream at the last committed position.
    pub last_hidden: Option<Vec<f64>>,
}

/// Result of a cached forward over new tokens, not yet committed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutput {
    pub start: usize,
    pub logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    pub pending: Vec<PendingKv>,
    pub routing: RoutingRecord,
}

impl ChunkOutput {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Greedy token after each chunk position.
    pub fn argmax(&self) -> Vec<u32> {
        self.logits.iter().map(|l| argmax(l) as u32).collect()
    }
}

/// Single-token decode result.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub entropy: f64,
    pub routing: RoutingRecord,
}

/// Closed-form parameter totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: u64,
    pub active: u64,
    pub mtp_block: u64,
}

impl HybridModel {
    /// Builds a model with every weight drawn from `N(0, init_std²)` on a
    /// ChaCha stream keyed by `seed`; sinks start at 0 and norm gains at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let std = c.init_std;
        let layout = build_layout(c);
        let mut stream = 0u64;
        let mut next = |n: u64| {
            let s = stream;
            stream += n;
            s
        };
        let embedding = Matrix::randn(c.vocab_size, c.hidden_dim, std, seed, next(1));
        let head = Matrix::randn(c.vocab_size, c.hidden_dim, std, seed, next(1));
        let mut blocks = Vec::with_capacity(layout.len());
        for &kind in &layout {
            let (q_heads, kv_heads) = c.heads_for(kind);
            let shape = HeadShape {
                q_heads,
                kv_heads,
                head_dim_qk: c.head_dim_qk,
                head_dim_v: c.head_dim_v,
            };
            let window = (!kind.is_global()).then_some(c.window);
            let attn = AttentionParams::random(
                c.hidden_dim,
                shape,
                c.rope_base_for(kind),
                c.rope_rot_dims,
                window,
                std,
                seed,
                next(4),
            );
            let ffn = if kind.is_moe() {
                let router = RouterState::new(Matrix::randn(c.num_experts, c.hidden_dim, std, seed, next(1)));
                let experts = (0..c.num_experts)
                    .map(|_| FeedForwardNet::random(c.hidden_dim, c.expert_hidden_dim, std, seed, next(3)))
                    .collect();
                FeedForward::Moe(MoeLayer {
                    router,
                    experts,
                    experts_per_token: c.experts_per_token,
                })
            } else {
                FeedForward::Dense(FeedForwardNet::random(
                    c.hidden_dim,
                    c.dense_ffn_hidden_dim,
                    std,
                    seed,
                    next(3),
                ))
            };
            blocks.push(Block {
                attn_norm: vec![1.0; c.hidden_dim],
                attn,
                ffn_norm: vec![1.0; c.hidden_dim],
                ffn,
            });
        }
        Ok(Self {
            config: c.clone(),
            layout,
            embedding,
            blocks,
            final_norm: vec![1.0; c.hidden_dim],
            head,
        })
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f64>, ModelError> {
        if token as usize >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(self.embedding.row(token as usize).to_vec())
    }

    /// Logits for a residual-stream vector.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.head.matvec(&rms_norm(hidden, &self.final_norm))
    }

    pub fn forward_full(&self, tokens: &[u32]) -> Result<ForwardTrace, ModelError> {
        self.forward_full_with(tokens, ForwardOptions::default())
    }

    /// Cache-free causal forward over `tokens` at positions `0..len`.
    pub fn forward_full_with(&self, tokens: &[u32], opts: ForwardOptions<'_>) -> Result<ForwardTrace, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        self.check_len(tokens.len())?;
        let mut x = tokens.iter().map(|&t| self.embed(t)).collect::<Result<Vec<_>, _>>()?;
        let mut record = RoutingRecord::new(self.config.experts_per_token);
        let mut layer_hidden = opts.keep_layer_hidden.then(Vec::new);
        for (l, block) in self.blocks.iter().enumerate() {
            let replay = replay_rows(opts.replay, l, tokens.len())?;
            let routing = block.forward_full(&mut x, opts.mask, replay)?;
            if self.layout[l].is_moe() {
                record.layers.push(LayerRecord { layer: l, tokens: routing });
            }
            if let Some(hs) = layer_hidden.as_mut() {
                hs.push(x.clone());
            }
        }
        let logits: Vec<Vec<f64>> = x.iter().map(|h| self.logits(h)).collect();
        let entropy = logits.iter().map(|l| entropy_from_logits(l)).collect();
        Ok(ForwardTrace {
            layer_hidden,
            final_hidden: x,
            logits,
            routing: record,
            entropy,
        })
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    pub fn new_session(&self) -> DecodeSession {
        DecodeSession {
            caches: self.blocks.iter().map(|b| b.attn.new_cache()).collect(),
            next_position: 0,
            last_hidden: None,
        }
    }

    fn check_session(&self, session: &DecodeSession) -> Result<(), ModelError> {
        if session.caches.len() != self.blocks.len() {
            return Err(ModelError::SessionMismatch(format!(
                "{} caches for {} layers",
                session.caches.len(),
                self.blocks.len()
            )));
        }
        for (l, (cache, block)) in session.caches.iter().zip(&self.blocks).enumerate() {
            let kind_ok = matches!(
                (cache, block.attn.window),
                (LayerCache::Window(c), Some(w)) if c.capacity() == w
            ) || matches!((cache, block.attn.window), (LayerCache::Global(_), None));
            if !kind_ok {
                return Err(ModelError::SessionMismatch(format!("layer {l} cache kind")));
            }
            let expected = session.next_position.checked_sub(1);
            if cache.newest_position() != expected {
                return Err(ModelError::SessionMismatch(format!(
                    "layer {l} holds up to {:?}, prefix ends at {:?}",
                    cache.newest_position(),
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Runs `tokens` after the session's committed prefix without changing
    /// the session.
    pub fn forward_chunk(
        &self,
        session: &DecodeSession,
        tokens: &[u32],
        replay: Option<&RoutingRecord>,
    ) -> Result<ChunkOutput, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        self.check_session(session)?;
        let start = session.next_position;
        self.check_len(start + tokens.len())?;
        let mut x = tokens.iter().map(|&t| self.embed(t)).collect::<Result<Vec<_>, _>>()?;
        let mut record = RoutingRecord::new(self.config.experts_per_token);
        let mut pending = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let replay = replay_rows(replay, l, tokens.len())?;
            let (p, routing) = block.forward_cached(&mut x, &session.caches[l], start, replay)?;
            pending.push(p);
            if self.layout[l].is_moe() {
                record.layers.push(LayerRecord { layer: l, tokens: routing });
            }
        }
        let logits: Vec<Vec<f64>> = x.iter().map(|h| self.logits(h)).collect();
        let entropy = logits.iter().map(|l| entropy_from_logits(l)).collect();
        Ok(ChunkOutput {
            start,
            logits,
            hidden: x,
            entropy,
            pending,
            routing: record,
        })
    }

    /// Appends the first `count` positions of `chunk` to the session caches.
    pub fn commit(&self, session: &mut DecodeSession, chunk: &ChunkOutput, count: usize) -> Result<(), ModelError> {
        if chunk.start != session.next_position || count > chunk.len() {
            return Err(ModelError::SessionMismatch(format!(
                "chunk starts at {} (len {}), session at {}, commit {count}",
                chunk.start,
                chunk.len(),
                session.next_position
            )));
        }
        if count == 0 {
            return Ok(());
        }
        for (cache, pending) in session.caches.iter_mut().zip(&chunk.pending) {
            for entry in &pending[..count] {
                cache.append(entry.clone())?;
            }
        }
        session.next_position += count;
        session.last_hidden = Some(chunk.hidden[count - 1].clone());
        Ok(())
    }

    /// Feeds a prompt into a fresh or existing session and commits it.
    pub fn prefill(&self, session: &mut DecodeSession, tokens: &[u32]) -> Result<ChunkOutput, ModelError> {
        let chunk = self.forward_chunk(session, tokens, None)?;
        self.commit(session, &chunk, tokens.len())?;
        Ok(chunk)
    }

    /// One cached decode step: feeds `token` and returns the next-token logits.
    pub fn decode_step(
        &self,
        session: &mut DecodeSession,
        token: u32,
        replay: Option<&RoutingRecord>,
    ) -> Result<StepOutput, ModelError> {
        let chunk = self.forward_chunk(session, &[token], replay)?;
        self.commit(session, &chunk, 1)?;
        let ChunkOutput {
            mut logits,
            mut hidden,
            entropy,
            routing,
            ..
        } = chunk;
        Ok(StepOutput {
            logits: logits.pop().unwrap_or_default(),
            hidden: hidden.pop().unwrap_or_default(),
            entropy: entropy[0],
            routing,
        })
    }

    /// Plain greedy decoding: returns `max_new` tokens following `prompt`.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        let mut session = self.new_session();
        let chunk = self.prefill(&mut session, prompt)?;
        let mut out = Vec::with_capacity(max_new);
        let mut next = argmax(chunk.logits.last().unwrap()) as u32;
        while out.len() < max_new {
            out.push(next);
            if out.len() == max_new {
                break;
            }
            let step = self.decode_step(&mut session, next, None)?;
            next = argmax(&step.logits) as u32;
        }
        Ok(out)
    }

    /// Number of stored parameters, counted tensor by tensor.
    pub fn param_count(&self) -> usize {
        self.embedding.len()
            + self.head.len()
            + self.final_norm.len()
            + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    /// All randomly initialized weights (norm gains and sinks excluded).
    pub fn random_weights(&self) -> impl Iterator<Item = f64> + '_ {
        let mut mats: Vec<&Matrix> = vec![&self.embedding, &self.head];
        for b in &self.blocks {
            mats.extend([&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo]);
            match &b.ffn {
                FeedForward::Dense(f) => mats.extend([&f.gate, &f.up, &f.down]),
                FeedForward::Moe(m) => {
                    mats.push(&m.router.gate_weights);
                    for e in &m.experts {
                        mats.extend([&e.gate, &e.up, &e.down]);
                    }
                }
            }
        }
        mats.into_iter().flat_map(|m| m.data.iter().copied())
    }
}

fn replay_rows(
    replay: Option<&RoutingRecord>,
    layer: usize,
    tokens: usize,
) -> Result<Option<&[crate::moe::TokenRouting]>, ModelError> {
    let Some(rec) = replay else { return Ok(None) };
    match rec.layer(layer) {
        Some(l) if l.tokens.len() == tokens => Ok(Some(&l.tokens)),
        Some(l) => Err(MoeError::ReplayShape(format!(
            "layer {layer}: {} recorded tokens for {tokens} inputs",
            l.tokens.len()
        ))
        .into()),
        None => Ok(None),
    }
}

fn attention_count(c: &ModelConfig, q_heads: usize, kv_heads: usize) -> u64 {
    let h = c.hidden_dim as u64;
    let (qk, v) = (c.head_dim_qk as u64, c.head_dim_v as u64);
    let (qh, kvh) = (q_heads as u64, kv_heads as u64);
    h * qh * qk + h * kvh * qk + h * kvh * v + qh * v * h + qh
}

/// Parameter totals from the config alone. The MTP figure covers one draft
/// head (fuser, SWA attention, dense FFN, norms) and excludes the embedding
/// and output head it shares with the main model.
pub fn count_params(c: &ModelConfig) -> ParamCounts {
    let h = c.hidden_dim as u64;
    let layout = build_layout(c);
    let expert = 3 * h * c.expert_hidden_dim as u64;
    let dense = 3 * h * c.dense_ffn_hidden_dim as u64;
    let shared = 2 * c.vocab_size as u64 * h + h;
    let (mut total, mut active) = (shared, shared);
    for kind in layout {
        let (qh, kvh) = c.heads_for(kind);
        let base = attention_count(c, qh, kvh) + 2 * h;
        total += base;
        active += base;
        if kind.is_moe() {
            let router = c.num_experts as u64 * h;
            total += router + c.num_experts as u64 * expert;
            active += router + c.experts_per_token as u64 * expert;
        } else {
            total += dense;
            active += dense;
        }
    }
    let mtp_block = 2 * h * h + 2 * h + attention_count(c, c.swa_q_heads, c.swa_kv_heads) + 2 * h + dense + h;
    ParamCounts {
        total,
        active,
        mtp_block,
    }
}
