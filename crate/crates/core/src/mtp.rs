//! Multi-token-prediction draft chain and lossless greedy speculative decoding.
//!
//! A chain holds `K` draft heads. Head `t` at position `j` fuses the hidden
//! state that head `t − 1` produced at `j − 1` (head 0 is the main model) with
//! the embedding of token `j`, runs one sliding-window attention block with a
//! dense FFN, and predicts token `j + 1` through the main model's output head.
//! Drafting runs the heads back to back: head 1 consumes the main model's last
//! hidden state and the pending token, head 2 consumes head 1's output and
//! head 1's draft, and so on.
//!
//! Verification feeds the pending token plus all drafts through the main
//! model in one chunk, accepts the longest prefix matching the main model's
//! own argmax, and commits only the accepted positions. The emitted stream is
//! therefore exactly the greedy stream.

use rand::Rng;
use thiserror::Error;

use crate::attention::HeadShape;
use crate::config::ModelConfig;
use crate::kvcache::{LayerCache, WindowKvCache};
use crate::linalg::{argmax, rms_norm, softmax, Matrix};
use crate::model::{AttentionParams, Block, ChunkOutput, DecodeSession, HybridModel, ModelError};
use crate::moe::{FeedForward, FeedForwardNet};

/// Stream offset that keeps draft-head weights apart from main-model weights.
const MTP_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MtpError {
    #[error("entropy must be non-negative, got {0}")]
    NegativeEntropy(f64),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("insufficient spread: need at least 3 distinct positive x values")]
    InsufficientSpread,
    #[error("curve fit did not converge")]
    NoConvergence,
    #[error("accept length must be at least 1, got {0}")]
    AcceptLength(f64),
}

/// One draft head.
#[derive(Debug, Clone, PartialEq)]
pub struct MtpHead {
    pub hidden_norm: Vec<f64>,
    pub embed_norm: Vec<f64>,
    /// `hidden × 2·hidden`, applied to `[norm(h); norm(e)]`.
    pub fuser: Matrix,
    /// Sliding-window attention with a dense FFN.
    pub block: Block,
    pub out_norm: Vec<f64>,
}

impl MtpHead {
    fn random(c: &ModelConfig, seed: u64) -> Self {
        let h = c.hidden_dim;
        let std = c.init_std;
        let shape = HeadShape {
            q_heads: c.swa_q_heads,
            kv_heads: c.swa_kv_heads,
            head_dim_qk: c.head_dim_qk,
            head_dim_v: c.head_dim_v,
        };
        let base = MTP_STREAM_BASE;
        let attn = AttentionParams {
            shape,
            wq: Matrix::randn(shape.q_heads * shape.head_dim_qk, h, std, seed, base + 1),
            wk: Matrix::randn(shape.kv_heads * shape.head_dim_qk, h, std, seed, base + 2),
            wv: Matrix::randn(shape.kv_heads * shape.head_dim_v, h, std, seed, base + 3),
            wo: Matrix::randn(h, shape.q_heads * shape.head_dim_v, std, seed, base + 4),
            sinks: vec![0.0; shape.q_heads],
            rope_base: c.rope_base_swa,
            rope_rot_dims: c.rope_rot_dims,
            window: Some(c.window),
        };
        Self {
            hidden_norm: vec![1.0; h],
            embed_norm: vec![1.0; h],
            fuser: Matrix::randn(h, 2 * h, std, seed, base),
            block: Block {
                attn_norm: vec![1.0; h],
                attn,
                ffn_norm: vec![1.0; h],
                ffn: FeedForward::Dense(FeedForwardNet::random(h, c.dense_ffn_hidden_dim, std, seed, base + 5)),
            },
            out_norm: vec![1.0; h],
        }
    }

    /// `fuser · [norm(hidden); norm(embedding)]`.
    pub fn fuse(&self, hidden: &[f64], embedding: &[f64]) -> Vec<f64> {
        let mut cat = rms_norm(hidden, &self.hidden_norm);
        cat.extend(rms_norm(embedding, &self.embed_norm));
        self.fuser.matvec(&cat)
    }

    pub fn window(&self) -> usize {
        self.block.attn.window.unwrap_or(usize::MAX)
    }

    pub fn param_count(&self) -> usize {
        self.hidden_norm.len() + self.embed_norm.len() + self.fuser.len() + self.block.param_count() + self.out_norm.len()
    }
}

/// `K` chained draft heads sharing the main model's embedding and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftChain {
    pub heads: Vec<MtpHead>,
}

impl DraftChain {
    /// `k` heads replicated from one initialization.
    pub fn replicated(config: &ModelConfig, seed: u64, k: usize) -> Self {
        let head = MtpHead::random(config, seed);
        Self { heads: vec![head; k] }
    }

    pub fn depth(&self) -> usize {
        self.heads.len()
    }

    pub fn new_state(&self) -> ChainState {
        ChainState {
            caches: self
                .heads
                .iter()
                .map(|h| LayerCache::Window(WindowKvCache::new(h.window())))
                .collect(),
            last_out: vec![None; self.heads.len()],
        }
    }

    /// Greedy drafts after `last_token`, which sits at the session's next
    /// position and follows the committed hidden state `main_hidden`.
    pub fn draft(
        &self,
        model: &HybridModel,
        state: &ChainState,
        main_hidden: &[f64],
        last_token: u32,
        position: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut drafts = Vec::with_capacity(self.heads.len());
        let mut hidden = main_hidden.to_vec();
        let mut token = last_token;
        for (t, head) in self.heads.iter().enumerate() {
            let pos = position + t;
            let mut x = vec![head.fuse(&hidden, &model.embed(token)?)];
            head.block.forward_cached(&mut x, &state.caches[t], pos, None)?;
            hidden = x.pop().unwrap_or_default();
            token = argmax(&model.head.matvec(&rms_norm(&hidden, &head.out_norm))) as u32;
            drafts.push(token);
        }
        Ok(drafts)
    }

    /// Extends every head's cache over newly committed main-model positions
    /// `start..start + tokens.len()`. `prev_hidden` is the main hidden state at
    /// `start − 1` and `hiddens[i]` the one at `start + i`.
    pub fn observe(
        &self,
        model: &HybridModel,
        state: &mut ChainState,
        start: usize,
        tokens: &[u32],
        prev_hidden: Option<&[f64]>,
        hiddens: &[Vec<f64>],
    ) -> Result<(), ModelError> {
        let n = tokens.len();
        // below[i] is the previous level's hidden state at position start + i − 1.
        let mut below: Vec<Option<Vec<f64>>> = Vec::with_capacity(n + 1);
        below.push(prev_hidden.map(<[f64]>::to_vec));
        below.extend(hiddens.iter().take(n.saturating_sub(1)).cloned().map(Some));
        for (t, head) in self.heads.iter().enumerate() {
            let Some(first) = below.iter().position(Option::is_some) else {
                break;
            };
            let mut x = Vec::with_capacity(n - first);
            for i in first..n {
                let h = below[i].as_ref().expect("availability is a suffix");
                x.push(head.fuse(h, &model.embed(tokens[i])?));
            }
            if x.is_empty() {
                break;
            }
            let cache = &mut state.caches[t];
            let (pending, _) = head.block.forward_cached(&mut x, cache, start + first, None)?;
            for e in pending {
                cache.append(e)?;
            }
            // level[i] is this head's output at start + i − 1.
            let mut level: Vec<Option<Vec<f64>>> = vec![None; n];
            level[0] = state.last_out[t].take();
            for (m, out) in x.iter().enumerate() {
                if let Some(slot) = level.get_mut(first + m + 1) {
                    *slot = Some(out.clone());
                }
            }
            state.last_out[t] = x.last().cloned();
            below = level;
        }
        Ok(())
    }
}

/// Per-head caches and the most recent committed output of each head.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub caches: Vec<LayerCache>,
    pub last_out: Vec<Option<Vec<f64>>>,
}

/// Acceptance statistics for a speculative run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecDecodeStats {
    pub depth: usize,
    /// `per_round_accepted[a]` counts rounds that accepted `a` drafts.
    pub per_round_accepted: Vec<u64>,
    pub rounds: u64,
    pub draft_tokens_proposed: u64,
    pub draft_tokens_accepted: u64,
    pub draft_tokens_rejected: u64,
    entropy_sum: f64,
    entropy_count: u64,
}

impl SpecDecodeStats {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            per_round_accepted: vec![0; depth + 1],
            rounds: 0,
            draft_tokens_proposed: 0,
            draft_tokens_accepted: 0,
            draft_tokens_rejected: 0,
            entropy_sum: 0.0,
            entropy_count: 0,
        }
    }

    pub fn record_round(&mut self, proposed: usize, accepted: usize, entropies: &[f64]) {
        self.per_round_accepted[accepted] += 1;
        self.rounds += 1;
        self.draft_tokens_proposed += proposed as u64;
        self.draft_tokens_accepted += accepted as u64;
        self.draft_tokens_rejected += (proposed - accepted) as u64;
        self.entropy_sum += entropies.iter().sum::<f64>();
        self.entropy_count += entropies.len() as u64;
    }

    /// Folds another run of the same depth into this one.
    pub fn merge(&mut self, other: &SpecDecodeStats) {
        assert_eq!(self.depth, other.depth, "merging stats of different depths");
        for (a, b) in self.per_round_accepted.iter_mut().zip(&other.per_round_accepted) {
            *a += b;
        }
        self.rounds += other.rounds;
        self.draft_tokens_proposed += other.draft_tokens_proposed;
        self.draft_tokens_accepted += other.draft_tokens_accepted;
        self.draft_tokens_rejected += other.draft_tokens_rejected;
        self.entropy_sum += other.entropy_sum;
        self.entropy_count += other.entropy_count;
    }

    /// Mean accepted drafts plus the verifier's guaranteed token.
    pub fn mean_accept_length(&self) -> f64 {
        if self.rounds == 0 {
            return 1.0;
        }
        1.0 + self.mean_accepted_drafts()
    }

    pub fn mean_accepted_drafts(&self) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.draft_tokens_accepted as f64 / self.rounds as f64
    }

    /// Sample standard deviation of accepted drafts per round.
    pub fn accepted_std(&self) -> f64 {
        if self.rounds < 2 {
            return 0.0;
        }
        let mean = self.mean_accepted_drafts();
        let ss: f64 = self
            .per_round_accepted
            .iter()
            .enumerate()
            .map(|(a, &n)| n as f64 * (a as f64 - mean).powi(2))
            .sum();
        (ss / (self.rounds - 1) as f64).sqrt()
    }

    pub fn mean_output_entropy(&self) -> f64 {
        if self.entropy_count == 0 {
            return 0.0;
        }
        self.entropy_sum / self.entropy_count as f64
    }

    pub fn is_consistent(&self) -> bool {
        let hist_rounds: u64 = self.per_round_accepted.iter().sum();
        let hist_accepted: u64 = self
            .per_round_accepted
            .iter()
            .enumerate()
            .map(|(a, &n)| a as u64 * n)
            .sum();
        hist_rounds == self.rounds
            && hist_accepted == self.draft_tokens_accepted
            && self.draft_tokens_accepted + self.draft_tokens_rejected == self.draft_tokens_proposed
    }
}

/// Length of the longest prefix of `drafts` that matches `targets`.
pub fn accept_prefix(drafts: &[u32], targets: &[u32]) -> usize {
    drafts.iter().zip(targets).take_while(|(d, t)| d == t).count()
}

/// Outcome of one verification chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub accepted: usize,
    pub corrected: u32,
    pub chunk: ChunkOutput,
}

/// Scores `[pending, drafts…]` in one chunk and finds the accepted prefix.
/// The session is left untouched; commit `accepted + 1` positions of `chunk`.
pub fn verify(
    model: &HybridModel,
    session: &DecodeSession,
    pending: u32,
    drafts: &[u32],
) -> Result<Verification, ModelError> {
    let mut tokens = Vec::with_capacity(drafts.len() + 1);
    tokens.push(pending);
    tokens.extend_from_slice(drafts);
    let chunk = model.forward_chunk(session, &tokens, None)?;
    let targets = chunk.argmax();
    let accepted = accept_prefix(drafts, &targets);
    Ok(Verification {
        accepted,
        corrected: targets[accepted],
        chunk,
    })
}

/// Source of draft tokens for [`speculative_decode`].
pub trait Drafter {
    fn depth(&self) -> usize;

    /// Drafts after `pending`, which sits at `session.next_position`.
    fn draft(&mut self, model: &HybridModel, session: &DecodeSession, pending: u32) -> Result<Vec<u32>, ModelError>;

    /// Called after the main model commits `tokens` at `start..`.
    fn observe(
        &mut self,
        model: &HybridModel,
        start: usize,
        tokens: &[u32],
        prev_hidden: Option<&[f64]>,
        hiddens: &[Vec<f64>],
    ) -> Result<(), ModelError>;
}

/// Drafts with an MTP chain.
#[derive(Debug, Clone)]
pub struct MtpDrafter<'a> {
    pub chain: &'a DraftChain,
    pub state: ChainState,
}

impl<'a> MtpDrafter<'a> {
    pub fn new(chain: &'a DraftChain) -> Self {
        Self {
            chain,
            state: chain.new_state(),
        }
    }
}

impl Drafter for MtpDrafter<'_> {
    fn depth(&self) -> usize {
        self.chain.depth()
    }

    fn draft(&mut self, model: &HybridModel, session: &DecodeSession, pending: u32) -> Result<Vec<u32>, ModelError> {
        let hidden = session
            .last_hidden
            .as_deref()
            .ok_or_else(|| ModelError::SessionMismatch("draft before prefill".into()))?;
        self.chain
            .draft(model, &self.state, hidden, pending, session.next_position)
    }

    fn observe(
        &mut self,
        model: &HybridModel,
        start: usize,
        tokens: &[u32],
        prev_hidden: Option<&[f64]>,
        hiddens: &[Vec<f64>],
    ) -> Result<(), ModelError> {
        self.chain
            .observe(model, &mut self.state, start, tokens, prev_hidden, hiddens)
    }
}

/// Drafts the main model's true greedy continuation, corrupting each token
/// independently with probability `1 − agreement`.
#[derive(Debug, Clone)]
pub struct NoisyOracleDrafter<R: Rng> {
    pub depth: usize,
    pub agreement: f64,
    pub rng: R,
}

impl<R: Rng> Drafter for NoisyOracleDrafter<R> {
    fn depth(&self) -> usize {
        self.depth
    }

    fn draft(&mut self, model: &HybridModel, session: &DecodeSession, pending: u32) -> Result<Vec<u32>, ModelError> {
        let vocab = model.config.vocab_size as u32;
        let mut probe = session.clone();
        let mut token = pending;
        let mut out = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            if probe.next_position >= model.config.max_seq_len {
                out.push(0);
                continue;
            }
            let step = model.decode_step(&mut probe, token, None)?;
            token = argmax(&step.logits) as u32;
            let keep = self.rng.random::<f64>() < self.agreement;
            out.push(if keep || vocab < 2 {
                token
            } else {
                (token + 1 + self.rng.random_range(0..vocab - 1)) % vocab
            });
        }
        Ok(out)
    }

    fn observe(&mut self, _: &HybridModel, _: usize, _: &[u32], _: Option<&[f64]>, _: &[Vec<f64>]) -> Result<(), ModelError> {
        Ok(())
    }
}

/// Drafts by sampling the main model's own next-token distribution at
/// `temperature`, so a draft survives verification with probability close to
/// the target's top-1 mass. Acceptance therefore falls as output entropy rises.
#[derive(Debug, Clone)]
pub struct SampledOracleDrafter<R: Rng> {
    pub depth: usize,
    pub temperature: f64,
    pub rng: R,
}

impl<R: Rng> Drafter for SampledOracleDrafter<R> {
    fn depth(&self) -> usize {
        self.depth
    }

    fn draft(&mut self, model: &HybridModel, session: &DecodeSession, pending: u32) -> Result<Vec<u32>, ModelError> {
        let mut probe = session.clone();
        let mut token = pending;
        let mut out = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            if probe.next_position >= model.config.max_seq_len {
                out.push(0);
                continue;
            }
            let step = model.decode_step(&mut probe, token, None)?;
            let scaled: Vec<f64> = step.logits.iter().map(|l| l / self.temperature.max(1e-6)).collect();
            let p = softmax(&scaled);
            let mut u = self.rng.random::<f64>();
            token = (p.len() - 1) as u32;
            for (i, pi) in p.iter().enumerate() {
                if u < *pi {
                    token = i as u32;
                    break;
                }
                u -= pi;
            }
            out.push(token);
        }
        Ok(out)
    }

    fn observe(&mut self, _: &HybridModel, _: usize, _: &[u32], _: Option<&[f64]>, _: &[Vec<f64>]) -> Result<(), ModelError> {
        Ok(())
    }
}

/// Greedy self-speculative decoding. Emits exactly the tokens
/// [`HybridModel::greedy_decode`] would.
pub fn speculative_decode<D: Drafter>(
    model: &HybridModel,
    drafter: &mut D,
    prompt: &[u32],
    max_new: usize,
) -> Result<(Vec<u32>, SpecDecodeStats), ModelError> {
    let k = drafter.depth();
    let mut stats = SpecDecodeStats::new(k);
    let mut session = model.new_session();
    let chunk = model.prefill(&mut session, prompt)?;
    drafter.observe(model, 0, prompt, None, &chunk.hidden)?;
    let mut out = Vec::with_capacity(max_new + k + 1);
    if max_new == 0 {
        return Ok((out, stats));
    }
    let mut pending = argmax(chunk.logits.last().unwrap()) as u32;
    out.push(pending);
    while out.len() < max_new {
        let room = model.config.max_seq_len - session.next_position;
        let mut drafts = drafter.draft(model, &session, pending)?;
        drafts.truncate(room.saturating_sub(1));
        let ver = verify(model, &session, pending, &drafts)?;
        let commit = ver.accepted + 1;
        let start = session.next_position;
        let prev = session.last_hidden.clone();
        model.commit(&mut session, &ver.chunk, commit)?;
        let mut committed = vec![pending];
        committed.extend_from_slice(&drafts[..ver.accepted]);
        drafter.observe(model, start, &committed, prev.as_deref(), &ver.chunk.hidden[..commit])?;
        stats.record_round(drafts.len(), ver.accepted, &ver.chunk.entropy[..commit]);
        out.extend_from_slice(&drafts[..ver.accepted]);
        out.push(ver.corrected);
        pending = ver.corrected;
    }
    out.truncate(max_new);
    Ok((out, stats))
}

/// Monte-Carlo acceptance without a model: each of the `k` drafts matches
/// the target independently with probability `p`.
pub fn simulate_agreement<R: Rng>(p: f64, k: usize, rounds: u64, rng: &mut R) -> SpecDecodeStats {
    let mut stats = SpecDecodeStats::new(k);
    let targets: Vec<u32> = (0..k as u32).collect();
    let mut drafts = vec![0u32; k];
    for _ in 0..rounds {
        for (d, &t) in drafts.iter_mut().zip(&targets) {
            *d = if rng.random::<f64>() < p { t } else { t + 1000 };
        }
        stats.record_round(k, accept_prefix(&drafts, &targets), &[]);
    }
    stats
}

/// `Σ_{i=1..k} p^i`, the expected accepted drafts under independent agreement.
pub fn expected_accepted_drafts(p: f64, k: usize) -> f64 {
    (1..=k as i32).map(|i| p.powi(i)).sum()
}

/// Ceiling, scale and exponent of the entropy → accept-length model.
pub const CURVE_CEILING: f64 = 4.0;
pub const CURVE_SCALE: f64 = 0.58;
pub const CURVE_EXPONENT: f64 = 0.58;

/// Predicted accept length (3 draft heads) from next-token entropy in nats:
/// `4 · (1 − 0.58 · x^0.58)`, floored at 1.
pub fn acceptance_curve(entropy: f64) -> Result<f64, MtpError> {
    if !(entropy >= 0.0) {
        return Err(MtpError::NegativeEntropy(entropy));
    }
    Ok((CURVE_CEILING * (1.0 - CURVE_SCALE * entropy.powf(CURVE_EXPONENT))).max(1.0))
}

/// Entropy at which the curve reaches its floor of 1.
pub fn acceptance_curve_clamp() -> f64 {
    ((1.0 - 1.0 / CURVE_CEILING) / CURVE_SCALE).powf(1.0 / CURVE_EXPONENT)
}

/// Relative cost of drafting and verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Cost of one draft head relative to one main-model step.
    pub draft_cost_ratio: f64,
    /// Extra verification cost relative to one main-model step.
    pub verify_overhead: f64,
}

/// Modeled decode speedup `accept_length / (1 + K·draft_cost_ratio + verify_overhead)`.
pub fn estimate_speedup(accept_length: f64, depth: usize, cost: CostModel) -> Result<f64, MtpError> {
    if !(accept_length >= 1.0) {
        return Err(MtpError::AcceptLength(accept_length));
    }
    Ok(accept_length / (1.0 + depth as f64 * cost.draft_cost_ratio + cost.verify_overhead))
}

/// Fitted `y = ceiling · (1 − scale · x^exponent)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit {
    pub ceiling: f64,
    pub scale: f64,
    pub exponent: f64,
    pub r_squared: f64,
}

impl CurveFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.ceiling * (1.0 - self.scale * x.powf(self.exponent))
    }
}

fn sse(points: &[(f64, f64)], c: f64, a: f64, b: f64) -> f64 {
    points
        .iter()
        .map(|&(x, y)| (y - c * (1.0 - a * x.powf(b))).powi(2))
        .sum()
}

/// Least-squares fit of `(entropy, accept_length)` pairs.
///
/// For a trial ceiling `c`, `ln(1 − y/c) = ln a + b·ln x` is linear, so the
/// ceiling is scanned with ordinary least squares in log space, and the best
/// triple is polished with Levenberg–Marquardt on the untransformed residuals.
pub fn fit_acceptance_curve(points: &[(f64, f64)]) -> Result<CurveFit, MtpError> {
    if points.len() < 3 {
        return Err(MtpError::TooFewPoints(points.len()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).filter(|x| *x > 0.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(MtpError::InsufficientSpread);
    }
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let span = (y_max - y_min).max(1e-6);

    let log_fit = |c: f64| -> Option<(f64, f64)> {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|(x, y)| *x > 0.0 && *y < c)
            .map(|&(x, y)| (x.ln(), (1.0 - y / c).ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let b = sxy / sxx;
        Some(((my - b * mx).exp(), b))
    };

    let mut best: Option<(f64, f64, f64, f64)> = None;
    for i in 0..400 {
        let c = y_max + span * 1e-4 * (1e5f64).powf(i as f64 / 399.0);
        if let Some((a, b)) = log_fit(c) {
            let err = sse(points, c, a, b);
            if err.is_finite() && best.is_none_or(|bst| err < bst.3) {
                best = Some((c, a, b, err));
            }
        }
    }
    let (mut c, mut a, mut b, mut err) = best.ok_or(MtpError::NoConvergence)?;

    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for &(x, y) in points {
            let xb = if x > 0.0 { x.powf(b) } else { 0.0 };
            let lx = if x > 0.0 { x.ln() } else { 0.0 };
            let r = y - c * (1.0 - a * xb);
            let j = nalgebra::Vector3::new(1.0 - a * xb, -c * xb, -c * a * xb * lx);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj;
            for d in 0..3 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (nc, na, nb) = (c + step[0], a + step[1], b + step[2]);
            let nerr = sse(points, nc, na, nb);
            if nerr.is_finite() && nerr <= err {
                let rel = (err - nerr) / err.max(1e-300);
                c = nc;
                a = na;
                b = nb;
                err = nerr;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-15 && step.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let sst: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - err / sst } else { 1.0 };
    Ok(CurveFit {
        ceiling: c,
        scale: a,
        exponent: b,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accept_prefix_cases() {
        assert_eq!(accept_prefix(&[1, 2, 3], &[1, 2, 3, 4]), 3);
        assert_eq!(accept_prefix(&[9, 2, 3], &[1, 2, 3, 4]), 0);
        assert_eq!(accept_prefix(&[1, 9, 3], &[1, 2, 3, 4]), 1);
        assert_eq!(accept_prefix(&[], &[1]), 0);
    }

    #[test]
    fn curve_values() {
        assert_eq!(acceptance_curve(0.0).unwrap(), 4.0);
        assert!((acceptance_curve(1.0).unwrap() - 1.68).abs() < 1e-12);
        assert!(acceptance_curve(-0.1).is_err());
        assert_eq!(acceptance_curve(10.0).unwrap(), 1.0);
        let xc = acceptance_curve_clamp();
        assert!((4.0 * (1.0 - 0.58 * xc.powf(0.58)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_model() {
        let free = CostModel { draft_cost_ratio: 0.0, verify_overhead: 0.0 };
        assert_eq!(estimate_speedup(3.2, 3, free).unwrap(), 3.2);
        let cost = CostModel { draft_cost_ratio: 0.05, verify_overhead: 0.1 };
        assert!(estimate_speedup(1.0, 3, cost).unwrap() <= 1.0);
        assert!(estimate_speedup(2.0, 3, cost).unwrap() < estimate_speedup(2.5, 3, cost).unwrap());
        assert!(estimate_speedup(0.5, 3, cost).is_err());
    }

    #[test]
    fn stats_bookkeeping() {
        let mut s = SpecDecodeStats::new(3);
        s.record_round(3, 3, &[0.1]);
        s.record_round(3, 0, &[0.3]);
        assert!(s.is_consistent());
        assert_eq!(s.mean_accept_length(), 2.5);
        assert!((s.mean_output_entropy() - 0.2).abs() < 1e-15);
        assert_eq!(SpecDecodeStats::new(0).mean_accept_length(), 1.0);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(fit_acceptance_curve(&[(0.1, 3.0), (0.2, 2.9)]), Err(MtpError::TooFewPoints(2)));
        assert_eq!(
            fit_acceptance_curve(&[(0.5, 3.0), (0.5, 2.9), (0.5, 2.8)]),
            Err(MtpError::InsufficientSpread)
        );
    }
}
