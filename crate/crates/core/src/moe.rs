//! Top-k expert routing with selection-only bias balancing, a per-sequence
//! auxiliary load loss, and rollout routing replay.
//!
//! Scores are `sigmoid(W_r · h)`. The per-expert bias is added only when
//! choosing the top-k; gate values are the raw scores of the chosen experts
//! renormalized to sum to one. Replay skips selection and reuses the recorded
//! experts and gates verbatim, so a replayed forward does not depend on the
//! router parameters at all.

use std::fmt::Write as _;

use thiserror::Error;

use crate::linalg::{sigmoid, silu, Matrix};

/// Expert-bias step size during the first two pre-training stages.
pub const BIAS_UPDATE_PRETRAIN: f64 = 1e-3;
/// Expert-bias step size during supervised fine-tuning.
pub const BIAS_UPDATE_SFT: f64 = 1e-4;
/// Expert-bias step size during long-context extension.
pub const BIAS_UPDATE_LONG_CONTEXT: f64 = 1e-5;
/// Sequence auxiliary loss coefficient during pre-training.
pub const AUX_LOSS_PRETRAIN: f64 = 1e-5;
/// Sequence auxiliary loss coefficient during supervised fine-tuning.
pub const AUX_LOSS_SFT: f64 = 1e-6;

const RECORD_HEADER: &str = "routing-record v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error("replay shape mismatch: {0}")]
    ReplayShape(String),
    #[error("malformed routing record at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Router parameters. `gate_weights` is `num_experts × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    pub gate_weights: Matrix,
    pub expert_bias: Vec<f64>,
    pub bias_update_factor: f64,
    pub aux_loss_coeff: f64,
}

impl RouterState {
    pub fn new(gate_weights: Matrix) -> Self {
        let e = gate_weights.rows;
        Self {
            gate_weights,
            expert_bias: vec![0.0; e],
            bias_update_factor: BIAS_UPDATE_PRETRAIN,
            aux_loss_coeff: AUX_LOSS_PRETRAIN,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.expert_bias.len()
    }

    /// Sigmoid affinity of `hidden` to each expert.
    pub fn scores(&self, hidden: &[f64]) -> Vec<f64> {
        self.gate_weights
            .matvec(hidden)
            .into_iter()
            .map(sigmoid)
            .collect()
    }
}

/// Chosen experts for one token and their mixing weights, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRouting {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Picks the `k` experts with the largest `score + bias` (ties to the lower
/// index) and renormalizes their unbiased scores into gates.
pub fn select_experts(scores: &[f64], bias: &[f64], k: usize) -> TokenRouting {
    assert_eq!(scores.len(), bias.len(), "score/bias length mismatch");
    assert!(k <= scores.len(), "k exceeds expert count");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a] + bias[a], scores[b] + bias[b]);
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    order.truncate(k);
    let total: f64 = order.iter().map(|&e| scores[e]).sum();
    let gates = if total > 0.0 {
        order.iter().map(|&e| scores[e] / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    TokenRouting {
        experts: order,
        gates,
    }
}

/// Routes one token through the router.
pub fn route(hidden: &[f64], state: &RouterState, k: usize) -> TokenRouting {
    select_experts(&state.scores(hidden), &state.expert_bias, k)
}

/// Scores normalized to a per-token distribution over experts.
pub fn routing_probs(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    scores.iter().map(|s| s / total).collect()
}

/// `bias_e += factor · sign(mean_load − load_e)`: overloaded experts become
/// less attractive, underloaded ones more.
pub fn update_expert_bias(state: &mut RouterState, loads: &[f64]) {
    assert_eq!(loads.len(), state.expert_bias.len(), "load vector length mismatch");
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    for (b, &load) in state.expert_bias.iter_mut().zip(loads) {
        let err = mean - load;
        if err > 0.0 {
            *b += state.bias_update_factor;
        } else if err < 0.0 {
            *b -= state.bias_update_factor;
        }
    }
}

/// Per-expert token counts of a batch of routings.
pub fn expert_loads(routings: &[TokenRouting], num_experts: usize) -> Vec<f64> {
    let mut loads = vec![0.0; num_experts];
    for r in routings {
        for &e in &r.experts {
            loads[e] += 1.0;
        }
    }
    loads
}

/// Sequence-level balance loss `E · Σ_e f_e · P_e`, where `f_e` is the share of
/// the sequence's `T·k` routing slots that went to expert `e` and `P_e` the mean
/// routing probability. Balanced routing gives 1; collapse onto one expert
/// gives `E`. The coefficient is applied by the caller.
pub fn sequence_aux_loss(probs: &[Vec<f64>], k: usize) -> f64 {
    let t = probs.len();
    if t == 0 {
        return 0.0;
    }
    let e = probs[0].len();
    let mut frac = vec![0.0; e];
    let mut mean_p = vec![0.0; e];
    let zero = vec![0.0; e];
    for row in probs {
        let sel = select_experts(row, &zero, k);
        for idx in sel.experts {
            frac[idx] += 1.0 / (t * k) as f64;
        }
        for (m, p) in mean_p.iter_mut().zip(row) {
            *m += p / t as f64;
        }
    }
    e as f64 * frac.iter().zip(&mean_p).map(|(f, p)| f * p).sum::<f64>()
}

/// Gated feed-forward `down · (silu(gate · x) ⊙ (up · x))`. Used both for
/// routed experts and for dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl FeedForwardNet {
    pub fn random(hidden: usize, inner: usize, std: f64, seed: u64, stream: u64) -> Self {
        Self {
            gate: Matrix::randn(inner, hidden, std, seed, stream),
            up: Matrix::randn(inner, hidden, std, seed, stream + 1),
            down: Matrix::randn(hidden, inner, std, seed, stream + 2),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let g = self.gate.matvec(x);
        let u = self.up.matvec(x);
        let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
        self.down.matvec(&act)
    }

    pub fn param_count(&self) -> usize {
        self.gate.len() + self.up.len() + self.down.len()
    }
}

/// A routed mixture-of-experts feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: RouterState,
    pub experts: Vec<FeedForwardNet>,
    pub experts_per_token: usize,
}

impl MoeLayer {
    /// Mixes the experts for each token. Without `replay` the router picks
    /// fresh; with it the recorded experts and gates are used unchanged.
    pub fn forward(
        &self,
        hidden: &[Vec<f64>],
        replay: Option<&[TokenRouting]>,
    ) -> Result<(Vec<Vec<f64>>, Vec<TokenRouting>), MoeError> {
        if let Some(rows) = replay {
            self.check_replay(hidden.len(), rows)?;
        }
        let mut outputs = Vec::with_capacity(hidden.len());
        let mut record = Vec::with_capacity(hidden.len());
        for (t, h) in hidden.iter().enumerate() {
            let routing = match replay {
                Some(rows) => rows[t].clone(),
                None => route(h, &self.router, self.experts_per_token),
            };
            let mut out = vec![0.0; h.len()];
            for (&e, &g) in routing.experts.iter().zip(&routing.gates) {
                let y = self.experts[e].forward(h);
                for (o, v) in out.iter_mut().zip(&y) {
                    *o += g * v;
                }
            }
            outputs.push(out);
            record.push(routing);
        }
        Ok((outputs, record))
    }

    fn check_replay(&self, tokens: usize, rows: &[TokenRouting]) -> Result<(), MoeError> {
        if rows.len() != tokens {
            return Err(MoeError::ReplayShape(format!(
                "{} recorded tokens for {} inputs",
                rows.len(),
                tokens
            )));
        }
        for r in rows {
            validate_routing(r, self.experts_per_token, self.experts.len())
                .map_err(MoeError::ReplayShape)?;
        }
        Ok(())
    }
}

fn validate_routing(r: &TokenRouting, k: usize, num_experts: usize) -> Result<(), String> {
    if r.experts.len() != k || r.gates.len() != k {
        return Err(format!("expected {k} experts per token, got {}", r.experts.len()));
    }
    for (i, &e) in r.experts.iter().enumerate() {
        if e >= num_experts {
            return Err(format!("expert index {e} out of range"));
        }
        if r.experts[..i].contains(&e) {
            return Err(format!("duplicate expert {e}"));
        }
    }
    Ok(())
}

/// FFN attached to one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(FeedForwardNet),
    Moe(MoeLayer),
}

impl FeedForward {
    /// Dense layers ignore `replay` and return an empty routing list.
    pub fn forward(
        &self,
        hidden: &[Vec<f64>],
        replay: Option<&[TokenRouting]>,
    ) -> Result<(Vec<Vec<f64>>, Vec<TokenRouting>), MoeError> {
        match self {
            FeedForward::Dense(ffn) => Ok((hidden.iter().map(|h| ffn.forward(h)).collect(), Vec::new())),
            FeedForward::Moe(moe) => moe.forward(hidden, replay),
        }
    }
}

/// Routing decisions of one MoE layer over a token span.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    pub tokens: Vec<TokenRouting>,
}

/// Routing decisions of every MoE layer, keyed by layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingRecord {
    pub experts_per_token: usize,
    pub layers: Vec<LayerRecord>,
}

impl RoutingRecord {
    pub fn new(experts_per_token: usize) -> Self {
        Self {
            experts_per_token,
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.tokens.len())
    }

    /// Tokens `range` of every layer.
    pub fn slice(&self, range: std::ops::Range<usize>) -> RoutingRecord {
        RoutingRecord {
            experts_per_token: self.experts_per_token,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    layer: l.layer,
                    tokens: l.tokens[range.clone()].to_vec(),
                })
                .collect(),
        }
    }

    /// Appends `other`'s tokens after this record's, layer by layer.
    pub fn extend(&mut self, other: &RoutingRecord) {
        if self.layers.is_empty() {
            *self = other.clone();
            return;
        }
        for l in &other.layers {
            if let Some(mine) = self.layers.iter_mut().find(|m| m.layer == l.layer) {
                mine.tokens.extend(l.tokens.iter().cloned());
            } else {
                self.layers.push(l.clone());
            }
        }
    }

    /// Versioned text form: a header, then one line per (layer, token) with
    /// the expert ids, a `|`, and the gates. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{RECORD_HEADER}").unwrap();
        writeln!(out, "k {}", self.experts_per_token).unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(out, "layer {} tokens {}", l.layer, l.tokens.len()).unwrap();
            for (t, r) in l.tokens.iter().enumerate() {
                write!(out, "{t}").unwrap();
                for e in &r.experts {
                    write!(out, " {e}").unwrap();
                }
                out.push_str(" |");
                for g in &r.gates {
                    write!(out, " {g:?}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MoeError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let err = |line: usize, msg: &str| MoeError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("missing {what}")));
        let (ln, header) = next("header")?;
        if header != RECORD_HEADER {
            return Err(err(ln, "unsupported header"));
        }
        let (ln, kline) = next("k")?;
        let k: usize = kline
            .strip_prefix("k ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `k <n>`"))?;
        let (ln, lline) = next("layers")?;
        let nlayers: usize = lline
            .strip_prefix("layers ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `layers <n>`"))?;
        let mut record = RoutingRecord::new(k);
        for _ in 0..nlayers {
            let (ln, head) = next("layer header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let (layer, ntok) = match parts.as_slice() {
                ["layer", l, "tokens", t] => (
                    l.parse().map_err(|_| err(ln, "bad layer index"))?,
                    t.parse().map_err(|_| err(ln, "bad token count"))?,
                ),
                _ => return Err(err(ln, "expected `layer <i> tokens <t>`")),
            };
            let mut tokens = Vec::with_capacity(ntok);
            for t in 0..ntok {
                let (ln, row) = next("token row")?;
                let (ids, gates) = row.split_once('|').ok_or_else(|| err(ln, "missing `|`"))?;
                let mut ids = ids.split_whitespace();
                let idx: usize = ids
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(ln, "missing token index"))?;
                if idx != t {
                    return Err(err(ln, "token rows out of order"));
                }
                let experts: Vec<usize> = ids
                    .map(|v| v.parse().map_err(|_| err(ln, "bad expert id")))
                    .collect::<Result<_, _>>()?;
                let gates: Vec<f64> = gates
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(ln, "bad gate value")))
                    .collect::<Result<_, _>>()?;
                if experts.len() != k || gates.len() != k {
                    return Err(err(ln, "row does not carry k experts and k gates"));
                }
                tokens.push(TokenRouting { experts, gates });
            }
            record.layers.push(LayerRecord { layer, tokens });
        }
        Ok(record)
    }
}
