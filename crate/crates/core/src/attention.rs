//! Sink-biased softmax attention with sliding-window masking, grouped-query
//! head sharing and partial rotary embeddings.
//!
//! For one head, query `i` and key `j`:
//!
//! ```text
//! a_ij = q_i · k_j / sqrt(d)
//! m_i  = max(max_j a_ij, sink)
//! s_ij = exp(a_ij - m_i) / (exp(sink - m_i) + Σ_j' exp(a_ij' - m_i))
//! o_i  = Σ_j s_ij v_j
//! ```
//!
//! The sink term takes probability mass without contributing a value, so each
//! output lies in the convex hull of the zero vector and the visible values.
//! Keys outside a query's allowed range are skipped entirely: they take part in
//! neither the row max nor the denominator.

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::linalg::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sink softmax is undefined with no visible logits and sink = -inf")]
    EmptyDistribution,
    #[error("sink must be finite or -inf, got {0}")]
    InvalidSink(f64),
    #[error("logit is NaN or +inf")]
    InvalidLogit,
    #[error("rope_rot_dims must be even and at most {len}, got {rot_dims}")]
    InvalidRotDims { rot_dims: usize, len: usize },
    #[error("non-causal mask: query at {query} allows key {key_end}")]
    NonCausalMask { query: usize, key_end: usize },
    #[error("q_heads {q_heads} not divisible by kv_heads {kv_heads}")]
    HeadGrouping { q_heads: usize, kv_heads: usize },
    #[error("{0}")]
    Shape(String),
}

/// Per-head learnable state: the sink bias and the logit scaling dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionHeadState {
    pub sink: f64,
    pub head_dim_qk: usize,
}

impl AttentionHeadState {
    pub fn new(sink: f64, head_dim_qk: usize) -> Result<Self, AttentionError> {
        if !sink.is_finite() {
            return Err(AttentionError::InvalidSink(sink));
        }
        if head_dim_qk == 0 {
            return Err(AttentionError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        Ok(Self { sink, head_dim_qk })
    }
}

/// `a_j = q · k_j / sqrt(d)` for every key, in key order.
pub fn attention_logits(q: &[f64], keys: &[&[f64]], d: usize) -> Result<Vec<f64>, AttentionError> {
    if q.len() != d {
        return Err(AttentionError::DimensionMismatch {
            expected: d,
            got: q.len(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    keys.iter()
        .map(|k| {
            if k.len() != d {
                Err(AttentionError::DimensionMismatch {
                    expected: d,
                    got: k.len(),
                })
            } else {
                Ok(dot(q, k) * scale)
            }
        })
        .collect()
}

/// Normalized weights of one row plus the mass absorbed by the sink.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkSoftmax {
    pub weights: Vec<f64>,
    pub sink_mass: f64,
    /// `m = max(max_j a_j, sink)` used for the shift.
    pub row_max: f64,
}

/// Softmax with an extra `exp(sink)` term in the denominator.
///
/// Entries equal to `-inf` are treated as masked and receive weight 0. A sink
/// of `-inf` reduces to the ordinary softmax.
pub fn sink_softmax(logits: &[f64], sink: f64) -> Result<SinkSoftmax, AttentionError> {
    if sink.is_nan() || sink == f64::INFINITY {
        return Err(AttentionError::InvalidSink(sink));
    }
    if logits.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
        return Err(AttentionError::InvalidLogit);
    }
    let visible_max = logits
        .iter()
        .copied()
        .filter(|a| a.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let m = visible_max.max(sink);
    if m == f64::NEG_INFINITY {
        return Err(AttentionError::EmptyDistribution);
    }
    let sink_term = (sink - m).exp();
    let mut weights: Vec<f64> = logits
        .iter()
        .map(|&a| if a.is_finite() { (a - m).exp() } else { 0.0 })
        .collect();
    let mut denom = sink_term;
    for w in &weights {
        denom += w;
    }
    for w in &mut weights {
        *w /= denom;
    }
    Ok(SinkSoftmax {
        weights,
        sink_mass: sink_term / denom,
        row_max: m,
    })
}

/// Inclusive key-position range visible to query `i` under a window of `w`
/// tokens that counts the query itself.
pub fn swa_window(i: usize, w: usize) -> RangeInclusive<usize> {
    debug_assert!(w >= 1);
    (i + 1).saturating_sub(w)..=i
}

/// Full causal range for query `i`.
pub fn causal_range(i: usize) -> RangeInclusive<usize> {
    0..=i
}

/// Rotates consecutive pairs `(2t, 2t+1)` of the first `rot_dims` entries by
/// `pos · base^(-2t / rot_dims)`; the tail is copied through unchanged.
pub fn apply_partial_rope(
    v: &[f64],
    pos: usize,
    base: f64,
    rot_dims: usize,
) -> Result<Vec<f64>, AttentionError> {
    let mut out = v.to_vec();
    rope_in_place(&mut out, pos, base, rot_dims)?;
    Ok(out)
}

pub fn rope_in_place(
    v: &mut [f64],
    pos: usize,
    base: f64,
    rot_dims: usize,
) -> Result<(), AttentionError> {
    if !rot_dims.is_multiple_of(2) || rot_dims > v.len() {
        return Err(AttentionError::InvalidRotDims {
            rot_dims,
            len: v.len(),
        });
    }
    if pos == 0 {
        return Ok(());
    }
    for t in 0..rot_dims / 2 {
        let theta = pos as f64 * base.powf(-2.0 * t as f64 / rot_dims as f64);
        let (sin, cos) = theta.sin_cos();
        let (x0, x1) = (v[2 * t], v[2 * t + 1]);
        v[2 * t] = x0 * cos - x1 * sin;
        v[2 * t + 1] = x0 * sin + x1 * cos;
    }
    Ok(())
}

/// Head counts and widths shared by queries, keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim_qk: usize,
    pub head_dim_v: usize,
}

impl HeadShape {
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    /// kv-head serving query head `h`.
    pub fn kv_head_for(&self, h: usize) -> usize {
        h / self.group_size()
    }
}

/// Borrowed per-token projections. Each query row is laid out as
/// `q_heads × head_dim_qk`, each key row as `kv_heads × head_dim_qk`, each value
/// row as `kv_heads × head_dim_v`. Key positions must be strictly increasing.
#[derive(Debug, Clone)]
pub struct AttentionInputs<'a> {
    pub shape: HeadShape,
    pub queries: Vec<&'a [f64]>,
    pub query_positions: Vec<usize>,
    pub keys: Vec<&'a [f64]>,
    pub values: Vec<&'a [f64]>,
    pub key_positions: Vec<usize>,
}

impl AttentionInputs<'_> {
    fn check(&self) -> Result<(), AttentionError> {
        let s = &self.shape;
        if s.kv_heads == 0 || !s.q_heads.is_multiple_of(s.kv_heads) {
            return Err(AttentionError::HeadGrouping {
                q_heads: s.q_heads,
                kv_heads: s.kv_heads,
            });
        }
        if self.queries.is_empty() {
            return Err(AttentionError::Shape("at least one query required".into()));
        }
        if self.queries.len() != self.query_positions.len() {
            return Err(AttentionError::Shape("query/position count mismatch".into()));
        }
        if self.keys.len() != self.values.len() || self.keys.len() != self.key_positions.len() {
            return Err(AttentionError::Shape("key/value/position count mismatch".into()));
        }
        if self.key_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AttentionError::Shape("key positions must increase".into()));
        }
        for q in &self.queries {
            if q.len() != s.q_heads * s.head_dim_qk {
                return Err(AttentionError::DimensionMismatch {
                    expected: s.q_heads * s.head_dim_qk,
                    got: q.len(),
                });
            }
        }
        for k in &self.keys {
            if k.len() != s.kv_heads * s.head_dim_qk {
                return Err(AttentionError::DimensionMismatch {
                    expected: s.kv_heads * s.head_dim_qk,
                    got: k.len(),
                });
            }
        }
        for v in &self.values {
            if v.len() != s.kv_heads * s.head_dim_v {
                return Err(AttentionError::DimensionMismatch {
                    expected: s.kv_heads * s.head_dim_v,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Index span of keys whose positions fall in `range`.
    fn key_span(&self, range: &RangeInclusive<usize>) -> std::ops::Range<usize> {
        let lo = self.key_positions.partition_point(|p| p < range.start());
        let hi = self.key_positions.partition_point(|p| p <= range.end());
        lo..hi.max(lo)
    }
}

/// Logits, row maxima and weights of a single head over all queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkspace {
    /// Visible logits per query, aligned with `key_indices`.
    pub logits: Vec<Vec<f64>>,
    pub key_indices: Vec<std::ops::Range<usize>>,
    pub row_max: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub sink_mass: Vec<f64>,
}

fn check_masks(
    inputs: &AttentionInputs<'_>,
    masks: &[RangeInclusive<usize>],
) -> Result<(), AttentionError> {
    if masks.len() != inputs.queries.len() {
        return Err(AttentionError::Shape("one mask range per query required".into()));
    }
    for (range, &qpos) in masks.iter().zip(&inputs.query_positions) {
        if *range.end() > qpos {
            return Err(AttentionError::NonCausalMask {
                query: qpos,
                key_end: *range.end(),
            });
        }
    }
    Ok(())
}

/// Scores one query head against its kv head for every query.
pub fn head_workspace(
    inputs: &AttentionInputs<'_>,
    head_index: usize,
    head: &AttentionHeadState,
    masks: &[RangeInclusive<usize>],
) -> Result<AttentionWorkspace, AttentionError> {
    inputs.check()?;
    check_masks(inputs, masks)?;
    let s = inputs.shape;
    if head.head_dim_qk != s.head_dim_qk {
        return Err(AttentionError::DimensionMismatch {
            expected: s.head_dim_qk,
            got: head.head_dim_qk,
        });
    }
    let kvh = s.kv_head_for(head_index);
    let qk = s.head_dim_qk;
    let mut ws = AttentionWorkspace {
        logits: Vec::new(),
        key_indices: Vec::new(),
        row_max: Vec::new(),
        weights: Vec::new(),
        sink_mass: Vec::new(),
    };
    for (q, range) in inputs.queries.iter().zip(masks) {
        let span = inputs.key_span(range);
        let qh = &q[head_index * qk..(head_index + 1) * qk];
        let keys: Vec<&[f64]> = inputs.keys[span.clone()]
            .iter()
            .map(|k| &k[kvh * qk..(kvh + 1) * qk])
            .collect();
        let logits = attention_logits(qh, &keys, qk)?;
        let sm = sink_softmax(&logits, head.sink)?;
        ws.logits.push(logits);
        ws.key_indices.push(span);
        ws.row_max.push(sm.row_max);
        ws.weights.push(sm.weights);
        ws.sink_mass.push(sm.sink_mass);
    }
    Ok(ws)
}

/// Multi-head sink attention. `heads` holds one state per query head and
/// `masks[i]` is the inclusive key-position range query `i` may see. Returns
/// one row of `q_heads × head_dim_v` per query.
pub fn attend(
    inputs: &AttentionInputs<'_>,
    heads: &[AttentionHeadState],
    masks: &[RangeInclusive<usize>],
) -> Result<Vec<Vec<f64>>, AttentionError> {
    inputs.check()?;
    check_masks(inputs, masks)?;
    let s = inputs.shape;
    if heads.len() != s.q_heads {
        return Err(AttentionError::Shape(format!(
            "expected {} head states, got {}",
            s.q_heads,
            heads.len()
        )));
    }
    let (qk, dv) = (s.head_dim_qk, s.head_dim_v);
    let mut outputs = Vec::with_capacity(inputs.queries.len());
    for (q, range) in inputs.queries.iter().zip(masks) {
        let span = inputs.key_span(range);
        let mut out = vec![0.0; s.q_heads * dv];
        let mut logits = Vec::with_capacity(span.len());
        for (h, head) in heads.iter().enumerate() {
            let kvh = s.kv_head_for(h);
            let qh = &q[h * qk..(h + 1) * qk];
            let scale = 1.0 / (head.head_dim_qk as f64).sqrt();
            logits.clear();
            for k in &inputs.keys[span.clone()] {
                logits.push(dot(qh, &k[kvh * qk..(kvh + 1) * qk]) * scale);
            }
            let sm = sink_softmax(&logits, head.sink)?;
            let oh = &mut out[h * dv..(h + 1) * dv];
            for (w, v) in sm.weights.iter().zip(&inputs.values[span.clone()]) {
                let vh = &v[kvh * dv..(kvh + 1) * dv];
                for (o, x) in oh.iter_mut().zip(vh) {
                    *o += w * x;
                }
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logits_basics() {
        let e = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(attention_logits(&e, &[&e], 4).unwrap(), vec![0.5]);
        let f = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(attention_logits(&e, &[&f], 4).unwrap(), vec![0.0]);
        assert!(matches!(
            attention_logits(&e, &[&e[..3]], 4),
            Err(AttentionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sink_softmax_reduces_to_softmax_with_tiny_sink() {
        let r = sink_softmax(&[0.0, 0.0], -1e9).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert!(r.sink_mass < 1e-300);
    }

    #[test]
    fn sink_softmax_equal_split() {
        let r = sink_softmax(&[0.0], 0.0).unwrap();
        assert_eq!(r.weights, vec![0.5]);
        assert_eq!(r.sink_mass, 0.5);
    }

    #[test]
    fn sink_softmax_matches_unshifted_formula() {
        let logits = [1.0f64, 2.0];
        let sink = 0.5f64;
        let denom = sink.exp() + logits.iter().map(|a| a.exp()).sum::<f64>();
        let r = sink_softmax(&logits, sink).unwrap();
        for (w, a) in r.weights.iter().zip(logits) {
            assert!((w - a.exp() / denom).abs() < 1e-12);
        }
        assert!((r.sink_mass - sink.exp() / denom).abs() < 1e-12);
        assert_eq!(r.row_max, 2.0);
    }

    #[test]
    fn sink_softmax_errors() {
        assert_eq!(
            sink_softmax(&[], f64::NEG_INFINITY),
            Err(AttentionError::EmptyDistribution)
        );
        assert_eq!(
            sink_softmax(&[f64::NEG_INFINITY], f64::NEG_INFINITY),
            Err(AttentionError::EmptyDistribution)
        );
        assert!(sink_softmax(&[f64::NAN], 0.0).is_err());
        assert!(sink_softmax(&[0.0], f64::NAN).is_err());
        // Empty row with a finite sink puts all mass on the sink.
        let r = sink_softmax(&[], 0.3).unwrap();
        assert_eq!(r.sink_mass, 1.0);
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let r = sink_softmax(&[1.0, f64::NEG_INFINITY, 1.0], f64::NEG_INFINITY).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn window_ranges() {
        assert_eq!(swa_window(200, 128), 73..=200);
        assert_eq!(swa_window(5, 128), 0..=5);
        assert_eq!(swa_window(0, 1), 0..=0);
        assert_eq!(swa_window(0, 128), 0..=0);
        assert_eq!(swa_window(9, 1), 9..=9);
    }

    #[test]
    fn rope_identity_at_zero_and_tail_untouched() {
        let v: Vec<f64> = (0..192).map(|i| i as f64 * 0.37 - 3.0).collect();
        assert_eq!(apply_partial_rope(&v, 0, 10_000.0, 64).unwrap(), v);
        let r = apply_partial_rope(&v, 77, 640_000.0, 64).unwrap();
        assert_eq!(&r[64..], &v[64..]);
        assert_ne!(&r[..64], &v[..64]);
        for t in 0..32 {
            let before = v[2 * t].hypot(v[2 * t + 1]);
            let after = r[2 * t].hypot(r[2 * t + 1]);
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_bad_dims() {
        assert!(apply_partial_rope(&[0.0; 8], 1, 1e4, 3).is_err());
        assert!(apply_partial_rope(&[0.0; 8], 1, 1e4, 10).is_err());
    }

    fn single(q: &[f64], k: &[f64], v: &[f64], sink: f64) -> Vec<f64> {
        let inputs = AttentionInputs {
            shape: HeadShape {
                q_heads: 1,
                kv_heads: 1,
                head_dim_qk: q.len(),
                head_dim_v: v.len(),
            },
            queries: vec![q],
            query_positions: vec![0],
            keys: vec![k],
            values: vec![v],
            key_positions: vec![0],
        };
        let head = AttentionHeadState {
            sink,
            head_dim_qk: q.len(),
        };
        attend(&inputs, &[head], &[0..=0]).unwrap().remove(0)
    }

    #[test]
    fn attend_single_key() {
        let q = [0.3, -0.2, 0.9, 0.1];
        let k = [0.5, 0.4, -0.1, 0.2];
        let v = [1.5, -2.0, 0.25];
        assert_eq!(single(&q, &k, &v, -1e9), v.to_vec());
        let a11 = dot(&q, &k) / 2.0;
        let half: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
        assert_eq!(single(&q, &k, &v, a11), half);
    }

    #[test]
    fn attend_rejects_non_causal_mask() {
        let q = [1.0, 0.0];
        let inputs = AttentionInputs {
            shape: HeadShape {
                q_heads: 1,
                kv_heads: 1,
                head_dim_qk: 2,
                head_dim_v: 2,
            },
            queries: vec![&q],
            query_positions: vec![0],
            keys: vec![&q, &q],
            values: vec![&q, &q],
            key_positions: vec![0, 1],
        };
        let head = AttentionHeadState::new(0.0, 2).unwrap();
        assert_eq!(
            attend(&inputs, &[head], &[0..=1]),
            Err(AttentionError::NonCausalMask { query: 0, key_end: 1 })
        );
    }

    proptest! {
        #[test]
        fn rows_normalize(logits in prop::collection::vec(-30.0f64..30.0, 0..40), sink in -40.0f64..40.0) {
            let r = sink_softmax(&logits, sink).unwrap();
            let total: f64 = r.weights.iter().sum::<f64>() + r.sink_mass;
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            prop_assert!(r.sink_mass > 0.0);
        }

        #[test]
        fn shift_invariance(logits in prop::collection::vec(-10.0f64..10.0, 1..20), sink in -10.0f64..10.0, c in -50.0f64..50.0) {
            let a = sink_softmax(&logits, sink).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let b = sink_softmax(&shifted, sink + c).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.sink_mass - b.sink_mass).abs() < 1e-12);
        }
    }
}
