//! Slow reference implementations used as test oracles.
//!
//! Nothing here shares attention code with the production path: scores are a
//! dense `L × L` matrix per head, masks are boolean matrices built from the
//! layer kind, the softmax is the unshifted textbook formula and rotary
//! embedding goes through explicit complex multiplication.

use crate::model::{HybridModel, ModelError};
use crate::moe::RoutingRecord;

/// Textbook sink softmax without max-shifting. `None` entries are masked.
/// Returns the key weights and the sink's share.
pub fn naive_sink_softmax(logits: &[Option<f64>], sink: f64) -> (Vec<f64>, f64) {
    let exps: Vec<f64> = logits.iter().map(|a| a.map_or(0.0, f64::exp)).collect();
    let denom = sink.exp() + exps.iter().sum::<f64>();
    (exps.iter().map(|e| e / denom).collect(), sink.exp() / denom)
}

/// Plain softmax without a sink, unshifted.
pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|a| a.exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn rope_complex(v: &[f64], pos: usize, base: f64, rot: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    for t in 0..rot / 2 {
        let freq = 1.0 / base.powf((2 * t) as f64 / rot as f64);
        let angle = pos as f64 * freq;
        // (a + ib) · e^{iθ}
        let (a, b) = (v[2 * t], v[2 * t + 1]);
        let (c, s) = (angle.cos(), angle.sin());
        out[2 * t] = a * c - b * s;
        out[2 * t + 1] = a * s + b * c;
    }
    out
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + crate::linalg::RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn matvec(m: &crate::linalg::Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows)
        .map(|r| (0..m.cols).map(|c| m.get(r, c) * x[c]).sum())
        .collect()
}

/// Boolean visibility matrix for one layer: `mask[i][j]` is true when query
/// `i` may see key `j`.
pub fn mask_matrix(len: usize, window: Option<usize>) -> Vec<Vec<bool>> {
    (0..len)
        .map(|i| {
            (0..len)
                .map(|j| j <= i && window.is_none_or(|w| i - j < w))
                .collect()
        })
        .collect()
}

/// Logits of every position from a brute-force forward pass. MoE layers
/// route fresh unless `replay` is given.
pub fn reference_forward(
    model: &HybridModel,
    tokens: &[u32],
    replay: Option<&RoutingRecord>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let n = tokens.len();
    let mut x = tokens.iter().map(|&t| model.embed(t)).collect::<Result<Vec<_>, _>>()?;
    for (l, block) in model.blocks.iter().enumerate() {
        let a = &block.attn;
        let sh = a.shape;
        let group = sh.q_heads / sh.kv_heads;
        let mask = mask_matrix(n, a.window);
        let normed: Vec<Vec<f64>> = x.iter().map(|h| rms(h, &block.attn_norm)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&a.wq, h)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&a.wk, h)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&a.wv, h)).collect();
        let qk = sh.head_dim_qk;
        let dv = sh.head_dim_v;
        let mut concat = vec![vec![0.0; sh.q_heads * dv]; n];
        for head in 0..sh.q_heads {
            let kvh = head / group;
            let qs: Vec<Vec<f64>> = (0..n)
                .map(|i| rope_complex(&q[i][head * qk..(head + 1) * qk], i, a.rope_base, a.rope_rot_dims))
                .collect();
            let ks: Vec<Vec<f64>> = (0..n)
                .map(|j| rope_complex(&k[j][kvh * qk..(kvh + 1) * qk], j, a.rope_base, a.rope_rot_dims))
                .collect();
            for i in 0..n {
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|j| {
                        mask[i][j].then(|| {
                            qs[i].iter().zip(&ks[j]).map(|(p, r)| p * r).sum::<f64>() / (qk as f64).sqrt()
                        })
                    })
                    .collect();
                let (w, _) = naive_sink_softmax(&scores, a.sinks[head]);
                for (j, wj) in w.iter().enumerate() {
                    for d in 0..dv {
                        concat[i][head * dv + d] += wj * v[j][kvh * dv + d];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&a.wo, &concat[i]);
            for (h, oi) in x[i].iter_mut().zip(o) {
                *h += oi;
            }
        }
        let normed: Vec<Vec<f64>> = x.iter().map(|h| rms(h, &block.ffn_norm)).collect();
        let rows = replay.and_then(|r| r.layer(l)).map(|r| r.tokens.as_slice());
        let (out, _) = block.ffn.forward(&normed, rows)?;
        for (h, o) in x.iter_mut().zip(out) {
            for (hi, oi) in h.iter_mut().zip(o) {
                *hi += oi;
            }
        }
    }
    Ok(x.iter()
        .map(|h| matvec(&model.head, &rms(h, &model.final_norm)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks() {
        let m = mask_matrix(4, Some(2));
        assert_eq!(m[3], vec![false, false, true, true]);
        assert_eq!(m[0], vec![true, false, false, false]);
        let g = mask_matrix(3, None);
        assert_eq!(g[2], vec![true, true, true]);
    }

    #[test]
    fn naive_sink_sums_to_one() {
        let (w, s) = naive_sink_softmax(&[Some(0.5), None, Some(-1.0)], 0.3);
        assert_eq!(w[1], 0.0);
        assert!((w.iter().sum::<f64>() + s - 1.0).abs() < 1e-15);
    }
}
