mod common;

use hybridlm::linalg::Matrix;
use hybridlm::model::ForwardOptions;
use hybridlm::moe::{
    expert_loads, route, select_experts, sequence_aux_loss, update_expert_bias, RouterState, RoutingRecord,
};
use hybridlm::verify::bit_diff;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn imbalance(loads: &[f64]) -> f64 {
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    loads.iter().cloned().fold(0.0, f64::max) / mean
}

#[test]
fn bias_updates_balance_a_skewed_router() {
    let (e, h, k) = (8, 16, 2);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut w = Matrix::randn(e, h, 0.3, 3, 0);
    // Experts 0 and 1 attract nearly every token.
    for c in 0..h {
        w.set(0, c, w.get(0, c) + 0.12);
        w.set(1, c, w.get(1, c) + 0.08);
    }
    let mut state = RouterState::new(w);
    state.bias_update_factor = hybridlm::moe::BIAS_UPDATE_PRETRAIN;
    let batch = |r: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..h).map(|_| {
                let z: f64 = StandardNormal.sample(r);
                1.0 + 0.5 * z
            }).collect())
            .collect()
    };
    let loads_of = |s: &RouterState, xs: &[Vec<f64>]| {
        expert_loads(&xs.iter().map(|x| route(x, s, k)).collect::<Vec<_>>(), e)
    };
    let probe = batch(&mut r, 8192);
    let before = imbalance(&loads_of(&state, &probe));
    for _ in 0..3000 {
        let xs = batch(&mut r, 256);
        let loads = loads_of(&state, &xs);
        update_expert_bias(&mut state, &loads);
    }
    let after = imbalance(&loads_of(&state, &probe));
    assert!(before > 3.0, "before {before}");
    assert!(after < 1.15, "after {after}");
}

#[test]
fn decode_routing_replays_bit_exactly_in_full_forward() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let cfg = common::random_config(&mut r, 4, 64);
        let model = common::random_model(&mut r, &cfg);
        let len = r.random_range(2..30);
        let toks = common::tokens(&mut r, len, cfg.vocab_size);
        let mut session = model.new_session();
        let mut record = RoutingRecord::new(cfg.experts_per_token);
        let mut stepped = Vec::new();
        for &t in &toks {
            let out = model.decode_step(&mut session, t, None).unwrap();
            record.extend(&out.routing);
            stepped.push(out.logits);
        }
        let replay = ForwardOptions { replay: Some(&record), ..Default::default() };
        let trained = model.forward_full_with(&toks, replay).unwrap();
        assert_eq!(bit_diff(&trained.logits, &stepped), 0.0);
        assert_eq!(trained.routing, record);
        assert_eq!(record.slice(0..1).num_tokens(), 1);
    }
}

#[test]
fn replay_shape_is_checked() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let cfg = common::micro();
    let model = common::random_model(&mut r, &cfg);
    let rec = model.forward_full(&[1, 2, 3]).unwrap().routing;
    let opts = ForwardOptions { replay: Some(&rec), ..Default::default() };
    assert!(model.forward_full_with(&[1, 2], opts).is_err());
    let mut bad = rec.clone();
    bad.layers[0].tokens[0].experts[0] = cfg.num_experts;
    let opts = ForwardOptions { replay: Some(&bad), ..Default::default() };
    assert!(model.forward_full_with(&[1, 2, 3], opts).is_err());
}

#[test]
fn aux_loss_extremes() {
    let balanced = vec![vec![0.25; 4]; 8];
    assert!((sequence_aux_loss(&balanced, 1) - 1.0).abs() < 1e-12);
    let collapsed = vec![vec![1.0, 0.0, 0.0, 0.0]; 8];
    assert!((sequence_aux_loss(&collapsed, 1) - 4.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn selection_invariants(
        scores in prop::collection::vec(0.001f64..1.0, 2..12),
        bias_scale in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let e = scores.len();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let bias: Vec<f64> = (0..e).map(|_| bias_scale * (r.random::<f64>() - 0.5)).collect();
        let k = r.random_range(1..=e);
        let sel = select_experts(&scores, &bias, k);
        prop_assert_eq!(sel.experts.len(), k);
        let mut uniq = sel.experts.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), k);
        prop_assert!((sel.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Gates follow raw scores, not biased ones.
        let total: f64 = sel.experts.iter().map(|&i| scores[i]).sum();
        for (&i, &g) in sel.experts.iter().zip(&sel.gates) {
            prop_assert!((g - scores[i] / total).abs() < 1e-12);
        }
        // Every unselected expert ranks no higher than every selected one.
        for j in (0..e).filter(|j| !sel.experts.contains(j)) {
            for &i in &sel.experts {
                prop_assert!(scores[i] + bias[i] >= scores[j] + bias[j]);
            }
        }
    }
}
