use hybridlm::linalg::softmax;
use hybridlm::mopd::{
    grpo_advantage, mopd_advantage, reverse_kl_loss, sequence_kl_chain, sequence_kl_enumerated, surrogate_gradient,
    surrogate_loss, token_credits, token_weight, Domain, MopdBatch, MopdError, MopdResponse, MopdSettings,
    MopdTrainer, SamplerDrift, TabularPolicy, Teacher,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn response(train: Vec<f64>, sample: Vec<f64>, teacher: Vec<f64>, orm: f64) -> MopdResponse {
    MopdResponse {
        prompt: 0,
        tokens: vec![0; train.len()],
        train_logprob: train,
        sample_logprob: sample,
        teacher_logprob: teacher,
        orm_advantage: orm,
    }
}

#[test]
fn enumeration_and_chain_rule_agree() {
    let mut r = rng(1);
    for _ in 0..10 {
        let s = TabularPolicy::random(1, 5, 3, 2.0, &mut r);
        let t = TabularPolicy::random(1, 5, 3, 2.0, &mut r);
        let a = sequence_kl_enumerated(&s, &t, 0);
        let b = sequence_kl_chain(&s, &t, 0);
        assert!((a - b).abs() < 1e-10);
        assert!(a > 0.0);
        assert_eq!(sequence_kl_chain(&s, &s, 0), 0.0);
    }
}

#[test]
fn unit_advantage_reduces_to_cross_entropy() {
    // Teacher equals student, so the advantage is just the ORM term.
    let mut b = MopdBatch {
        responses: vec![
            response(vec![-0.5, -1.5], vec![-0.5, -1.5], vec![-0.5, -1.5], 1.0),
            response(vec![-2.0], vec![-2.0], vec![-2.0], 1.0),
        ],
        eps_low: 0.8,
        eps_high: 1.25,
        alpha: 1.0,
    };
    let expected = -((-0.5 - 1.5) / 2.0 + (-2.0)) / 2.0;
    assert!((surrogate_loss(&b).unwrap() - expected).abs() < 1e-15);

    // Every ratio is e, outside the band.
    for resp in &mut b.responses {
        resp.sample_logprob = resp.train_logprob.iter().map(|l| l - 1.0).collect();
    }
    assert_eq!(surrogate_loss(&b).unwrap(), 0.0);
    let p = TabularPolicy::zeros(1, 5, 2);
    let credits = token_credits(&b).unwrap();
    assert!(surrogate_gradient(&p, &b, &credits).unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn alpha_zero_is_pure_distillation() {
    let a = mopd_advantage(&[-1.0, -0.2], &[-2.0, -0.1], 5.0, 0.0).unwrap();
    assert!((a[0] - 1.0).abs() < 1e-15 && (a[1] + 0.1).abs() < 1e-15);
    assert_eq!(mopd_advantage(&[-1.0], &[-1.0], 0.0, 0.7).unwrap(), vec![0.0]);
    assert!(mopd_advantage(&[-1.0], &[], 0.0, 1.0).is_err());
}

#[test]
fn batch_validation() {
    let mut b = MopdBatch {
        responses: vec![response(vec![-1.0], vec![-1.0], vec![-1.0, -1.0], 0.0)],
        eps_low: 0.8,
        eps_high: 1.25,
        alpha: 1.0,
    };
    assert!(matches!(reverse_kl_loss(&b), Err(MopdError::LengthMismatch(_))));
    b.responses[0].teacher_logprob = vec![0.5];
    assert!(matches!(reverse_kl_loss(&b), Err(MopdError::PositiveLogProb(_))));
}

fn self_distill_trainer(alpha: f64, seed: u64) -> MopdTrainer {
    let mut r = rng(seed);
    let student = TabularPolicy::random(2, 5, 3, 1.0, &mut r);
    let domains = vec![Domain { name: "self".into(), teacher: Teacher::Student, prompts: vec![0, 1] }];
    let settings = MopdSettings { alpha, group_size: 8, ..Default::default() };
    MopdTrainer::new(student, domains, settings).unwrap()
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let mut t = self_distill_trainer(0.0, 3);
    let start = t.student.clone();
    let mut r = rng(4);
    for _ in 0..100 {
        let m = t.step(None, &mut r).unwrap();
        assert_eq!(m.mean_abs_advantage, 0.0);
        assert_eq!(m.reverse_kl_estimate, 0.0);
    }
    assert_eq!(t.student, start);
}

#[test]
fn outcome_reward_raises_the_rewarded_token() {
    let orm = |_: usize, y: &[u32]| if y[0] == 2 { 1.0 } else { 0.0 };
    let run = |alpha: f64| {
        let mut t = self_distill_trainer(alpha, 5);
        let mut r = rng(6);
        for _ in 0..30 {
            t.step(Some(&orm), &mut r).unwrap();
        }
        softmax(t.student.logits_at(0, &[]))[2]
    };
    let (base, mixed) = (run(0.0), run(0.5));
    assert!(mixed > base + 0.05, "{base} → {mixed}");
}

#[test]
fn stale_sampler_exercises_clipping() {
    let mut r = rng(7);
    let student = TabularPolicy::random(1, 5, 2, 0.5, &mut r);
    let mut teacher = TabularPolicy::random(1, 5, 2, 0.5, &mut r);
    teacher.logits.iter_mut().step_by(5).for_each(|l| *l += 4.0);
    let domains = vec![Domain { name: "d".into(), teacher: Teacher::Policy(teacher), prompts: vec![0] }];
    let settings = MopdSettings { learning_rate: 3.0, drift: SamplerDrift::Stale(4), ..Default::default() };
    let mut t = MopdTrainer::new(student, domains, settings).unwrap();
    let metrics: Vec<_> = (0..12).map(|_| t.step(None, &mut r).unwrap()).collect();
    assert_eq!(metrics[0].discard_frac, 0.0);
    assert!(metrics.iter().any(|m| m.discard_frac > 0.0));

    let mut r = rng(8);
    let student = TabularPolicy::random(1, 5, 2, 0.5, &mut r);
    let domains = vec![Domain { name: "d".into(), teacher: Teacher::Student, prompts: vec![0] }];
    let settings = MopdSettings { drift: SamplerDrift::ReducedPrecision, alpha: 0.0, ..Default::default() };
    let mut t = MopdTrainer::new(student, domains, settings).unwrap();
    let m = t.step(None, &mut r).unwrap();
    assert_eq!(m.discard_frac, 0.0);
}

#[test]
fn unknown_domain_and_bad_band() {
    let t = self_distill_trainer(0.0, 9);
    assert_eq!(t.domain_index("self").unwrap(), 0);
    assert_eq!(t.domain_index("poetry"), Err(MopdError::UnknownDomain("poetry".into())));
    let settings = MopdSettings { eps_low: 1.1, ..Default::default() };
    let p = TabularPolicy::zeros(1, 5, 1);
    assert!(MopdTrainer::new(p, vec![], settings).is_err());
}

proptest! {
    #[test]
    fn grpo_is_centered_and_shift_invariant(
        rewards in prop::collection::vec(-10.0f64..10.0, 2..20),
        shift in -5.0f64..5.0,
    ) {
        let a = grpo_advantage(&rewards, true).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-12 * a.len() as f64 + 1e-12);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = grpo_advantage(&shifted, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let u = grpo_advantage(&rewards, false).unwrap();
        prop_assert!(u.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn widening_the_band_never_discards_more(
        pairs in prop::collection::vec((-3.0f64..0.0, -0.5f64..0.5), 1..50),
        lo in 0.5f64..1.0,
        hi in 1.0f64..2.0,
        widen in 1.0f64..2.0,
    ) {
        let discarded = |l: f64, h: f64| {
            pairs.iter().filter(|(s, d)| token_weight((s + d).min(0.0), *s, l, h) == 0.0).count()
        };
        prop_assert!(discarded(lo / widen, hi * widen) <= discarded(lo, hi));
    }

    #[test]
    fn self_teacher_advantage_is_exactly_zero(lps in prop::collection::vec(-8.0f64..0.0, 1..20)) {
        prop_assert!(mopd_advantage(&lps, &lps, 0.0, 1.0).unwrap().iter().all(|a| *a == 0.0));
    }
}
