//! Self-check suites run by `hybridlm verify-suite`.
//!
//! Each suite compares a production path with an oracle on seeded random
//! fixtures and reports one [`PropertyResult`] per property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{sink_softmax, AttentionError, SinkSoftmax};
use crate::config::ModelConfig;
use crate::linalg::Matrix;
use crate::model::{ForwardOptions, HybridModel};
use crate::moe::FeedForward;
use crate::mopd::{
    sequence_kl_chain, sequence_kl_enumerated, surrogate_gradient, surrogate_loss_with, token_credits, MopdBatch,
    MopdResponse, TabularPolicy,
};
use crate::mtp::{speculative_decode, DraftChain, MtpDrafter, NoisyOracleDrafter};
use crate::oracle::{naive_sink_softmax, naive_softmax, reference_forward};

pub const SUITES: [&str; 5] = ["attention", "cache", "gradient", "replay", "speculative"];

pub type SinkSoftmaxFn = fn(&[f64], f64) -> Result<SinkSoftmax, AttentionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub config: ModelConfig,
    pub seed: u64,
    /// Suite names to run; empty runs all.
    pub only: Vec<String>,
    pub sink_softmax: SinkSoftmaxFn,
}

impl SuiteOptions {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            only: Vec::new(),
            sink_softmax,
        }
    }
}

/// Unknown names in `only`.
pub fn unknown_suites(only: &[String]) -> Vec<String> {
    only.iter().filter(|s| !SUITES.contains(&s.as_str())).cloned().collect()
}

pub fn run_suites(opts: &SuiteOptions) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for suite in SUITES {
        if !opts.only.is_empty() && !opts.only.iter().any(|s| s == suite) {
            continue;
        }
        match suite {
            "attention" => attention_suite(opts, &mut out),
            "cache" => cache_suite(opts, &mut out),
            "gradient" => gradient_suite(opts, &mut out),
            "replay" => replay_suite(opts, &mut out),
            _ => speculative_suite(opts, &mut out),
        }
    }
    out
}

fn record(out: &mut Vec<PropertyResult>, suite: &'static str, property: &'static str, worst: f64, tol: f64) {
    out.push(PropertyResult {
        suite,
        property,
        passed: worst <= tol,
        detail: format!("max error {worst:.3e} (tol {tol:.0e})"),
    });
}

fn rng(opts: &SuiteOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed ^ (salt << 32))
}

fn attention_suite(opts: &SuiteOptions, out: &mut Vec<PropertyResult>) {
    let mut r = rng(opts, 1);
    let (mut norm, mut direct, mut limit) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..=64);
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let sink = r.random_range(-40.0..40.0);
        let Ok(s) = (opts.sink_softmax)(&logits, sink) else {
            norm = f64::INFINITY;
            continue;
        };
        norm = norm.max((s.weights.iter().sum::<f64>() + s.sink_mass - 1.0).abs());
        let masked: Vec<Option<f64>> = logits.iter().copied().map(Some).collect();
        let (w, m) = naive_sink_softmax(&masked, sink);
        let d = s.weights.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold((s.sink_mass - m).abs(), f64::max);
        direct = direct.max(d);
        if let Ok(s40) = (opts.sink_softmax)(&logits, -40.0) {
            let p = naive_softmax(&logits);
            limit = limit.max(s40.weights.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    record(out, "attention", "sink-softmax normalization", norm, 1e-12);
    record(out, "attention", "sink-softmax direct formula", direct, 1e-12);
    record(out, "attention", "sink limit matches softmax", limit, 1e-9);

    let mut worst = 0.0f64;
    for s in 0..3 {
        let mut model = match HybridModel::init(&opts.config, opts.seed + s) {
            Ok(m) => m,
            Err(_) => {
                worst = f64::INFINITY;
                continue;
            }
        };
        randomize_sinks(&mut model, &mut r);
        let len = 24.min(opts.config.max_seq_len);
        let tokens = random_tokens(&mut r, len, opts.config.vocab_size);
        let trace = model.forward_full(&tokens).expect("forward");
        let reference = reference_forward(&model, &tokens, Some(&trace.routing)).expect("reference");
        worst = worst.max(max_abs_diff(&trace.logits, &reference));
    }
    record(out, "attention", "windowed forward vs brute force", worst, 1e-10);
}

fn cache_suite(opts: &SuiteOptions, out: &mut Vec<PropertyResult>) {
    let mut r = rng(opts, 2);
    let (mut step_err, mut chunk_err) = (0.0f64, 0.0f64);
    for s in 0..4 {
        let model = HybridModel::init(&opts.config, opts.seed + 100 + s).expect("init");
        let len = r.random_range(2..=40).min(opts.config.max_seq_len);
        let tokens = random_tokens(&mut r, len, opts.config.vocab_size);
        let full = model.forward_full(&tokens).expect("forward");
        let mut session = model.new_session();
        let mut stepped = Vec::new();
        for &t in &tokens {
            stepped.push(model.decode_step(&mut session, t, None).expect("step").logits);
        }
        step_err = step_err.max(max_abs_diff(&full.logits, &stepped));
        let split = len / 2;
        let mut session = model.new_session();
        let mut chunked = model.prefill(&mut session, &tokens[..split.max(1)]).expect("prefill").logits;
        if split.max(1) < len {
            chunked.extend(model.prefill(&mut session, &tokens[split.max(1)..]).expect("prefill").logits);
        }
        chunk_err = chunk_err.max(max_abs_diff(&full.logits, &chunked));
    }
    record(out, "cache", "stepwise decode vs full forward", step_err, 1e-8);
    record(out, "cache", "chunked prefill vs full forward", chunk_err, 1e-8);
}

fn gradient_suite(opts: &SuiteOptions, out: &mut Vec<PropertyResult>) {
    let mut r = rng(opts, 3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let student = TabularPolicy::random(2, 5, 3, 1.5, &mut r);
        let teacher = TabularPolicy::random(2, 5, 3, 1.5, &mut r);
        let batch = sampled_batch(&student, &teacher, 8, &mut r);
        worst = worst.max(finite_difference_error(&student, &batch));
    }
    record(out, "gradient", "surrogate gradient vs finite differences", worst, 1e-4);
    let mut kl = 0.0f64;
    for _ in 0..5 {
        let s = TabularPolicy::random(1, 5, 3, 2.0, &mut r);
        let t = TabularPolicy::random(1, 5, 3, 2.0, &mut r);
        kl = kl.max((sequence_kl_enumerated(&s, &t, 0) - sequence_kl_chain(&s, &t, 0)).abs());
    }
    record(out, "gradient", "reverse KL enumeration vs chain rule", kl, 1e-10);
}

fn replay_suite(opts: &SuiteOptions, out: &mut Vec<PropertyResult>) {
    let mut r = rng(opts, 4);
    let (mut repeat, mut immune, mut sensitive) = (0.0f64, 0.0f64, f64::INFINITY);
    for s in 0..3 {
        let model = HybridModel::init(&opts.config, opts.seed + 200 + s).expect("init");
        let tokens = random_tokens(&mut r, 16.min(opts.config.max_seq_len), opts.config.vocab_size);
        let rollout = model.forward_full(&tokens).expect("forward");
        let replay = ForwardOptions { replay: Some(&rollout.routing), ..Default::default() };
        let a = model.forward_full_with(&tokens, replay).expect("replay");
        let b = model.forward_full_with(&tokens, replay).expect("replay");
        repeat = repeat.max(bit_diff(&a.logits, &b.logits));
        let perturbed = perturb_routers(&model, 1e-3, &mut r);
        let c = perturbed.forward_full_with(&tokens, replay).expect("replay");
        immune = immune.max(bit_diff(&a.logits, &c.logits));
        let fresh = perturbed.forward_full(&tokens).expect("forward");
        sensitive = sensitive.min(max_abs_diff(&a.logits, &fresh.logits));
    }
    record(out, "replay", "replayed forward is bit-identical", repeat, 0.0);
    record(out, "replay", "replay immune to router perturbation", immune, 0.0);
    out.push(PropertyResult {
        suite: "replay",
        property: "fresh routing sees router perturbation",
        passed: sensitive > 0.0,
        detail: format!("min change {sensitive:.3e}"),
    });
}

fn speculative_suite(opts: &SuiteOptions, out: &mut Vec<PropertyResult>) {
    let mut r = rng(opts, 5);
    let mut mismatches = 0usize;
    let mut trials = 0usize;
    for s in 0..3u64 {
        let model = HybridModel::init(&opts.config, opts.seed + 300 + s).expect("init");
        let chain = DraftChain::replicated(&opts.config, opts.seed + 300 + s, 1 + s as usize);
        let prompt = random_tokens(&mut r, 6, opts.config.vocab_size);
        let greedy = model.greedy_decode(&prompt, 12).expect("greedy");
        let (spec, _) = speculative_decode(&model, &mut MtpDrafter::new(&chain), &prompt, 12).expect("spec");
        let mut noisy = NoisyOracleDrafter { depth: 3, agreement: 0.7, rng: ChaCha8Rng::seed_from_u64(s) };
        let (spec2, _) = speculative_decode(&model, &mut noisy, &prompt, 12).expect("spec");
        mismatches += usize::from(spec != greedy) + usize::from(spec2 != greedy);
        trials += 2;
    }
    out.push(PropertyResult {
        suite: "speculative",
        property: "speculative output equals greedy",
        passed: mismatches == 0,
        detail: format!("{mismatches}/{trials} mismatched"),
    });
}

/// Random fixture helpers shared with the test suites.
pub fn random_tokens<R: Rng>(r: &mut R, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

pub fn randomize_sinks<R: Rng>(model: &mut HybridModel, r: &mut R) {
    for b in &mut model.blocks {
        for s in &mut b.attn.sinks {
            *s = r.random_range(-2.0..2.0);
        }
    }
}

/// Copy of `model` with every router weight shifted by `±eps`.
pub fn perturb_routers<R: Rng>(model: &HybridModel, eps: f64, r: &mut R) -> HybridModel {
    let mut m = model.clone();
    for b in &mut m.blocks {
        if let FeedForward::Moe(moe) = &mut b.ffn {
            let g: &mut Matrix = &mut moe.router.gate_weights;
            for w in &mut g.data {
                *w += if r.random::<bool>() { eps } else { -eps };
            }
        }
    }
    m
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// 0 when every value has the same bit pattern, else 1.
pub fn bit_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let same = a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    if same {
        0.0
    } else {
        1.0
    }
}

/// On-policy batch from `student` scored by `teacher`, with random ORM
/// advantages and a perturbed sampling side so some weights differ from 1.
pub fn sampled_batch<R: Rng>(student: &TabularPolicy, teacher: &TabularPolicy, n: usize, r: &mut R) -> MopdBatch {
    let responses = (0..n)
        .map(|_| {
            let prompt = r.random_range(0..student.num_prompts);
            let tokens = student.sample(prompt, r);
            let train = student.token_logprobs(prompt, &tokens).unwrap();
            let sample = train.iter().map(|l| (l + r.random_range(-0.1..0.1)).min(0.0)).collect();
            MopdResponse {
                prompt,
                teacher_logprob: teacher.token_logprobs(prompt, &tokens).unwrap(),
                train_logprob: train,
                sample_logprob: sample,
                tokens,
                orm_advantage: r.random_range(-1.0..1.0),
            }
        })
        .collect();
    MopdBatch { responses, eps_low: 0.8, eps_high: 1.25, alpha: 0.5 }
}

/// Largest relative gap between the analytic surrogate gradient and central
/// differences at `h = 1e-5`, with weights and advantages frozen.
pub fn finite_difference_error(policy: &TabularPolicy, batch: &MopdBatch) -> f64 {
    let credits = token_credits(batch).expect("credits");
    let grad = surrogate_gradient(policy, batch, &credits).expect("gradient");
    let h = 1e-5;
    let mut p = policy.clone();
    let mut worst = 0.0f64;
    for i in 0..p.logits.len() {
        let orig = p.logits[i];
        p.logits[i] = orig + h;
        let up = surrogate_loss_with(&p, batch, &credits).unwrap();
        p.logits[i] = orig - h;
        let down = surrogate_loss_with(&p, batch, &credits).unwrap();
        p.logits[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    worst
}

/// Test fixture: sink softmax whose denominator forgets the sink term.
pub fn sink_softmax_missing_sink_term(logits: &[f64], sink: f64) -> Result<SinkSoftmax, AttentionError> {
    let mut s = sink_softmax(logits, f64::NEG_INFINITY)?;
    s.sink_mass = crate::linalg::sigmoid(sink - s.row_max);
    Ok(s)
}
