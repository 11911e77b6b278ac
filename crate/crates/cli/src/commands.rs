use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use hybridlm::checkpoint;
use hybridlm::kvcache::memory_report;
use hybridlm::linalg::argmax;
use hybridlm::model::{count_params, ForwardOptions, HybridModel};
use hybridlm::moe::RoutingRecord;
use hybridlm::mopd::{
    Domain, MopdSettings, MopdTrainer, OutcomeReward, SamplerDrift, TabularPolicy, Teacher, DEFAULT_ALPHA,
    DEFAULT_EPS_HIGH, DEFAULT_EPS_LOW,
};
use hybridlm::mtp::{
    fit_acceptance_curve, speculative_decode, DraftChain, Drafter, MtpDrafter, NoisyOracleDrafter,
    SampledOracleDrafter, SpecDecodeStats,
};
use hybridlm::verify::{
    bit_diff, perturb_routers, random_tokens, run_suites, sink_softmax_missing_sink_term, unknown_suites,
    SuiteOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::prompts::{self, PromptSet};
use crate::{Command, Ctx, Status};

/// Largest model the CLI will instantiate.
const MAX_PARAMS: u64 = 50_000_000;
/// Largest tabular policy state space for `mopd-train`.
const MAX_POLICY_STATES: usize = 1_000_000;

pub fn run(cmd: &Command, ctx: &mut Ctx) -> anyhow::Result<Status> {
    match cmd {
        Command::Demo(a) => demo(ctx, a),
        Command::BenchDecode(a) => bench_decode(ctx, a),
        Command::CacheReport(a) => cache_report(ctx, a),
        Command::ReplayCheck(a) => replay_check(ctx, a),
        Command::MopdTrain(a) => mopd_train(ctx, a),
        Command::VerifySuite(a) => verify_suite(ctx, a),
        Command::FitCurve(a) => fit_curve(ctx, a),
        Command::Dump(a) => dump(ctx, a),
        Command::Load(a) => load(ctx, a),
    }
}

/// Aligned `key = value` lines.
fn kv_block(rows: &[(&str, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        writeln!(out, "{k:<width$} = {v}").unwrap();
    }
    out
}

fn ids(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn ensure_instantiable(ctx: &Ctx) -> anyhow::Result<()> {
    let total = count_params(&ctx.config).total;
    if total > MAX_PARAMS {
        bail!("config has {total} parameters, too large to instantiate here (limit {MAX_PARAMS}); use --profile tiny or small");
    }
    Ok(())
}

/// Loads `checkpoint` if given (adopting its config), else initializes from the run config.
fn build_model(ctx: &mut Ctx, checkpoint: Option<&Path>) -> anyhow::Result<HybridModel> {
    match checkpoint {
        Some(path) => {
            let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ctx.config = model.config.clone();
            ctx.seed = model.config.seed;
            Ok(model)
        }
        None => {
            ensure_instantiable(ctx)?;
            Ok(HybridModel::init(&ctx.config, ctx.seed)?)
        }
    }
}

/// Caps `max_new` so prompt plus output fit the context.
fn room(model: &HybridModel, prompt_len: usize, max_new: usize) -> anyhow::Result<usize> {
    let max = model.config.max_seq_len;
    if prompt_len == 0 || prompt_len > max {
        bail!("prompt length {prompt_len} outside 1..={max}");
    }
    Ok(max_new.min(max + 1 - prompt_len))
}

fn stats_rows(s: &SpecDecodeStats) -> Vec<(&'static str, String)> {
    let hist = s
        .per_round_accepted
        .iter()
        .enumerate()
        .map(|(a, n)| format!("{a}:{n}"))
        .collect::<Vec<_>>()
        .join(" ");
    vec![
        ("depth", s.depth.to_string()),
        ("rounds", s.rounds.to_string()),
        ("draft_tokens_proposed", s.draft_tokens_proposed.to_string()),
        ("draft_tokens_accepted", s.draft_tokens_accepted.to_string()),
        ("draft_tokens_rejected", s.draft_tokens_rejected.to_string()),
        ("accepted_per_round", hist),
        ("mean_accept_length", format!("{:.6}", s.mean_accept_length())),
        ("accepted_std", format!("{:.6}", s.accepted_std())),
        ("mean_output_entropy", format!("{:.6}", s.mean_output_entropy())),
    ]
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Draft depth; defaults to the config's `mtp_steps`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 24)]
    max_new: usize,
    /// Use a saved model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn demo(ctx: &mut Ctx, a: &DemoArgs) -> anyhow::Result<Status> {
    let model = build_model(ctx, a.checkpoint.as_deref())?;
    let k = a.k.unwrap_or(model.config.mtp_steps);
    let chain = DraftChain::replicated(&model.config, ctx.seed, k);
    let mut out = String::new();
    let mut total = SpecDecodeStats::new(k);
    let mut failures = Vec::new();
    for set in prompts::bundled(model.config.vocab_size, ctx.seed) {
        for (i, p) in set.prompts.iter().enumerate() {
            let n = room(&model, p.len(), a.max_new)?;
            let greedy = model.greedy_decode(p, n)?;
            let (spec, stats) = speculative_decode(&model, &mut MtpDrafter::new(&chain), p, n)?;
            let tag = format!("{}/{i}", set.name);
            writeln!(out, "[{tag}] prompt      {}", ids(p))?;
            writeln!(out, "[{tag}] greedy      {}", ids(&greedy))?;
            writeln!(out, "[{tag}] speculative {}", ids(&spec))?;
            if spec != greedy {
                failures.push(format!("losslessness check: speculative stream differs from greedy on {tag}"));
            }
            total.merge(&stats);
        }
    }
    let mut rows = stats_rows(&total);
    rows.push(("lossless", failures.is_empty().to_string()));
    out.push_str(&kv_block(&rows));
    print!("{out}");
    ctx.write("demo.txt", &out)?;
    Ok(if failures.is_empty() { Status::Pass } else { Status::Fail(failures) })
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DrafterKind {
    /// Chained draft heads.
    Mtp,
    /// Samples the main model's own distribution; acceptance tracks entropy.
    Sampled,
    /// True continuation with random corruption at a fixed rate.
    Noisy,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Draft depth; defaults to the config's `mtp_steps`.
    #[arg(long)]
    k: Option<usize>,
    /// Prompt file (`[name:] id id id` per line); defaults to the bundled sets.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Number of model seeds, counting up from the run seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = DrafterKind::Mtp)]
    drafter: DrafterKind,
    /// Temperature for `--drafter sampled`.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Per-token agreement for `--drafter noisy`.
    #[arg(long, default_value_t = 0.7)]
    agreement: f64,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Output-head multipliers to sweep (comma-separated). Larger values
    /// sharpen the main model and lower its output entropy.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    head_scale: Vec<f64>,
}

fn bench_decode(ctx: &mut Ctx, a: &BenchArgs) -> anyhow::Result<Status> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if !(a.temperature > 0.0) {
        bail!("--temperature must be positive");
    }
    if !(0.0..=1.0).contains(&a.agreement) {
        bail!("--agreement must lie in [0, 1]");
    }
    if a.head_scale.is_empty() || a.head_scale.iter().any(|x| !x.is_finite()) {
        bail!("--head-scale needs finite values");
    }
    ensure_instantiable(ctx)?;
    let k = a.k.unwrap_or(ctx.config.mtp_steps);
    let sets: Vec<PromptSet> = match &a.prompts {
        Some(path) => prompts::from_file(path, ctx.config.vocab_size)?,
        None => prompts::bundled(ctx.config.vocab_size, ctx.seed),
    };
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["dataset", "mean_entropy", "mean_accept_length"])?;
    let mut total = SpecDecodeStats::new(k);
    let mut failures = Vec::new();
    for s in 0..a.seeds {
        let seed = ctx.seed.wrapping_add(s);
        let mut cfg = ctx.config.clone();
        cfg.seed = seed;
        let base = HybridModel::init(&cfg, seed)?;
        let chain = DraftChain::replicated(&cfg, seed, k);
        for (&scale, set) in a.head_scale.iter().flat_map(|x| sets.iter().map(move |s| (x, s))) {
            let mut model = base.clone();
            model.head.data.iter_mut().for_each(|w| *w *= scale);
            let mut stats = SpecDecodeStats::new(k);
            for (i, p) in set.prompts.iter().enumerate() {
                let n = room(&model, p.len(), a.max_new)?;
                let rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
                let (tokens, st) = match a.drafter {
                    DrafterKind::Mtp => decode_with(&model, &mut MtpDrafter::new(&chain), p, n)?,
                    DrafterKind::Sampled => {
                        let mut d = SampledOracleDrafter { depth: k, temperature: a.temperature, rng };
                        decode_with(&model, &mut d, p, n)?
                    }
                    DrafterKind::Noisy => {
                        let mut d = NoisyOracleDrafter { depth: k, agreement: a.agreement, rng };
                        decode_with(&model, &mut d, p, n)?
                    }
                };
                if tokens != model.greedy_decode(p, n)? {
                    failures.push(format!("losslessness check: {}/{i} seed {seed}", set.name));
                }
                stats.merge(&st);
            }
            let mut label = set.name.clone();
            if a.head_scale.len() > 1 {
                write!(label, "*{scale}")?;
            }
            if a.seeds > 1 {
                write!(label, "@{seed}")?;
            }
            csv.write_record([
                label,
                format!("{:.6}", stats.mean_output_entropy()),
                format!("{:.6}", stats.mean_accept_length()),
            ])?;
            total.merge(&stats);
        }
    }
    let table = String::from_utf8(csv.into_inner()?)?;
    let summary = kv_block(&stats_rows(&total));
    print!("{table}\n{summary}");
    ctx.write("bench.csv", &table)?;
    ctx.write("bench_stats.txt", &summary)?;
    Ok(if failures.is_empty() { Status::Pass } else { Status::Fail(failures) })
}

fn decode_with<D: Drafter>(
    model: &HybridModel,
    d: &mut D,
    prompt: &[u32],
    n: usize,
) -> anyhow::Result<(Vec<u32>, SpecDecodeStats)> {
    Ok(speculative_decode(model, d, prompt, n)?)
}

#[derive(Args, Debug)]
pub struct CacheArgs {
    /// Sequence length; defaults to the config's `max_seq_len`.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 2)]
    bytes_per_scalar: usize,
}

fn cache_report(ctx: &mut Ctx, a: &CacheArgs) -> anyhow::Result<Status> {
    let seq_len = a.seq_len.unwrap_or(ctx.config.max_seq_len);
    if seq_len == 0 {
        bail!("--seq-len must be at least 1");
    }
    if a.bytes_per_scalar == 0 {
        bail!("--bytes-per-scalar must be at least 1");
    }
    let text = memory_report(&ctx.config, seq_len, a.bytes_per_scalar).to_string();
    print!("{text}");
    ctx.write("cache_report.txt", &text)?;
    Ok(Status::Pass)
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long, default_value_t = 12)]
    prompt_len: usize,
    #[arg(long, default_value_t = 12)]
    new_tokens: usize,
    /// Router weight perturbation applied before replaying.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn replay_check(ctx: &mut Ctx, a: &ReplayArgs) -> anyhow::Result<Status> {
    let model = build_model(ctx, a.checkpoint.as_deref())?;
    let cfg = &model.config;
    let total = a.prompt_len + a.new_tokens;
    if a.prompt_len == 0 || total > cfg.max_seq_len {
        bail!("need 1 <= prompt-len and prompt-len + new-tokens <= {}", cfg.max_seq_len);
    }
    let mut r = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut tokens = random_tokens(&mut r, a.prompt_len, cfg.vocab_size);
    let mut session = model.new_session();
    let mut record = RoutingRecord::new(cfg.experts_per_token);
    let mut stepped = Vec::with_capacity(total);
    for i in 0..total {
        let step = model.decode_step(&mut session, tokens[i], None)?;
        record.extend(&step.routing);
        if i + 1 == tokens.len() && tokens.len() < total {
            tokens.push(argmax(&step.logits) as u32);
        }
        stepped.push(step.logits);
    }

    let path = ctx.write("routing.txt", &record.to_text())?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = RoutingRecord::from_text(&text)?;
    let replay = ForwardOptions { replay: Some(&parsed), ..Default::default() };
    let full = model.forward_full_with(&tokens, replay)?;
    let perturbed = perturb_routers(&model, a.eps, &mut r);
    let fresh = perturbed.forward_full(&tokens)?;
    let replayed = perturbed.forward_full_with(&tokens, replay)?;

    let flips = expert_flips(&record, &fresh.routing);
    let checks = [
        ("text_round_trip", parsed == record),
        ("replay_matches_decode", bit_diff(&full.logits, &stepped) == 0.0 && full.routing == parsed),
        ("perturbed_replay_matches_decode", bit_diff(&replayed.logits, &stepped) == 0.0),
    ];
    let mut rows = vec![
        ("tokens", total.to_string()),
        ("moe_layers", record.layers.len().to_string()),
        ("experts_per_token", cfg.experts_per_token.to_string()),
        ("router_perturbation", format!("{}", a.eps)),
        ("perturbed_fresh_expert_flips", flips.to_string()),
    ];
    rows.extend(checks.iter().map(|(k, ok)| (*k, ok.to_string())));
    let text = kv_block(&rows);
    print!("{text}");
    ctx.write("replay_check.txt", &text)?;
    let failures: Vec<String> = checks.iter().filter(|(_, ok)| !ok).map(|(k, _)| k.to_string()).collect();
    Ok(if failures.is_empty() { Status::Pass } else { Status::Fail(failures) })
}

/// (layer, token) pairs whose selected expert sets differ.
fn expert_flips(a: &RoutingRecord, b: &RoutingRecord) -> usize {
    let mut flips = 0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (ta, tb) in la.tokens.iter().zip(&lb.tokens) {
            let mut ea = ta.experts.clone();
            let mut eb = tb.experts.clone();
            ea.sort_unstable();
            eb.sort_unstable();
            flips += usize::from(ea != eb);
        }
    }
    flips
}

#[derive(Args, Debug)]
pub struct MopdArgs {
    /// Comma-separated `name:prompts`. A domain named `self` uses the student as its teacher.
    #[arg(long, default_value = "math:2,code:2")]
    domains: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_LOW)]
    eps_low: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_HIGH)]
    eps_high: f64,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    group_size: usize,
    /// Sampler drift: `none`, `f32`, or `stale:N`.
    #[arg(long, default_value = "none")]
    drift: String,
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    seq_len: usize,
}

fn parse_drift(s: &str) -> anyhow::Result<SamplerDrift> {
    match s {
        "none" => Ok(SamplerDrift::None),
        "f32" => Ok(SamplerDrift::ReducedPrecision),
        _ => match s.strip_prefix("stale:").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(SamplerDrift::Stale(n)),
            _ => bail!("bad --drift {s:?}; expected none, f32 or stale:N"),
        },
    }
}

fn parse_domains(spec: &str) -> anyhow::Result<Vec<(String, usize)>> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, n) = match part.split_once(':') {
            Some((name, n)) => (name.trim(), n.trim().parse().with_context(|| format!("bad prompt count in {part:?}"))?),
            None => (part, 1),
        };
        if name.is_empty() || n == 0 {
            bail!("bad domain entry {part:?}");
        }
        if out.iter().any(|(d, _)| d == name) {
            bail!("duplicate domain {name:?}");
        }
        out.push((name.to_string(), n));
    }
    if out.is_empty() {
        bail!("--domains is empty");
    }
    Ok(out)
}

fn mopd_train(ctx: &mut Ctx, a: &MopdArgs) -> anyhow::Result<Status> {
    let specs = parse_domains(&a.domains)?;
    if a.vocab < 2 || a.seq_len == 0 {
        bail!("need --vocab >= 2 and --seq-len >= 1");
    }
    let states = (0..a.seq_len).try_fold(0usize, |acc, t| acc.checked_add(a.vocab.checked_pow(t as u32)?));
    if states.is_none_or(|s| s > MAX_POLICY_STATES) {
        bail!("policy with vocab {} and length {} is too large", a.vocab, a.seq_len);
    }
    let num_prompts: usize = specs.iter().map(|(_, n)| n).sum();
    let mut r = ChaCha8Rng::seed_from_u64(ctx.seed);
    let student = TabularPolicy::random(num_prompts, a.vocab, a.seq_len, 0.5, &mut r);
    // Outcome reward: the response opens with the teacher's preferred token.
    let mut best = vec![0u32; num_prompts];
    let mut domains = Vec::with_capacity(specs.len());
    let mut next = 0;
    for (name, n) in &specs {
        let prompts: Vec<usize> = (next..next + n).collect();
        next += n;
        let teacher = if name == "self" {
            Teacher::Student
        } else {
            Teacher::Policy(TabularPolicy::random(num_prompts, a.vocab, a.seq_len, 3.0, &mut r))
        };
        for &p in &prompts {
            best[p] = match &teacher {
                Teacher::Student => student.greedy_first(p),
                Teacher::Policy(t) => t.greedy_first(p),
            };
        }
        domains.push(Domain { name: name.clone(), teacher, prompts });
    }
    let settings = MopdSettings {
        learning_rate: a.lr,
        group_size: a.group_size,
        alpha: a.alpha,
        eps_low: a.eps_low,
        eps_high: a.eps_high,
        drift: parse_drift(&a.drift)?,
    };
    if a.group_size == 0 {
        bail!("--group-size must be at least 1");
    }
    let mut trainer = MopdTrainer::new(student, domains, settings)?;
    let orm = move |p: usize, y: &[u32]| if y.first() == Some(&best[p]) { 1.0 } else { 0.0 };
    let orm_ref: Option<&OutcomeReward> = if a.alpha != 0.0 { Some(&orm) } else { None };
    let initial: Vec<f64> = (0..specs.len()).map(|d| trainer.exact_reverse_kl(d)).collect();

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["step", "reverse_kl_per_domain", "discard_frac", "loss"])?;
    let mut finite = true;
    let mut last = initial.clone();
    for _ in 0..a.steps {
        let m = trainer.step(orm_ref, &mut r)?;
        let kl = specs
            .iter()
            .zip(&m.reverse_kl_per_domain)
            .map(|((name, _), v)| format!("{name}={v:.9}"))
            .collect::<Vec<_>>()
            .join(";");
        finite &= m.loss.is_finite() && m.reverse_kl_per_domain.iter().all(|v| v.is_finite());
        csv.write_record([m.step.to_string(), kl, format!("{:.6}", m.discard_frac), format!("{:.9}", m.loss)])?;
        last = m.reverse_kl_per_domain;
    }
    let table = String::from_utf8(csv.into_inner()?)?;
    let mut rows = Vec::new();
    for (i, (name, _)) in specs.iter().enumerate() {
        rows.push((name.as_str(), format!("reverse_kl {:.6} -> {:.6}", initial[i], last[i])));
    }
    let summary = kv_block(&rows);
    print!("{table}\n{summary}");
    ctx.write("mopd.csv", &table)?;
    Ok(if finite { Status::Pass } else { Status::Fail(vec!["non-finite loss or reverse KL".into()]) })
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Suites to run (comma-separated or repeated): attention, cache, gradient, replay, speculative.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Swap in a known-bad component to check that the suite catches it.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn verify_suite(ctx: &mut Ctx, a: &VerifyArgs) -> anyhow::Result<Status> {
    let unknown = unknown_suites(&a.only);
    if !unknown.is_empty() {
        bail!("unknown suite(s): {}", unknown.join(", "));
    }
    ensure_instantiable(ctx)?;
    let mut opts = SuiteOptions::new(ctx.config.clone(), ctx.seed);
    opts.only = a.only.clone();
    match a.inject_fault.as_deref() {
        None => {}
        Some("sink-normalization") => opts.sink_softmax = sink_softmax_missing_sink_term,
        Some(other) => bail!("unknown fault {other:?}"),
    }
    let results = run_suites(&opts);
    let sw = results.iter().map(|r| r.suite.len()).max().unwrap_or(0);
    let pw = results.iter().map(|r| r.property.len()).max().unwrap_or(0);
    let mut table = String::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["suite", "property", "passed", "detail"])?;
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        writeln!(table, "{:<sw$}  {:<pw$}  {mark}  {}", r.suite, r.property, r.detail)?;
        csv.write_record([r.suite, r.property, if r.passed { "true" } else { "false" }, r.detail.as_str()])?;
    }
    let passed = results.iter().filter(|r| r.passed).count();
    writeln!(table, "{passed}/{} properties passed", results.len())?;
    print!("{table}");
    ctx.write("verify.txt", &table)?;
    ctx.write("verify.csv", &String::from_utf8(csv.into_inner()?)?)?;
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {} ({})", r.suite, r.property, r.detail))
        .collect();
    Ok(if failures.is_empty() { Status::Pass } else { Status::Fail(failures) })
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV of `entropy,accept_length` rows, or `bench-decode` output.
    csv: PathBuf,
}

fn read_points(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut cols = (0, 1);
    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let field = |c: usize| rec.get(c).and_then(|s| s.parse::<f64>().ok());
        match (field(cols.0), field(cols.1)) {
            (Some(x), Some(y)) => points.push((x, y)),
            _ if i == 0 => {
                let named: BTreeMap<&str, usize> = rec.iter().enumerate().map(|(c, s)| (s, c)).collect();
                if let (Some(&x), Some(&y)) = (named.get("mean_entropy"), named.get("mean_accept_length")) {
                    cols = (x, y);
                }
            }
            _ => bail!("{}: row {} is not a pair of numbers", path.display(), i + 1),
        }
    }
    Ok(points)
}

fn fit_curve(ctx: &mut Ctx, a: &FitArgs) -> anyhow::Result<Status> {
    let points = read_points(&a.csv)?;
    let fit = fit_acceptance_curve(&points).with_context(|| format!("fitting {}", a.csv.display()))?;
    let text = kv_block(&[
        ("points", points.len().to_string()),
        ("ceiling", format!("{:.9}", fit.ceiling)),
        ("scale", format!("{:.9}", fit.scale)),
        ("exponent", format!("{:.9}", fit.exponent)),
        ("r_squared", format!("{:.9}", fit.r_squared)),
    ]);
    print!("{text}");
    ctx.write("fit.txt", &text)?;
    Ok(Status::Pass)
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    /// Destination; defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn dump(ctx: &mut Ctx, a: &DumpArgs) -> anyhow::Result<Status> {
    let model = build_model(ctx, None)?;
    let path = a.output.clone().unwrap_or_else(|| ctx.out_dir.join("model.ckpt"));
    checkpoint::save(&model, &path).with_context(|| format!("writing {}", path.display()))?;
    let bytes = std::fs::metadata(&path)?.len();
    print!(
        "{}",
        kv_block(&[
            ("checkpoint", path.display().to_string()),
            ("params", model.param_count().to_string()),
            ("bytes", bytes.to_string()),
        ])
    );
    ctx.outputs.push(path);
    Ok(Status::Pass)
}

#[derive(Args, Debug)]
pub struct LoadArgs {
    checkpoint: PathBuf,
}

fn load(ctx: &mut Ctx, a: &LoadArgs) -> anyhow::Result<Status> {
    let model = build_model(ctx, Some(&a.checkpoint))?;
    let layout: String = model.layout.iter().map(|k| if k.is_global() { 'G' } else { 'S' }).collect();
    let probe: Vec<u32> = (0..model.config.vocab_size.min(8) as u32).collect();
    let logits = model.forward_full(&probe)?.logits;
    let checksum: f64 = logits.iter().flatten().sum();
    let text = kv_block(&[
        ("checkpoint", a.checkpoint.display().to_string()),
        ("params", model.param_count().to_string()),
        ("layers", layout),
        ("vocab_size", model.config.vocab_size.to_string()),
        ("seed", model.config.seed.to_string()),
        ("probe_logit_sum", format!("{checksum:.12e}")),
    ]);
    print!("{text}");
    ctx.write("load.txt", &text)?;
    Ok(Status::Pass)
}
