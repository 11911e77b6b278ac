//! On-policy multi-teacher distillation on small tabular policies.
//!
//! The student samples its own responses, a per-domain teacher scores every
//! sampled token, and the token advantage is the teacher/student log-ratio
//! plus an optional outcome-reward term. Tokens whose training/sampling
//! probability ratio leaves `[eps_low, eps_high]` get weight 0.
//!
//! Policies here are tables of logits indexed by `(prompt, prefix)`, which
//! keeps exact enumeration and analytic gradients cheap.

use rand::Rng;
use thiserror::Error;

use crate::linalg::{log_softmax, softmax};

pub const DEFAULT_EPS_LOW: f64 = 0.8;
pub const DEFAULT_EPS_HIGH: f64 = 1.25;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Stabilizer added to the group std in [`grpo_advantage`].
pub const GRPO_DELTA: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MopdError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("log-probability must be <= 0, got {0}")]
    PositiveLogProb(f64),
    #[error("clip band must satisfy eps_low <= 1 <= eps_high, got [{0}, {1}]")]
    InvalidBand(f64, f64),
    #[error("normalized group advantage needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("prompt {0} out of range")]
    PromptOutOfRange(usize),
    #[error("token {0} out of range")]
    TokenOutOfRange(u32),
}

/// Per-prefix categorical policy over fixed-length responses.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub num_prompts: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// `[prompt][state][vocab]`, states enumerate prefixes by length then value.
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn num_states(vocab: usize, seq_len: usize) -> usize {
        (0..seq_len).map(|l| vocab.pow(l as u32)).sum()
    }

    pub fn zeros(num_prompts: usize, vocab: usize, seq_len: usize) -> Self {
        let n = num_prompts * Self::num_states(vocab, seq_len) * vocab;
        Self {
            num_prompts,
            vocab,
            seq_len,
            logits: vec![0.0; n],
        }
    }

    pub fn random<R: Rng>(num_prompts: usize, vocab: usize, seq_len: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(num_prompts, vocab, seq_len);
        for l in &mut p.logits {
            *l = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
        p
    }

    pub fn state_index(&self, prefix: &[u32]) -> usize {
        let offset: usize = (0..prefix.len()).map(|l| self.vocab.pow(l as u32)).sum();
        let code = prefix.iter().fold(0usize, |acc, &t| acc * self.vocab + t as usize);
        offset + code
    }

    fn slot(&self, prompt: usize, prefix: &[u32]) -> usize {
        let states = Self::num_states(self.vocab, self.seq_len);
        (prompt * states + self.state_index(prefix)) * self.vocab
    }

    pub fn logits_at(&self, prompt: usize, prefix: &[u32]) -> &[f64] {
        let s = self.slot(prompt, prefix);
        &self.logits[s..s + self.vocab]
    }

    pub fn logits_at_mut(&mut self, prompt: usize, prefix: &[u32]) -> &mut [f64] {
        let s = self.slot(prompt, prefix);
        &mut self.logits[s..s + self.vocab]
    }

    pub fn log_probs(&self, prompt: usize, prefix: &[u32]) -> Vec<f64> {
        log_softmax(self.logits_at(prompt, prefix))
    }

    fn check(&self, prompt: usize, tokens: &[u32]) -> Result<(), MopdError> {
        if prompt >= self.num_prompts {
            return Err(MopdError::PromptOutOfRange(prompt));
        }
        if tokens.len() > self.seq_len {
            return Err(MopdError::LengthMismatch(format!(
                "response of {} tokens, policy length {}",
                tokens.len(),
                self.seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(MopdError::TokenOutOfRange(t));
        }
        Ok(())
    }

    /// `log π(y_t | x, y_<t)` for every token.
    pub fn token_logprobs(&self, prompt: usize, tokens: &[u32]) -> Result<Vec<f64>, MopdError> {
        self.check(prompt, tokens)?;
        Ok((0..tokens.len())
            .map(|t| self.log_probs(prompt, &tokens[..t])[tokens[t] as usize])
            .collect())
    }

    /// Same as [`Self::token_logprobs`] with logits and normalization in f32,
    /// standing in for a lower-precision inference engine.
    pub fn token_logprobs_f32(&self, prompt: usize, tokens: &[u32]) -> Result<Vec<f64>, MopdError> {
        self.check(prompt, tokens)?;
        Ok((0..tokens.len())
            .map(|t| {
                let l: Vec<f32> = self.logits_at(prompt, &tokens[..t]).iter().map(|&x| x as f32).collect();
                let m = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = m + l.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
                f64::from(l[tokens[t] as usize] - lse)
            })
            .collect())
    }

    pub fn sample<R: Rng>(&self, prompt: usize, rng: &mut R) -> Vec<u32> {
        let mut y = Vec::with_capacity(self.seq_len);
        for _ in 0..self.seq_len {
            let p = softmax(self.logits_at(prompt, &y));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.vocab - 1;
            for (v, &pv) in p.iter().enumerate() {
                acc += pv;
                if u < acc {
                    pick = v;
                    break;
                }
            }
            y.push(pick as u32);
        }
        y
    }

    /// Argmax first token for a prompt.
    pub fn greedy_first(&self, prompt: usize) -> u32 {
        crate::linalg::argmax(self.logits_at(prompt, &[])) as u32
    }

    /// Every full-length response in lexicographic order.
    pub fn all_sequences(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new()];
        for _ in 0..self.seq_len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..self.vocab as u32).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// `KL(π‖τ)` over whole responses for one prompt, by enumerating every sequence.
pub fn sequence_kl_enumerated(student: &TabularPolicy, teacher: &TabularPolicy, prompt: usize) -> f64 {
    student
        .all_sequences()
        .iter()
        .map(|y| {
            let s: f64 = student.token_logprobs(prompt, y).unwrap().iter().sum();
            let t: f64 = teacher.token_logprobs(prompt, y).unwrap().iter().sum();
            s.exp() * (s - t)
        })
        .sum()
}

/// `KL(π‖τ)` over whole responses via the chain rule over prefixes.
pub fn sequence_kl_chain(student: &TabularPolicy, teacher: &TabularPolicy, prompt: usize) -> f64 {
    fn walk(s: &TabularPolicy, t: &TabularPolicy, prompt: usize, prefix: &mut Vec<u32>, mass: f64) -> f64 {
        if prefix.len() == s.seq_len {
            return 0.0;
        }
        let ls = s.log_probs(prompt, prefix);
        let lt = t.log_probs(prompt, prefix);
        let mut total = 0.0;
        for v in 0..s.vocab {
            let p = ls[v].exp();
            total += mass * p * (ls[v] - lt[v]);
            prefix.push(v as u32);
            total += walk(s, t, prompt, prefix, mass * p);
            prefix.pop();
        }
        total
    }
    walk(student, teacher, prompt, &mut Vec::new(), 1.0)
}

/// One sampled response with everything the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MopdResponse {
    pub prompt: usize,
    pub tokens: Vec<u32>,
    /// `log π_θ`, training-side forward.
    pub train_logprob: Vec<f64>,
    /// `log μ_θ`, recorded when sampling.
    pub sample_logprob: Vec<f64>,
    /// `log π_domain`.
    pub teacher_logprob: Vec<f64>,
    pub orm_advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MopdBatch {
    pub responses: Vec<MopdResponse>,
    pub eps_low: f64,
    pub eps_high: f64,
    pub alpha: f64,
}

impl MopdBatch {
    pub fn validate(&self) -> Result<(), MopdError> {
        check_band(self.eps_low, self.eps_high)?;
        for (i, r) in self.responses.iter().enumerate() {
            let n = r.tokens.len();
            if r.train_logprob.len() != n || r.sample_logprob.len() != n || r.teacher_logprob.len() != n {
                return Err(MopdError::LengthMismatch(format!("response {i}")));
            }
            let all = r.train_logprob.iter().chain(&r.sample_logprob).chain(&r.teacher_logprob);
            if let Some(&lp) = all.clone().find(|&&lp| lp > 0.0) {
                return Err(MopdError::PositiveLogProb(lp));
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.responses.iter().map(|r| r.tokens.len()).sum()
    }
}

fn check_band(eps_low: f64, eps_high: f64) -> Result<(), MopdError> {
    if eps_low <= 1.0 && 1.0 <= eps_high {
        Ok(())
    } else {
        Err(MopdError::InvalidBand(eps_low, eps_high))
    }
}

/// Per-token weight and advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCredit {
    pub weight: f64,
    pub advantage: f64,
}

/// Mean over all sampled tokens of `log π_θ − log π_domain`.
pub fn reverse_kl_loss(batch: &MopdBatch) -> Result<f64, MopdError> {
    batch.validate()?;
    let n = batch.num_tokens();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = batch
        .responses
        .iter()
        .flat_map(|r| r.train_logprob.iter().zip(&r.teacher_logprob).map(|(s, t)| s - t))
        .sum();
    Ok(sum / n as f64)
}

/// `(log π_domain − log π_θ) + α·Â_ORM` per token.
pub fn mopd_advantage(teacher_lp: &[f64], student_lp: &[f64], orm_adv: f64, alpha: f64) -> Result<Vec<f64>, MopdError> {
    if teacher_lp.len() != student_lp.len() {
        return Err(MopdError::LengthMismatch(format!(
            "{} teacher vs {} student log-probs",
            teacher_lp.len(),
            student_lp.len()
        )));
    }
    Ok(teacher_lp
        .iter()
        .zip(student_lp)
        .map(|(t, s)| (t - s) + alpha * orm_adv)
        .collect())
}

/// Importance ratio `exp(train − sample)` if it lies in the band, else 0.
pub fn token_weight(train_lp: f64, sample_lp: f64, eps_low: f64, eps_high: f64) -> f64 {
    let ratio = (train_lp - sample_lp).exp();
    if eps_low <= ratio && ratio <= eps_high {
        ratio
    } else {
        0.0
    }
}

/// Group-relative advantage. `normalize` divides by the sample std plus
/// [`GRPO_DELTA`].
pub fn grpo_advantage(rewards: &[f64], normalize: bool) -> Result<Vec<f64>, MopdError> {
    if rewards.is_empty() || (normalize && rewards.len() < 2) {
        return Err(MopdError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize {
        return Ok(centered);
    }
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(centered.iter().map(|c| c / (std + GRPO_DELTA)).collect())
}

/// Weights and advantages for every token of the batch.
pub fn token_credits(batch: &MopdBatch) -> Result<Vec<Vec<TokenCredit>>, MopdError> {
    batch.validate()?;
    batch
        .responses
        .iter()
        .map(|r| {
            let adv = mopd_advantage(&r.teacher_logprob, &r.train_logprob, r.orm_advantage, batch.alpha)?;
            Ok(r.train_logprob
                .iter()
                .zip(&r.sample_logprob)
                .zip(adv)
                .map(|((&tr, &sa), a)| TokenCredit {
                    weight: token_weight(tr, sa, batch.eps_low, batch.eps_high),
                    advantage: a,
                })
                .collect())
        })
        .collect()
}

/// `−(1/N) Σ_y (1/|y|) Σ_t w_t Â_t log π_θ(y_t)` for the batch as recorded.
pub fn surrogate_loss(batch: &MopdBatch) -> Result<f64, MopdError> {
    let credits = token_credits(batch)?;
    let logprobs: Vec<&[f64]> = batch.responses.iter().map(|r| r.train_logprob.as_slice()).collect();
    Ok(surrogate_from(&logprobs, &credits))
}

fn surrogate_from(logprobs: &[&[f64]], credits: &[Vec<TokenCredit>]) -> f64 {
    if logprobs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (lp, cr) in logprobs.iter().zip(credits) {
        if lp.is_empty() {
            continue;
        }
        let s: f64 = lp.iter().zip(cr).map(|(l, c)| c.weight * c.advantage * l).sum();
        total += s / lp.len() as f64;
    }
    -total / logprobs.len() as f64
}

/// Surrogate loss with `log π_θ` recomputed from `policy` and the credits held
/// fixed, so only the log-probability factor depends on the parameters.
pub fn surrogate_loss_with(
    policy: &TabularPolicy,
    batch: &MopdBatch,
    credits: &[Vec<TokenCredit>],
) -> Result<f64, MopdError> {
    let lps = batch
        .responses
        .iter()
        .map(|r| policy.token_logprobs(r.prompt, &r.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[f64]> = lps.iter().map(Vec::as_slice).collect();
    Ok(surrogate_from(&refs, credits))
}

/// Gradient of [`surrogate_loss_with`] with respect to `policy.logits`.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    batch: &MopdBatch,
    credits: &[Vec<TokenCredit>],
) -> Result<Vec<f64>, MopdError> {
    let mut grad = vec![0.0; policy.logits.len()];
    let n = batch.responses.len();
    if n == 0 {
        return Ok(grad);
    }
    for (r, cr) in batch.responses.iter().zip(credits) {
        policy.check(r.prompt, &r.tokens)?;
        let len = r.tokens.len();
        for t in 0..len {
            let coef = -cr[t].weight * cr[t].advantage / (n as f64 * len as f64);
            if coef == 0.0 {
                continue;
            }
            let prefix = &r.tokens[..t];
            let p = softmax(policy.logits_at(r.prompt, prefix));
            let base = policy.slot(r.prompt, prefix);
            for v in 0..policy.vocab {
                let ind = if v == r.tokens[t] as usize { 1.0 } else { 0.0 };
                grad[base + v] += coef * (ind - p[v]);
            }
        }
    }
    Ok(grad)
}

/// Teacher for one domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    /// The student scores itself.
    Student,
    Policy(TabularPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub teacher: Teacher,
    pub prompts: Vec<usize>,
}

/// How the sampling-side policy `μ_θ` departs from the trained one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerDrift {
    None,
    /// Sampling log-probs computed in f32.
    ReducedPrecision,
    /// Sampler weights refreshed only every `n` steps.
    Stale(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MopdSettings {
    pub learning_rate: f64,
    pub group_size: usize,
    pub alpha: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub drift: SamplerDrift,
}

impl Default for MopdSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            group_size: 16,
            alpha: DEFAULT_ALPHA,
            eps_low: DEFAULT_EPS_LOW,
            eps_high: DEFAULT_EPS_HIGH,
            drift: SamplerDrift::None,
        }
    }
}

/// Outcome reward for `(prompt, response)`.
pub type OutcomeReward = dyn Fn(usize, &[u32]) -> f64;

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Exact per-token reverse KL to each domain's teacher, averaged over its prompts.
    pub reverse_kl_per_domain: Vec<f64>,
    /// Sampled per-token reverse-KL estimate over the batch.
    pub reverse_kl_estimate: f64,
    pub discard_frac: f64,
    pub mean_abs_advantage: f64,
    pub loss: f64,
}

/// SGD on the surrogate with on-policy sampling.
pub struct MopdTrainer {
    pub student: TabularPolicy,
    pub domains: Vec<Domain>,
    pub settings: MopdSettings,
    sampler: TabularPolicy,
    step: usize,
}

impl MopdTrainer {
    pub fn new(student: TabularPolicy, domains: Vec<Domain>, settings: MopdSettings) -> Result<Self, MopdError> {
        check_band(settings.eps_low, settings.eps_high)?;
        for d in &domains {
            if let Some(&p) = d.prompts.iter().find(|&&p| p >= student.num_prompts) {
                return Err(MopdError::PromptOutOfRange(p));
            }
        }
        Ok(Self {
            sampler: student.clone(),
            student,
            domains,
            settings,
            step: 0,
        })
    }

    pub fn domain_index(&self, name: &str) -> Result<usize, MopdError> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| MopdError::UnknownDomain(name.to_string()))
    }

    fn teacher_policy(&self, domain: usize) -> &TabularPolicy {
        match &self.domains[domain].teacher {
            Teacher::Student => &self.student,
            Teacher::Policy(p) => p,
        }
    }

    /// Exact per-token reverse KL to the teacher, averaged over the domain's prompts.
    pub fn exact_reverse_kl(&self, domain: usize) -> f64 {
        let d = &self.domains[domain];
        if d.prompts.is_empty() {
            return 0.0;
        }
        let t = self.teacher_policy(domain);
        let sum: f64 = d
            .prompts
            .iter()
            .map(|&p| sequence_kl_chain(&self.student, t, p))
            .sum();
        sum / (d.prompts.len() as f64 * self.student.seq_len.max(1) as f64)
    }

    /// Samples, scores and builds the batch for the current student.
    pub fn collect<R: Rng>(&self, orm: Option<&OutcomeReward>, rng: &mut R) -> Result<MopdBatch, MopdError> {
        let s = &self.settings;
        let mut responses = Vec::new();
        for (di, d) in self.domains.iter().enumerate() {
            let teacher = self.teacher_policy(di);
            for &prompt in &d.prompts {
                let mut group = Vec::with_capacity(s.group_size);
                for _ in 0..s.group_size {
                    let tokens = self.sampler.sample(prompt, rng);
                    let sample_logprob = match s.drift {
                        SamplerDrift::ReducedPrecision => self.sampler.token_logprobs_f32(prompt, &tokens)?,
                        _ => self.sampler.token_logprobs(prompt, &tokens)?,
                    };
                    group.push(MopdResponse {
                        prompt,
                        train_logprob: self.student.token_logprobs(prompt, &tokens)?,
                        teacher_logprob: teacher.token_logprobs(prompt, &tokens)?,
                        sample_logprob,
                        tokens,
                        orm_advantage: 0.0,
                    });
                }
                if let Some(orm) = orm {
                    let rewards: Vec<f64> = group.iter().map(|r| orm(prompt, &r.tokens)).collect();
                    let adv = grpo_advantage(&rewards, group.len() >= 2)?;
                    for (r, a) in group.iter_mut().zip(adv) {
                        r.orm_advantage = a;
                    }
                }
                responses.extend(group);
            }
        }
        Ok(MopdBatch {
            responses,
            eps_low: s.eps_low,
            eps_high: s.eps_high,
            alpha: s.alpha,
        })
    }

    /// One sample → score → gradient step.
    pub fn step<R: Rng>(&mut self, orm: Option<&OutcomeReward>, rng: &mut R) -> Result<StepMetrics, MopdError> {
        match self.settings.drift {
            SamplerDrift::Stale(n) if n > 0 && !self.step.is_multiple_of(n) => {}
            _ => self.sampler = self.student.clone(),
        }
        let batch = self.collect(orm, rng)?;
        let credits = token_credits(&batch)?;
        let loss = surrogate_loss(&batch)?;
        let grad = surrogate_gradient(&self.student, &batch, &credits)?;
        for (w, g) in self.student.logits.iter_mut().zip(&grad) {
            *w -= self.settings.learning_rate * g;
        }
        let flat: Vec<&TokenCredit> = credits.iter().flatten().collect();
        let n = flat.len().max(1) as f64;
        let metrics = StepMetrics {
            step: self.step,
            reverse_kl_per_domain: (0..self.domains.len()).map(|d| self.exact_reverse_kl(d)).collect(),
            reverse_kl_estimate: reverse_kl_loss(&batch)?,
            discard_frac: flat.iter().filter(|c| c.weight == 0.0).count() as f64 / n,
            mean_abs_advantage: flat.iter().map(|c| c.advantage.abs()).sum::<f64>() / n,
            loss,
        };
        self.step += 1;
        Ok(metrics)
    }
}
