//! Synthetic prompt sets. There is no tokenizer; prompts are token ids.

use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct PromptSet {
    pub name: String,
    pub prompts: Vec<Vec<u32>>,
}

const PROMPT_LEN: usize = 12;
const PER_SET: usize = 4;

/// Three sets with different amounts of structure: uniform noise, a short
/// repeated motif, and a single repeated token.
pub fn bundled(vocab: usize, seed: u64) -> Vec<PromptSet> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a11);
    let v = vocab as u32;
    let random = (0..PER_SET)
        .map(|_| (0..PROMPT_LEN).map(|_| r.random_range(0..v)).collect())
        .collect();
    let motif = (0..PER_SET)
        .map(|_| {
            let m: Vec<u32> = (0..3).map(|_| r.random_range(0..v)).collect();
            (0..PROMPT_LEN).map(|i| m[i % 3]).collect()
        })
        .collect();
    let constant = (0..PER_SET)
        .map(|_| vec![r.random_range(0..v); PROMPT_LEN])
        .collect();
    vec![
        PromptSet { name: "random".into(), prompts: random },
        PromptSet { name: "motif".into(), prompts: motif },
        PromptSet { name: "constant".into(), prompts: constant },
    ]
}

/// One prompt per line as whitespace-separated ids, optionally prefixed by
/// `name:` to group lines into sets. Unnamed lines go to a set named after
/// the file stem. `#` starts a comment.
pub fn from_file(path: &Path, vocab: usize) -> anyhow::Result<Vec<PromptSet>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading prompts {}", path.display()))?;
    let default = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prompts").to_string();
    let mut sets: Vec<PromptSet> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, ids) = match line.split_once(':') {
            Some((n, rest)) => (n.trim().to_string(), rest),
            None => (default.clone(), line),
        };
        let prompt = ids
            .split_whitespace()
            .map(|t| {
                let id: u32 = t.parse().with_context(|| format!("{}:{}: bad token id {t:?}", path.display(), i + 1))?;
                if id as usize >= vocab {
                    bail!("{}:{}: token {id} outside vocabulary of {vocab}", path.display(), i + 1);
                }
                Ok(id)
            })
            .collect::<anyhow::Result<Vec<u32>>>()?;
        if prompt.is_empty() {
            bail!("{}:{}: empty prompt", path.display(), i + 1);
        }
        match sets.iter_mut().find(|s| s.name == name) {
            Some(s) => s.prompts.push(prompt),
            None => sets.push(PromptSet { name, prompts: vec![prompt] }),
        }
    }
    if sets.is_empty() {
        bail!("{}: no prompts", path.display());
    }
    Ok(sets)
}
