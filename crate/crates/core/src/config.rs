//! Architectural hyper-parameters, named profiles and the layer layout.
//!
//! The on-disk form is a flat `key = value` document with `#` comments.
//! Keys are exactly the field names of [`ModelConfig`]; any key left out of a
//! document falls back to the value of the chosen [`Profile`].

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// RoPE base used by global-attention layers after context extension.
pub const ROPE_BASE_GA_EXTENDED: f64 = 5_000_000.0;

/// Errors raised while parsing or validating a configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: malformed entry `{text}` (expected `key = value`)")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown profile `{0}` (expected tiny, small or paper)")]
    UnknownProfile(String),
}

/// Named presets. `Paper` carries the full-scale values; the toy presets keep
/// the same structural ratios at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Tiny,
    Small,
    Paper,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "small" => Ok(Profile::Small),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::Small => "small",
            Profile::Paper => "paper",
        })
    }
}

/// Every architectural hyper-parameter of the hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Number of hybrid blocks (M).
    pub hybrid_blocks: usize,
    /// Sliding-window layers preceding each global layer (N).
    pub swa_per_block: usize,
    /// Sliding window size W in tokens, self included.
    pub window: usize,
    pub swa_q_heads: usize,
    pub swa_kv_heads: usize,
    pub ga_q_heads: usize,
    pub ga_kv_heads: usize,
    pub head_dim_qk: usize,
    pub head_dim_v: usize,
    /// Leading dimensions of each q/k head that receive rotary embedding.
    pub rope_rot_dims: usize,
    pub rope_base_ga: f64,
    pub rope_base_swa: f64,
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub expert_hidden_dim: usize,
    pub dense_ffn_hidden_dim: usize,
    /// Draft depth K of the multi-token-prediction chain.
    pub mtp_steps: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
    pub seed: u64,
}

/// Attention/FFN pairing of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    SwaMoe,
    GaMoe,
    GaDense,
}

impl LayerKind {
    pub fn is_global(self) -> bool {
        !matches!(self, LayerKind::SwaMoe)
    }

    pub fn is_moe(self) -> bool {
        !matches!(self, LayerKind::GaDense)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::SwaMoe => "swa_moe",
            LayerKind::GaMoe => "ga_moe",
            LayerKind::GaDense => "ga_dense",
        })
    }
}

const KEYS: [&str; 23] = [
    "hidden_dim",
    "num_layers",
    "hybrid_blocks",
    "swa_per_block",
    "window",
    "swa_q_heads",
    "swa_kv_heads",
    "ga_q_heads",
    "ga_kv_heads",
    "head_dim_qk",
    "head_dim_v",
    "rope_rot_dims",
    "rope_base_ga",
    "rope_base_swa",
    "num_experts",
    "experts_per_token",
    "expert_hidden_dim",
    "dense_ffn_hidden_dim",
    "mtp_steps",
    "vocab_size",
    "max_seq_len",
    "init_std",
    "seed",
];

impl ModelConfig {
    /// Full-scale configuration. `vocab_size` is not published alongside the
    /// other values; 151,680 is used so parameter totals land in the right range.
    pub fn paper() -> Self {
        Self {
            hidden_dim: 4096,
            num_layers: 48,
            hybrid_blocks: 8,
            swa_per_block: 5,
            window: 128,
            swa_q_heads: 64,
            swa_kv_heads: 8,
            ga_q_heads: 64,
            ga_kv_heads: 4,
            head_dim_qk: 192,
            head_dim_v: 128,
            rope_rot_dims: 64,
            rope_base_ga: 640_000.0,
            rope_base_swa: 10_000.0,
            num_experts: 256,
            experts_per_token: 8,
            expert_hidden_dim: 2048,
            dense_ffn_hidden_dim: 16384,
            mtp_steps: 1,
            vocab_size: 151_680,
            max_seq_len: 262_144,
            init_std: 0.006,
            seed: 0,
        }
    }

    /// Desk-scale preset: 2 hybrid blocks of 5 SWA + 1 GA, W = 8, 4 experts top-2.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 12,
            hybrid_blocks: 2,
            swa_per_block: 5,
            window: 8,
            swa_q_heads: 4,
            swa_kv_heads: 2,
            ga_q_heads: 4,
            ga_kv_heads: 1,
            head_dim_qk: 24,
            head_dim_v: 16,
            rope_rot_dims: 8,
            rope_base_ga: 640_000.0,
            rope_base_swa: 10_000.0,
            num_experts: 4,
            experts_per_token: 2,
            expert_hidden_dim: 32,
            dense_ffn_hidden_dim: 256,
            mtp_steps: 3,
            vocab_size: 64,
            max_seq_len: 1024,
            init_std: scaled_init_std(64),
            seed: 0,
        }
    }

    pub fn small() -> Self {
        Self {
            hidden_dim: 128,
            num_layers: 24,
            hybrid_blocks: 4,
            swa_per_block: 5,
            window: 16,
            swa_q_heads: 8,
            swa_kv_heads: 2,
            ga_q_heads: 8,
            ga_kv_heads: 1,
            head_dim_qk: 48,
            head_dim_v: 32,
            rope_rot_dims: 16,
            rope_base_ga: 640_000.0,
            rope_base_swa: 10_000.0,
            num_experts: 16,
            experts_per_token: 4,
            expert_hidden_dim: 64,
            dense_ffn_hidden_dim: 512,
            mtp_steps: 3,
            vocab_size: 256,
            max_seq_len: 1024,
            init_std: scaled_init_std(128),
            seed: 0,
        }
    }

    pub fn from_profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => Self::tiny(),
            Profile::Small => Self::small(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Switches global layers to the long-context RoPE base.
    pub fn with_context_extension(mut self) -> Self {
        self.rope_base_ga = ROPE_BASE_GA_EXTENDED;
        self
    }

    pub fn swa_group_size(&self) -> usize {
        self.swa_q_heads / self.swa_kv_heads
    }

    pub fn ga_group_size(&self) -> usize {
        self.ga_q_heads / self.ga_kv_heads
    }

    /// `(q_heads, kv_heads)` for a layer kind.
    pub fn heads_for(&self, kind: LayerKind) -> (usize, usize) {
        if kind.is_global() {
            (self.ga_q_heads, self.ga_kv_heads)
        } else {
            (self.swa_q_heads, self.swa_kv_heads)
        }
    }

    pub fn rope_base_for(&self, kind: LayerKind) -> f64 {
        if kind.is_global() {
            self.rope_base_ga
        } else {
            self.rope_base_swa
        }
    }

    /// Checks every structural invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("hybrid_blocks", self.hybrid_blocks),
            ("swa_per_block", self.swa_per_block),
            ("window", self.window),
            ("swa_q_heads", self.swa_q_heads),
            ("swa_kv_heads", self.swa_kv_heads),
            ("ga_q_heads", self.ga_q_heads),
            ("ga_kv_heads", self.ga_kv_heads),
            ("head_dim_qk", self.head_dim_qk),
            ("head_dim_v", self.head_dim_v),
            ("rope_rot_dims", self.rope_rot_dims),
            ("num_experts", self.num_experts),
            ("experts_per_token", self.experts_per_token),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("dense_ffn_hidden_dim", self.dense_ffn_hidden_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invariant(format!("{name} ≥ 1 violated")));
            }
        }
        if self.num_layers != self.hybrid_blocks * (self.swa_per_block + 1) {
            return Err(ConfigError::Invariant(
                "num_layers == M×(N+1) violated".to_string(),
            ));
        }
        if !self.swa_q_heads.is_multiple_of(self.swa_kv_heads) {
            return Err(ConfigError::Invariant(
                "swa_q_heads divisible by swa_kv_heads violated".to_string(),
            ));
        }
        if !self.ga_q_heads.is_multiple_of(self.ga_kv_heads) {
            return Err(ConfigError::Invariant(
                "ga_q_heads divisible by ga_kv_heads violated".to_string(),
            ));
        }
        if self.rope_rot_dims > self.head_dim_qk {
            return Err(ConfigError::Invariant(
                "rope_rot_dims ≤ head_dim_qk violated".to_string(),
            ));
        }
        if !self.rope_rot_dims.is_multiple_of(2) {
            return Err(ConfigError::Invariant(
                "rope_rot_dims is even violated".to_string(),
            ));
        }
        if self.experts_per_token > self.num_experts {
            return Err(ConfigError::Invariant(
                "experts_per_token ≤ num_experts violated".to_string(),
            ));
        }
        for (name, base) in [
            ("rope_base_ga", self.rope_base_ga),
            ("rope_base_swa", self.rope_base_swa),
        ] {
            if !(base.is_finite() && base > 0.0) {
                return Err(ConfigError::Invariant(format!("{name} > 0 violated")));
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(ConfigError::Invariant("init_std > 0 violated".to_string()));
        }
        Ok(())
    }

    /// Parses a `key = value` document on top of `profile`'s defaults.
    pub fn parse(text: &str, profile: Profile) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_profile(profile);
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value).map_err(|()| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ()> {
        fn int(v: &str) -> Result<usize, ()> {
            v.parse().map_err(|_| ())
        }
        fn real(v: &str) -> Result<f64, ()> {
            v.parse::<f64>().map_err(|_| ()).and_then(|x| {
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(())
                }
            })
        }
        match key {
            "hidden_dim" => self.hidden_dim = int(value)?,
            "num_layers" => self.num_layers = int(value)?,
            "hybrid_blocks" => self.hybrid_blocks = int(value)?,
            "swa_per_block" => self.swa_per_block = int(value)?,
            "window" => self.window = int(value)?,
            "swa_q_heads" => self.swa_q_heads = int(value)?,
            "swa_kv_heads" => self.swa_kv_heads = int(value)?,
            "ga_q_heads" => self.ga_q_heads = int(value)?,
            "ga_kv_heads" => self.ga_kv_heads = int(value)?,
            "head_dim_qk" => self.head_dim_qk = int(value)?,
            "head_dim_v" => self.head_dim_v = int(value)?,
            "rope_rot_dims" => self.rope_rot_dims = int(value)?,
            "rope_base_ga" => self.rope_base_ga = real(value)?,
            "rope_base_swa" => self.rope_base_swa = real(value)?,
            "num_experts" => self.num_experts = int(value)?,
            "experts_per_token" => self.experts_per_token = int(value)?,
            "expert_hidden_dim" => self.expert_hidden_dim = int(value)?,
            "dense_ffn_hidden_dim" => self.dense_ffn_hidden_dim = int(value)?,
            "mtp_steps" => self.mtp_steps = int(value)?,
            "vocab_size" => self.vocab_size = int(value)?,
            "max_seq_len" => self.max_seq_len = int(value)?,
            "init_std" => self.init_std = real(value)?,
            "seed" => self.seed = value.parse().map_err(|_| ())?,
            _ => return Err(()),
        }
        Ok(())
    }

    /// Renders the config as a complete `key = value` document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("hidden_dim", self.hidden_dim.to_string());
        push("num_layers", self.num_layers.to_string());
        push("hybrid_blocks", self.hybrid_blocks.to_string());
        push("swa_per_block", self.swa_per_block.to_string());
        push("window", self.window.to_string());
        push("swa_q_heads", self.swa_q_heads.to_string());
        push("swa_kv_heads", self.swa_kv_heads.to_string());
        push("ga_q_heads", self.ga_q_heads.to_string());
        push("ga_kv_heads", self.ga_kv_heads.to_string());
        push("head_dim_qk", self.head_dim_qk.to_string());
        push("head_dim_v", self.head_dim_v.to_string());
        push("rope_rot_dims", self.rope_rot_dims.to_string());
        push("rope_base_ga", self.rope_base_ga.to_string());
        push("rope_base_swa", self.rope_base_swa.to_string());
        push("num_experts", self.num_experts.to_string());
        push("experts_per_token", self.experts_per_token.to_string());
        push("expert_hidden_dim", self.expert_hidden_dim.to_string());
        push("dense_ffn_hidden_dim", self.dense_ffn_hidden_dim.to_string());
        push("mtp_steps", self.mtp_steps.to_string());
        push("vocab_size", self.vocab_size.to_string());
        push("max_seq_len", self.max_seq_len.to_string());
        push("init_std", self.init_std.to_string());
        push("seed", self.seed.to_string());
        out
    }
}

/// Keeps output-logit scale comparable to the full-width model: the full
/// model uses 0.006 at width 4096.
fn scaled_init_std(hidden_dim: usize) -> f64 {
    0.006 * (4096.0 / hidden_dim as f64).sqrt()
}

/// Parses a configuration document with the given profile supplying defaults.
pub fn parse_config(text: &str, profile: Profile) -> Result<ModelConfig, ConfigError> {
    ModelConfig::parse(text, profile)
}

/// Layer kinds in depth order.
///
/// Each hybrid block is `N` sliding-window MoE layers followed by one global
/// MoE layer, except that layer 0 is a global layer with a dense FFN which
/// takes the place of block 0's first sliding-window slot. Totals are
/// `M + 1` global layers and `M·N − 1` sliding-window layers.
pub fn build_layout(config: &ModelConfig) -> Vec<LayerKind> {
    let mut layout = Vec::with_capacity(config.num_layers);
    for _ in 0..config.hybrid_blocks {
        layout.extend(std::iter::repeat_n(LayerKind::SwaMoe, config.swa_per_block));
        layout.push(LayerKind::GaMoe);
    }
    if let Some(first) = layout.first_mut() {
        *first = LayerKind::GaDense;
    }
    layout
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(layout: &[LayerKind], kind: LayerKind) -> usize {
        layout.iter().filter(|k| **k == kind).count()
    }

    #[test]
    fn paper_profile_is_valid_and_matches_layer_split() {
        let cfg = ModelConfig::paper();
        cfg.validate().unwrap();
        let layout = build_layout(&cfg);
        assert_eq!(layout.len(), 48);
        assert_eq!(count(&layout, LayerKind::SwaMoe), 39);
        assert_eq!(layout.iter().filter(|k| k.is_global()).count(), 9);
    }

    #[test]
    fn layout_smallest() {
        let mut cfg = ModelConfig::tiny();
        cfg.hybrid_blocks = 1;
        cfg.swa_per_block = 1;
        cfg.num_layers = 2;
        assert_eq!(build_layout(&cfg), vec![LayerKind::GaDense, LayerKind::GaMoe]);
    }

    #[test]
    fn layout_two_blocks_of_five() {
        use LayerKind::*;
        let cfg = ModelConfig::tiny();
        let layout = build_layout(&cfg);
        let expected = vec![
            GaDense, SwaMoe, SwaMoe, SwaMoe, SwaMoe, GaMoe, SwaMoe, SwaMoe, SwaMoe, SwaMoe,
            SwaMoe, GaMoe,
        ];
        assert_eq!(layout, expected);
        assert_eq!(count(&layout, SwaMoe), 9);
        assert_eq!(count(&layout, GaMoe), 2);
        assert_eq!(count(&layout, GaDense), 1);
    }

    #[test]
    fn rejects_layer_count_mismatch() {
        let err = parse_config("num_layers = 48\nhybrid_blocks = 8\nswa_per_block = 4\n", Profile::Paper)
            .unwrap_err();
        assert_eq!(
            err,
            ConfigError::Invariant("num_layers == M×(N+1) violated".into())
        );
    }

    #[test]
    fn toy_document_parses() {
        let doc = "# toy\nhidden_dim = 64\nnum_layers = 12\nhybrid_blocks = 2\nswa_per_block = 5\n\
                   window = 8  # tokens\nnum_experts = 4\nexperts_per_token = 2\n";
        let cfg = parse_config(doc, Profile::Paper).unwrap();
        assert_eq!(cfg.window, 8);
        assert_eq!(cfg.num_experts, 4);
        assert_eq!(cfg.head_dim_qk, 192);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            parse_config("windw = 3", Profile::Tiny),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("\nwindow 3", Profile::Tiny),
            Err(ConfigError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("window = -3", Profile::Tiny),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            parse_config("window = 3\nwindow = 4", Profile::Tiny),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
    }

    #[test]
    fn rejects_each_invariant() {
        let cases: Vec<(&str, &str)> = vec![
            ("swa_kv_heads = 3", "swa_q_heads divisible by swa_kv_heads"),
            ("ga_kv_heads = 3", "ga_q_heads divisible by ga_kv_heads"),
            ("rope_rot_dims = 7", "rope_rot_dims is even"),
            ("rope_rot_dims = 26", "rope_rot_dims ≤ head_dim_qk"),
            ("experts_per_token = 5", "experts_per_token ≤ num_experts"),
            ("window = 0", "window ≥ 1"),
        ];
        for (doc, needle) in cases {
            let err = parse_config(doc, Profile::Tiny).unwrap_err().to_string();
            assert!(err.contains(needle), "{doc}: {err}");
        }
    }

    #[test]
    fn toy_profiles_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::small().validate().unwrap();
        assert_eq!(ModelConfig::paper().with_context_extension().rope_base_ga, 5e6);
    }
}
