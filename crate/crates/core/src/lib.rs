//! Hybrid sliding-window/global attention transformer at desk scale.
//!
//! The crate covers sink-biased attention, ring-buffer KV caching with memory
//! accounting, top-k MoE routing with replay, a multi-token-prediction draft
//! chain with lossless greedy speculative decoding, and an on-policy
//! reverse-KL distillation objective with a tabular training loop.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod kvcache;
pub mod linalg;
pub mod model;
pub mod moe;
pub mod mopd;
pub mod mtp;
pub mod oracle;
pub mod verify;

pub use config::{build_layout, parse_config, LayerKind, ModelConfig, Profile};
pub use model::{count_params, HybridModel};
