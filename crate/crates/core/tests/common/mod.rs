#![allow(dead_code)]

use hybridlm::config::ModelConfig;
use hybridlm::model::HybridModel;
use rand::Rng;

/// Hand-sized config: 1 block of 3 SWA layers (layer 0 dense global) and W = 3.
pub fn micro() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.hidden_dim = 16;
    c.num_layers = 4;
    c.hybrid_blocks = 1;
    c.swa_per_block = 3;
    c.window = 3;
    c.head_dim_qk = 8;
    c.head_dim_v = 4;
    c.rope_rot_dims = 4;
    c.expert_hidden_dim = 8;
    c.dense_ffn_hidden_dim = 16;
    c.vocab_size = 20;
    c.max_seq_len = 64;
    c.init_std = 0.2;
    c
}

/// Random small architecture with the given window. Weights are large
/// enough that attention visibly moves the residual stream.
pub fn random_config<R: Rng>(r: &mut R, window: usize, max_seq_len: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.hidden_dim = [8, 16, 24][r.random_range(0..3)];
    c.hybrid_blocks = r.random_range(1..=2);
    c.swa_per_block = r.random_range(1..=3);
    c.num_layers = c.hybrid_blocks * (c.swa_per_block + 1);
    c.window = window;
    c.swa_kv_heads = r.random_range(1..=2);
    c.swa_q_heads = c.swa_kv_heads * r.random_range(1..=2);
    c.ga_kv_heads = 1;
    c.ga_q_heads = r.random_range(1..=3);
    c.head_dim_qk = [4, 6, 8][r.random_range(0..3)];
    c.head_dim_v = r.random_range(2..=6);
    c.rope_rot_dims = 2 * r.random_range(0..=c.head_dim_qk / 2);
    if c.rope_rot_dims == 0 {
        c.rope_rot_dims = 2;
    }
    c.num_experts = r.random_range(2..=5);
    c.experts_per_token = r.random_range(1..=2.min(c.num_experts));
    c.expert_hidden_dim = r.random_range(4..=8);
    c.dense_ffn_hidden_dim = r.random_range(8..=16);
    c.vocab_size = r.random_range(8..=32);
    c.max_seq_len = max_seq_len;
    c.init_std = 0.25;
    c.validate().expect("random config is valid");
    c
}

/// Model with sinks drawn from `[-2, 2]` so the sink path matters.
pub fn random_model<R: Rng>(r: &mut R, config: &ModelConfig) -> HybridModel {
    let mut m = HybridModel::init(config, r.random()).unwrap();
    hybridlm::verify::randomize_sinks(&mut m, r);
    m
}

pub fn tokens<R: Rng>(r: &mut R, len: usize, vocab: usize) -> Vec<u32> {
    hybridlm::verify::random_tokens(r, len, vocab)
}
