//! Shared fixtures for the benchmarks: a mid-sized model and a token stream
//! whose gate pattern is spread enough to exercise pruning paths.

use alct_core::data::{encode_bytes, synthetic_text};
use alct_core::{FeedKind, LatentModel, ModelConfig, Precision, RouterKind};

pub fn bench_config(max_latent_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 258,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 192,
        max_latent_len,
        reach_threshold: 0.1,
        router: RouterKind::SharedAffine,
        router_hidden: 32,
        feed: FeedKind::Identity,
        detach_router_input: true,
        rope_base: 10000.0,
        max_seq_len: 256,
        precision: Precision::F32,
    }
}

pub fn bench_model(max_latent_len: usize) -> LatentModel<f32> {
    LatentModel::new(bench_config(max_latent_len), 17).expect("valid config")
}

pub fn bench_tokens(n: usize) -> Vec<u32> {
    let ids = encode_bytes(synthetic_text(3, n * 2).as_bytes());
    ids[..n].to_vec()
}
