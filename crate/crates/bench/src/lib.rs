//! Seeded inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidmix::{Tensor, TokenField};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid shape")
}

/// One-head field of `frames × tokens × head_dim` queries, keys and values.
pub fn field(frames: usize, tokens: usize, head_dim: usize, seed: u64) -> TokenField {
    let shape = [frames, tokens, head_dim];
    TokenField::single_head(
        random(&shape, seed),
        random(&shape, seed + 1),
        random(&shape, seed + 2),
    )
    .expect("matching shapes")
}
