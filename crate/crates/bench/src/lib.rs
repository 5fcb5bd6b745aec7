//! Shared fixtures for the benchmarks.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitkd_core::{ImageBatch, TinyViT, ViTConfig};

/// The desk-scale reference configuration used across benchmarks.
pub fn bench_config() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        hidden_size: 32,
        intermediate_size: 64,
        num_layers: 2,
        num_heads: 4,
        num_classes: 10,
        seed: 7,
    }
}

pub fn bench_model() -> TinyViT<f32> {
    TinyViT::init(&bench_config()).expect("valid config")
}

pub fn bench_batch(n: usize, seed: u64) -> ImageBatch<f32> {
    let cfg = bench_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array4::from_shape_fn((n, 3, cfg.image_size, cfg.image_size), |_| {
        rng.gen_range(0.0f32..1.0)
    });
    ImageBatch::new(pixels, (0..n).map(|i| i % cfg.num_classes).collect()).expect("valid batch")
}
