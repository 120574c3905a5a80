#![allow(dead_code)]

use forgetkit::data::{generate_synthetic, Dataset, SyntheticSpec};
use forgetkit::model::{MicroTransformer, ModelConfig, PretrainConfig};
use forgetkit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(input_dim: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        num_classes: classes,
        blocks: 2,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        tokens: 4,
    }
}

pub fn small_data(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        classes: 6,
        dim: 8,
        n_per_class: 40,
        margin: 6.0,
    };
    generate_synthetic(&spec, seed).unwrap()
}

/// Small model pretrained on [`small_data`].
pub fn small_pretrained(seed: u64) -> (MicroTransformer, Dataset, Dataset) {
    let (tr, te) = small_data(seed);
    let mut m = MicroTransformer::new(small_config(8, 6), seed).unwrap();
    let cfg = PretrainConfig {
        epochs: 40,
        optimizer: forgetkit::optim::OptimizerConfig::adam(3e-3),
        ..PretrainConfig::default()
    };
    m.pretrain(&tr, &cfg, seed).unwrap();
    (m, tr, te)
}

pub fn random_inputs(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}
