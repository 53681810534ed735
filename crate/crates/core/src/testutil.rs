use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::weights::{Activation, VitConfig, VitWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n = Normal::new(0.0f32, std).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(rng)).collect()).unwrap()
}

pub fn toy_config(layers: usize, heads: usize, width: usize) -> VitConfig {
    VitConfig {
        layers,
        heads,
        width,
        patch_size: 4,
        image_size: 16,
        ln_eps: 1e-5,
        projection_dim: 6,
        mlp_dim: Some(2 * width),
        activation: Activation::Gelu,
        pixel_mean: [0.5; 3],
        pixel_std: [0.25; 3],
    }
}

/// Random weights with unit layer-norm gains and small projections.
pub fn random_weights(config: VitConfig, seed: u64) -> VitWeights {
    let mut r = rng(seed);
    let n = Normal::new(0.0f32, 1.0).unwrap();
    VitWeights::from_fn(config, true, |name, shape| {
        let len: usize = shape.iter().product();
        if name.contains("ln") && name.ends_with("weight") {
            return (0..len).map(|_| 1.0 + 0.1 * n.sample(&mut r)).collect();
        }
        let fan_in = if shape.len() == 2 { shape[0] } else { 1 };
        let std = if shape.len() == 2 { 1.0 / (fan_in as f32).sqrt() } else { 0.05 };
        (0..len).map(|_| std * n.sample(&mut r)).collect()
    })
    .unwrap()
}
