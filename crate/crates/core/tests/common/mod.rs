#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_core::autodiff::Tensor;
use twostream_core::c2f::{BackboneConfig, C2fConfig};

pub const CLASSES: usize = 4;

/// 2×16×16 inputs through five stages of 2, 2, 3, 3, 4 channels.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_channels: 2,
        input_height: 16,
        input_width: 16,
        stage_channels: vec![2, 2, 3, 3, 4],
        side_stages: vec![3, 4, 5],
        feature_dim: 4,
        head_hidden: 4,
        feature_relu: true,
    }
}

pub fn tiny_c2f() -> C2fConfig {
    C2fConfig {
        backbone: tiny_backbone(),
        lstm_hidden: 4,
        levels: vec![1, 2, 3],
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn tiny_input(rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(rng, &[2, 16, 16])
}

/// Independent scalar form of `−w·Σ_{n∈targets} log softmax(z)_n`.
pub fn scalar_group_nll(z: &[f64], targets: &[usize], w: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut denom = 0.0;
    for &v in z {
        denom += (v - m).exp();
    }
    let mut total = 0.0;
    for &n in targets {
        let p = (z[n] - m).exp() / denom;
        total -= w * p.ln();
    }
    total
}

/// Four classes of 2×16×16 frames, one confusable pair, short videos.
pub fn tiny_data() -> twostream_core::data::SyntheticConfig {
    twostream_core::data::SyntheticConfig {
        classes: CLASSES,
        videos_per_class: 8,
        frames: 30,
        channels: 2,
        height: 16,
        width: 16,
        lag: 5,
        signature_width: 5,
        patch_size: 6,
        amplitude: 2.0,
        confusable_pairs: vec![[0, 1]],
        share_variant_patches: false,
        noise: 0.3,
        onset_margin: 3,
        test_fraction: 0.25,
        seed: 0,
    }
}
