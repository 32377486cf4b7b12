use rand::Rng;

use crate::autodiff::Tensor;

/// Uniform in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.values_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}
