//! Glorot-uniform initialisation.

use rand::Rng;

use crate::tensor::Tensor;

/// `(fan_in, fan_out)` for a weight tensor laid out `[out, in, k...]`.
///
/// Receptive-field extents multiply both fans, so a `K×C` 1×1 weight has
/// `fan_in = C`, `fan_out = K`, and a `C'×C×3×3` kernel has `9C` and `9C'`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

pub fn glorot_limit(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let limit = glorot_limit(shape);
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..=limit))
}
