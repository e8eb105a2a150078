use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mixes a base seed with a path of integers (epoch, batch, layer, ...) into
/// an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inverted-dropout mask: each entry is 0 with probability `1 - keep_prob`
/// and `1 / keep_prob` otherwise.
pub fn make_dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    keep_prob: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )));
    }
    if keep_prob == 1.0 {
        return Ok(Tensor::full(rows, cols, T::one()));
    }
    let mut rng = rng_from_seed(seed);
    let kept = T::of_f64(1.0 / keep_prob);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < keep_prob {
                kept
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Global L2 norm of the gradients of trainable parameters.
pub fn grad_norm<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.grad.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// One plain SGD update with optional global-norm clipping. Gradients are
/// zeroed afterwards. Returns the pre-clipping gradient norm.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64, clip_norm: Option<f64>) -> Result<f64> {
    if !(lr >= 0.0) {
        return Err(Error::Domain(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if let Some(p) = params.iter().find(|p| p.trainable && !p.grad.all_finite()) {
        return Err(Error::NonFinite(p.name.clone()));
    }
    let norm = grad_norm(params);
    let mut scale = 1.0;
    if let Some(c) = clip_norm {
        if norm > c && norm > 0.0 {
            scale = c / norm;
        }
    }
    if lr > 0.0 {
        let step = T::of_f64(lr * scale);
        for p in params.iter_mut().filter(|p| p.trainable) {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v = *v - step * g;
            }
        }
    }
    params.zero_grads();
    Ok(norm)
}
