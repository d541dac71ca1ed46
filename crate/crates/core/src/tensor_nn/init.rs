use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor_nn::tensor::Tensor;

/// Seeded generator used throughout the crate. ChaCha output is stable
/// across platforms and crate versions.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: u64) -> u64 {
    crate::memory_lookup::splitmix64(base ^ crate::memory_lookup::splitmix64(label.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Fan-in convention: all dimensions but the last (`in x out` layout).
fn fan_in(shape: &[usize]) -> Result<usize> {
    match shape {
        [] => Err(Error::EmptyInput("lecun_normal_init shape")),
        [n] => Ok(*n),
        [lead @ .., _] => Ok(lead.iter().product()),
    }
}

/// LeCun normal initialization: entries drawn from `Normal(0, 1 / fan_in)`.
pub fn lecun_normal_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = seeded(seed);
    lecun_normal(shape, fan_in(shape)?, &mut rng)
}

pub fn lecun_normal(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyInput("lecun_normal shape"));
    }
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    normal(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(t: &Tensor) -> f64 {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn variance_matches_inverse_fan_in() {
        let t = lecun_normal_init(&[1000, 1000], 7).unwrap();
        let v = variance(&t);
        assert!((v - 1e-3).abs() < 0.05 * 1e-3, "variance {v}");
    }

    #[test]
    fn fan_in_one_gives_unit_variance() {
        let t = lecun_normal_init(&[1, 20_000], 3).unwrap();
        assert!((variance(&t) - 1.0).abs() < 0.05);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = lecun_normal_init(&[8, 4], 11).unwrap();
        let b = lecun_normal_init(&[8, 4], 11).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), lecun_normal_init(&[8, 4], 12).unwrap().data());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(lecun_normal_init(&[], 0).is_err());
        assert!(lecun_normal_init(&[0, 3], 0).is_err());
    }
}
