//! Seeded randomness. Every stochastic code path draws from a `ChaCha8Rng`
//! created here so identical seeds give bitwise-identical runs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn uniform_tensor(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_shape_fn(shape, |_| uniform(rng, lo, hi))
}

/// Standard normal via Box-Muller; avoids a distribution-crate dependency
/// and keeps the draw order stable across platforms.
pub fn standard_normal(rng: &mut Prng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn normal_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(shape, |_| standard_normal(rng))
}

/// Gumbel(0, 1) noise: `-ln(-ln U)`.
pub fn gumbel(rng: &mut Prng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
    -(-u.ln()).ln()
}

pub fn gumbel_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(shape, |_| gumbel(rng))
}

pub fn bernoulli(rng: &mut Prng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Index draw from unnormalized non-negative weights.
pub fn categorical(rng: &mut Prng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Poisson draw (Knuth for small rates, normal approximation above 30).
pub fn poisson(rng: &mut Prng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    if rate > 30.0 {
        let x = rate + rate.sqrt() * standard_normal(rng);
        return x.round().max(0.0);
    }
    let l = (-rate).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k as f64;
        }
        k += 1;
    }
}

/// Fisher-Yates shuffle of indices, deterministic given the rng state.
pub fn shuffled_indices(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded(42);
        let mut b = seeded(42);
        for _ in 0..100 {
            assert_eq!(a.random::<f64>().to_bits(), b.random::<f64>().to_bits());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = seeded(1);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn poisson_mean_matches_rate() {
        let mut rng = seeded(2);
        for &rate in &[0.5, 3.0, 50.0] {
            let n = 50_000;
            let mean = (0..n).map(|_| poisson(&mut rng, rate)).sum::<f64>() / n as f64;
            let se = (rate / n as f64).sqrt();
            assert!((mean - rate).abs() < 4.0 * se + 0.01, "rate {rate}: {mean}");
        }
    }
}
