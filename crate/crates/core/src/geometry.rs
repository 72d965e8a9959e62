//! Sphere sampling, orthogonal complements and small vector helpers.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seeded generator. Equal seeds give bit-identical streams.
#[derive(Clone, Debug)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `k` of a family rooted at `base`.
    pub fn derive(base: u64, k: u64) -> Self {
        Self::new(derive_seed(base, k))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator; advances this one by a single draw.
    pub fn fork(&mut self) -> SimRng {
        let s = self.inner.next_u64();
        SimRng::new(splitmix64(s))
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, k: u64) -> u64 {
    base ^ splitmix64(k)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `a` to unit length and returns its previous norm.
pub fn normalize(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn unit_vector(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

pub fn gaussian_vector(rng: &mut SimRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

pub fn sample_sphere(rng: &mut SimRng, d: usize) -> Vec<f64> {
    assert!(d >= 1, "sphere dimension must be positive");
    loop {
        let mut v = gaussian_vector(rng, d);
        if normalize(&mut v) > 1e-150 {
            return v;
        }
    }
}

/// Orthonormal directions accepted so far.
#[derive(Clone, Debug)]
pub struct DirectionBasis {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl DirectionBasis {
    pub fn new(dim: usize) -> Self {
        DirectionBasis { dim, vectors: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Removes the components along every basis vector (two passes).
    pub fn project_out(&self, v: &mut [f64]) {
        for _ in 0..2 {
            for b in &self.vectors {
                let c = dot(b, v);
                axpy(-c, b, v);
            }
        }
    }

    /// Re-orthogonalizes `v` against the basis, normalizes, and appends it.
    pub fn push(&mut self, mut v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Precondition(format!(
                "vector of length {} pushed into a basis of dimension {}",
                v.len(),
                self.dim
            )));
        }
        if self.vectors.len() == self.dim {
            return Err(Error::FullBasis(self.dim));
        }
        self.project_out(&mut v);
        if normalize(&mut v) < 1e-8 {
            return Err(Error::Precondition("vector lies in the span of the basis".into()));
        }
        if let Some(worst) = self.vectors.iter().map(|b| dot(b, &v).abs()).reduce(f64::max) {
            assert!(worst <= 1e-9, "orthonormality lost: |<b, v>| = {worst}");
        }
        self.vectors.push(v);
        Ok(())
    }

    /// Sum of the basis vectors.
    pub fn sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for v in &self.vectors {
            axpy(1.0, v, &mut s);
        }
        s
    }
}

/// Uniform draw from the unit sphere of the orthogonal complement of `basis`.
pub fn sample_complement(rng: &mut SimRng, basis: &DirectionBasis) -> Result<Vec<f64>> {
    if basis.len() >= basis.dim() {
        return Err(Error::FullBasis(basis.dim()));
    }
    loop {
        let mut v = gaussian_vector(rng, basis.dim());
        basis.project_out(&mut v);
        if normalize(&mut v) > 1e-8 {
            return Ok(v);
        }
    }
}

/// `a * u + b * v`, rejected if it leaves the unit ball.
pub fn combine_scaled(u: &[f64], v: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    let w: Vec<f64> = u.iter().zip(v).map(|(x, y)| a * x + b * y).collect();
    let n = norm(&w);
    if n > 1.0 + 1e-9 {
        return Err(Error::BallViolation(n));
    }
    Ok(w)
}

/// First coordinate of a uniform point on the sphere in R^k, drawn from its exact law.
pub fn sphere_coordinate(rng: &mut SimRng, k: usize) -> f64 {
    let g = rng.normal();
    if k == 1 {
        return g.signum();
    }
    let rest: f64 = ChiSquared::new((k - 1) as f64).expect("positive dof").sample(rng);
    g / (g * g + rest).sqrt()
}

/// Frequency of `lambda * u` in [lo, hi] where u is one coordinate of the sphere in R^k.
pub fn window_frequency(rng: &mut SimRng, k: usize, lambda: f64, lo: f64, hi: f64, draws: usize) -> f64 {
    let hits = (0..draws)
        .filter(|_| {
            let x = lambda * sphere_coordinate(rng, k);
            (lo..=hi).contains(&x)
        })
        .count();
    hits as f64 / draws as f64
}

/// Measured probability that a complement direction lands in the acceptance
/// window [2.2, 2.8]/sqrt(d), in the worst epoch of an `m`-epoch search.
///
/// The projection of the hidden direction onto the complement is assumed as
/// small as the accepted directions allow: squared norm 1 - 9(m-1)/d, floored
/// at 7/16. Estimated once per (d, m) and cached.
pub fn window_constant(d: usize, m: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&c) = cache.lock().expect("cache poisoned").get(&(d, m)) {
        return c;
    }
    let removed = m.saturating_sub(1);
    let k = d - removed;
    let lambda = (1.0 - 9.0 * removed as f64 / d as f64).max(7.0 / 16.0).sqrt();
    let s = (d as f64).sqrt();
    let mut rng = SimRng::derive(0x00c0_ffee, ((d as u64) << 32) | m as u64);
    let mut draws = 100_000usize;
    let c = loop {
        let p = window_frequency(&mut rng, k, lambda, 2.2 / s, 2.8 / s, draws);
        if p * draws as f64 >= 25.0 || draws >= 1 << 26 {
            break p.max(1.0 / draws as f64);
        }
        draws *= 2;
    };
    cache.lock().expect("cache poisoned").insert((d, m), c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SimRng::new(7);
        let mut b = SimRng::new(7);
        for _ in 0..10 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_ne!(SimRng::derive(7, 1).next_u64(), SimRng::derive(7, 2).next_u64());
    }

    #[test]
    fn sphere_samples_are_unit() {
        let mut rng = SimRng::new(1);
        for d in [1, 2, 5, 64] {
            let v = sample_sphere(&mut rng, d);
            assert!((norm(&v) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_dimensional_sphere_is_a_fair_sign() {
        let mut rng = SimRng::new(2);
        let n = 1000;
        let plus = (0..n).filter(|_| sample_sphere(&mut rng, 1)[0] > 0.0).count() as f64;
        let chi2 = 2.0 * (plus - 500.0).powi(2) / 500.0;
        // 6.635 is the 0.99 quantile of chi-square with one degree of freedom
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn sphere_mean_is_centered() {
        let mut rng = SimRng::new(3);
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| sample_sphere(&mut rng, 64)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 / (64.0 * n as f64).sqrt());
    }

    #[test]
    fn complement_samples_are_orthogonal() {
        let mut rng = SimRng::new(4);
        let mut basis = DirectionBasis::new(3);
        basis.push(unit_vector(3, 0)).unwrap();
        for _ in 0..100 {
            let v = sample_complement(&mut rng, &basis).unwrap();
            assert!(v[0].abs() <= 1e-9);
            assert!((norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_of_a_hyperplane_is_its_normal() {
        let mut rng = SimRng::new(5);
        let d = 6;
        let mut basis = DirectionBasis::new(d);
        let mut g = sample_sphere(&mut rng, d);
        for i in 0..d - 1 {
            let mut e = unit_vector(d, i);
            axpy(0.3, &g, &mut e);
            basis.push(e).unwrap();
        }
        let v = sample_complement(&mut rng, &basis).unwrap();
        basis.project_out(&mut g);
        normalize(&mut g);
        assert!((dot(&v, &g).abs() - 1.0).abs() < 1e-9);
        basis.push(v).unwrap();
        assert!(matches!(sample_complement(&mut rng, &basis), Err(Error::FullBasis(6))));
    }

    #[test]
    fn combine_scaled_norms() {
        let e1 = unit_vector(2, 0);
        let e2 = unit_vector(2, 1);
        let h = 0.5f64.sqrt();
        assert!((norm(&combine_scaled(&e1, &e2, h, h).unwrap()) - 1.0).abs() < 1e-12);
        let w = combine_scaled(&e1, &e2, 0.5 * h, h).unwrap();
        assert!((norm(&w) - 0.625f64.sqrt()).abs() < 1e-12);
        assert!(matches!(combine_scaled(&e1, &e1, 1.0, 1.0), Err(Error::BallViolation(_))));
    }

    #[test]
    fn window_constant_is_cached_and_positive() {
        let a = window_constant(256, 16);
        let b = window_constant(256, 16);
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 0.05);
    }
}
