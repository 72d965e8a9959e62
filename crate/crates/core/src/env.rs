//! The ridge bandit environment and its query ledger.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sample_sphere, SimRng};
use crate::linkfn::LinkFunction;

/// What a learner is allowed to do with an environment: ask for rewards.
pub trait RewardOracle {
    fn dim(&self) -> usize;
    fn link(&self) -> &LinkFunction;
    fn query(&mut self, a: &[f64]) -> Result<f64>;
    /// Mean of `n` independent rewards at `a`.
    fn query_batch(&mut self, a: &[f64], n: u64) -> Result<f64>;
    fn queries(&self) -> u64;
}

/// One logged call. A batch of `count` queries is a single entry whose
/// `reward` is the batch mean and whose `t` is the index of its last query.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub t: u64,
    #[serde(skip)]
    pub count: u64,
    pub inner_product: f64,
    pub reward: f64,
    pub cum_regret: f64,
    pub cum_queries: u64,
}

#[derive(Clone, Debug)]
pub struct Ledger {
    queries: u64,
    cumulative_regret: f64,
    trajectory: Vec<LedgerEntry>,
    thin: u64,
    calls: u64,
    max_inner_product: f64,
    max_abs_inner_product: f64,
}

impl Ledger {
    fn new() -> Self {
        Ledger {
            queries: 0,
            cumulative_regret: 0.0,
            trajectory: Vec::new(),
            thin: 1,
            calls: 0,
            max_inner_product: f64::NEG_INFINITY,
            max_abs_inner_product: 0.0,
        }
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.cumulative_regret
    }

    pub fn trajectory(&self) -> &[LedgerEntry] {
        &self.trajectory
    }

    /// Largest inner product played so far (tracked exactly even when thinned).
    pub fn max_inner_product(&self) -> f64 {
        self.max_inner_product
    }

    pub fn max_abs_inner_product(&self) -> f64 {
        self.max_abs_inner_product
    }

    pub fn is_thinned(&self) -> bool {
        self.thin > 1
    }

    /// Cumulative regret after the first `t` queries. Needs an unthinned ledger.
    pub fn regret_at(&self, t: u64, best: f64, f: &LinkFunction) -> f64 {
        assert!(!self.is_thinned(), "regret_at needs every call logged");
        if t >= self.queries {
            return self.cumulative_regret;
        }
        let k = self.trajectory.partition_point(|e| e.cum_queries <= t);
        let before = if k == 0 { 0.0 } else { self.trajectory[k - 1].cum_regret };
        let done = if k == 0 { 0 } else { self.trajectory[k - 1].cum_queries };
        let e = &self.trajectory[k];
        before + (t - done) as f64 * (best - f.value(e.inner_product))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.trajectory {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RidgeEnvironment {
    d: usize,
    link: LinkFunction,
    theta_star: Vec<f64>,
    noise_sigma: f64,
    rng: SimRng,
    ledger: Ledger,
    max_queries: Option<u64>,
}

impl RidgeEnvironment {
    /// New environment. Without an explicit `theta_star` one is drawn uniformly from `rng`.
    pub fn spawn(
        d: usize,
        link: LinkFunction,
        noise_sigma: f64,
        mut rng: SimRng,
        theta_star: Option<Vec<f64>>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Precondition("dimension must be positive".into()));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Precondition(format!("noise sigma {noise_sigma} must be >= 0")));
        }
        let theta_star = match theta_star {
            Some(mut t) => {
                if t.len() != d {
                    return Err(Error::Precondition(format!("theta_star has length {}, expected {d}", t.len())));
                }
                let n = norm(&t);
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::NonUnitTheta(n));
                }
                t.iter_mut().for_each(|x| *x /= n);
                t
            }
            None => sample_sphere(&mut rng, d),
        };
        Ok(RidgeEnvironment {
            d,
            link,
            theta_star,
            noise_sigma,
            rng,
            ledger: Ledger::new(),
            max_queries: None,
        })
    }

    /// The hidden direction. For the harness and diagnostics only; learners
    /// receive the environment through [`RewardOracle`].
    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Log only every `k`-th call. Counts and regret stay exact.
    pub fn set_thinning(&mut self, k: u64) {
        self.ledger.thin = k.max(1);
    }

    pub fn set_max_queries(&mut self, cap: Option<u64>) {
        self.max_queries = cap;
    }

    /// Reward of the best action, f(1).
    pub fn best_value(&self) -> f64 {
        self.link.value(1.0)
    }

    fn record(&mut self, x: f64, n: u64, reward: f64) {
        let l = &mut self.ledger;
        l.queries += n;
        l.cumulative_regret += n as f64 * (self.link.value(1.0) - self.link.value(x));
        l.max_inner_product = l.max_inner_product.max(x);
        l.max_abs_inner_product = l.max_abs_inner_product.max(x.abs());
        l.calls += 1;
        if l.calls.is_multiple_of(l.thin) {
            l.trajectory.push(LedgerEntry {
                t: l.queries,
                count: n,
                inner_product: x,
                reward,
                cum_regret: l.cumulative_regret,
                cum_queries: l.queries,
            });
        }
    }

    fn inner(&self, a: &[f64]) -> Result<f64> {
        if a.len() != self.d {
            return Err(Error::Precondition(format!("action has length {}, expected {}", a.len(), self.d)));
        }
        let n = norm(a);
        if n > 1.0 + 1e-9 {
            return Err(Error::ActionOutsideBall(n));
        }
        Ok(dot(&self.theta_star, a).clamp(-1.0, 1.0))
    }
}

impl RewardOracle for RidgeEnvironment {
    fn dim(&self) -> usize {
        self.d
    }

    fn link(&self) -> &LinkFunction {
        &self.link
    }

    fn query(&mut self, a: &[f64]) -> Result<f64> {
        self.query_batch(a, 1)
    }

    /// The mean of n Gaussian rewards is drawn directly as f(x) + sigma Z / sqrt(n),
    /// which has exactly the law of averaging n separate draws.
    fn query_batch(&mut self, a: &[f64], n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        let x = self.inner(a)?;
        if let Some(cap) = self.max_queries {
            if self.ledger.queries.saturating_add(n) > cap {
                return Err(Error::BudgetExhausted(cap));
            }
        }
        let mean = self.link.value(x);
        let reward = if self.noise_sigma > 0.0 {
            mean + self.noise_sigma * self.rng.normal() / (n as f64).sqrt()
        } else {
            mean
        };
        self.record(x, n, reward);
        Ok(reward)
    }

    fn queries(&self) -> u64 {
        self.ledger.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unit_vector;

    fn env(d: usize, sigma: f64, seed: u64) -> RidgeEnvironment {
        RidgeEnvironment::spawn(d, LinkFunction::cubic(), sigma, SimRng::new(seed), Some(unit_vector(d, 0))).unwrap()
    }

    #[test]
    fn noiseless_rewards() {
        let mut e = env(4, 0.0, 1);
        assert_eq!(e.query(&unit_vector(4, 0)).unwrap(), 1.0);
        assert_eq!(e.query(&unit_vector(4, 2)).unwrap(), 0.0);
        assert_eq!(e.query_batch(&[0.5, 0.0, 0.0, 0.0], 1000).unwrap(), 0.125);
        assert_eq!(e.queries(), 1002);
        let expected = 1.0 + 1000.0 * (1.0 - 0.125);
        assert!((e.ledger().cumulative_regret() - expected).abs() < 1e-9);
    }

    #[test]
    fn action_outside_ball_is_rejected() {
        let mut e = env(2, 1.0, 1);
        assert!(matches!(e.query(&[1.0, 0.1]), Err(Error::ActionOutsideBall(_))));
        assert_eq!(e.queries(), 0);
    }

    #[test]
    fn spawn_validates_theta() {
        let ok = RidgeEnvironment::spawn(2, LinkFunction::cubic(), 1.0, SimRng::new(0), Some(vec![1.0, 0.0]));
        assert!(ok.is_ok());
        let bad = RidgeEnvironment::spawn(2, LinkFunction::cubic(), 1.0, SimRng::new(0), Some(vec![1.0 / 1.9, 1.0 / 1.9]));
        assert!(matches!(bad, Err(Error::NonUnitTheta(_))));
        let a = RidgeEnvironment::spawn(8, LinkFunction::cubic(), 1.0, SimRng::new(9), None).unwrap();
        let b = RidgeEnvironment::spawn(8, LinkFunction::cubic(), 1.0, SimRng::new(9), None).unwrap();
        assert_eq!(a.theta_star(), b.theta_star());
        assert!((norm(a.theta_star()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments() {
        let mut e = env(3, 1.0, 11);
        let a = [0.6, 0.0, 0.0];
        let n = 100_000;
        let r: Vec<f64> = (0..n).map(|_| e.query(&a).unwrap()).collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.216).abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn batch_mean_tail_bound() {
        let d = 100;
        let f = LinkFunction::cubic();
        let eps = crate::linkfn::iaht_epsilon(&f, d).unwrap();
        let delta: f64 = 0.1;
        let n = (2.0 * (2.0 / delta).ln() / (eps * eps)).ceil() as u64;
        let mut e = env(d, 1.0, 12);
        let mut a = vec![0.0; d];
        a[0] = 0.25;
        let misses = (0..500)
            .filter(|_| (e.query_batch(&a, n).unwrap() - 0.25f64.powi(3)).abs() > eps)
            .count();
        // Upper end of a 99% binomial interval at p = 0.1 with 500 trials is about 0.135.
        assert!((misses as f64) / 500.0 <= 0.135, "misses = {misses}");
        assert_eq!(e.queries(), 500 * n);
    }

    #[test]
    fn ledger_is_consistent() {
        let mut e = env(3, 1.0, 5);
        let mut rng = SimRng::new(6);
        for k in 0..50 {
            let mut a = sample_sphere(&mut rng, 3);
            a.iter_mut().for_each(|x| *x *= 0.9);
            e.query_batch(&a, 1 + k % 4).unwrap();
        }
        let l = e.ledger();
        let total: u64 = l.trajectory().iter().map(|x| x.count).sum();
        assert_eq!(total, l.queries());
        let f = LinkFunction::cubic();
        let regret: f64 = l.trajectory().iter().map(|x| x.count as f64 * (1.0 - f.value(x.inner_product))).sum();
        assert!((regret - l.cumulative_regret()).abs() < 1e-9);
        assert!((l.regret_at(l.queries(), 1.0, &f) - l.cumulative_regret()).abs() < 1e-12);
        let first = &l.trajectory()[0];
        assert!((l.regret_at(first.cum_queries, 1.0, &f) - first.cum_regret).abs() < 1e-12);
    }

    #[test]
    fn budget_cap_blocks_queries() {
        let mut e = env(2, 0.0, 1);
        e.set_max_queries(Some(10));
        e.query_batch(&[0.5, 0.0], 8).unwrap();
        assert!(matches!(e.query_batch(&[0.5, 0.0], 3), Err(Error::BudgetExhausted(10))));
        assert_eq!(e.queries(), 8);
    }

    #[test]
    fn thinning_keeps_totals_exact() {
        let mut e = env(2, 0.0, 1);
        e.set_thinning(10);
        for _ in 0..95 {
            e.query(&[0.5, 0.0]).unwrap();
        }
        assert_eq!(e.ledger().trajectory().len(), 9);
        assert_eq!(e.queries(), 95);
        assert!((e.ledger().cumulative_regret() - 95.0 * 0.875).abs() < 1e-9);
    }
}
