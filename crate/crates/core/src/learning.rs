//! Learning phase: explore around the anchor a0, fit by constrained least
//! squares, then commit.

use std::collections::HashMap;

use crate::env::RewardOracle;
use crate::error::{Error, Result};
use crate::geometry::{axpy, dot, norm, normalize, sample_sphere, SimRng};
use crate::linkfn::LinkFunction;

/// Actions (3 a0 + e_k) / 4 cycling through the coordinates.
#[derive(Clone, Debug)]
pub struct ExploreCycle {
    a0: Vec<f64>,
}

impl ExploreCycle {
    pub fn period(&self) -> usize {
        self.a0.len()
    }

    /// Action played at round `t` (1-based); the coordinate is `t mod d`.
    pub fn action(&self, t: u64) -> Vec<f64> {
        let d = self.a0.len();
        let mut a: Vec<f64> = self.a0.iter().map(|x| 0.75 * x).collect();
        a[(t % d as u64) as usize] += 0.25;
        a
    }
}

pub fn explore_actions(a0: &[f64]) -> Result<ExploreCycle> {
    let n = norm(a0);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("anchor must be a unit vector, norm is {n}")));
    }
    Ok(ExploreCycle { a0: a0.to_vec() })
}

/// Squared-error data with repeated actions merged into (count, mean) rows.
/// Merging leaves the least-squares objective unchanged up to a constant.
#[derive(Clone, Debug, Default)]
pub struct RegressionData {
    actions: Vec<Vec<f64>>,
    weights: Vec<f64>,
    means: Vec<f64>,
    within: f64,
    index: HashMap<Vec<u64>, usize>,
}

impl RegressionData {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_history(history: &[(Vec<f64>, f64)]) -> Self {
        let mut data = Self::new();
        for (a, r) in history {
            data.push(a, *r);
        }
        data
    }

    pub fn push(&mut self, action: &[f64], reward: f64) {
        self.push_weighted(action, 1.0, reward);
    }

    /// Adds `weight` observations at `action` whose mean is `mean`.
    pub fn push_weighted(&mut self, action: &[f64], weight: f64, mean: f64) {
        let key: Vec<u64> = action.iter().map(|x| x.to_bits()).collect();
        match self.index.get(&key) {
            Some(&k) => {
                let w = self.weights[k];
                let m = self.means[k];
                let total = w + weight;
                let new_mean = m + (mean - m) * weight / total;
                self.within += w * weight / total * (mean - m).powi(2);
                self.weights[k] = total;
                self.means[k] = new_mean;
            }
            None => {
                self.index.insert(key, self.actions.len());
                self.actions.push(action.to_vec());
                self.weights.push(weight);
                self.means.push(mean);
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.actions.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.actions.first().map(|a| a.len())
    }

    /// Sum over all observations of (f(<theta, a>) - r)^2.
    pub fn objective(&self, f: &LinkFunction, theta: &[f64]) -> f64 {
        self.within
            + self
                .actions
                .iter()
                .zip(&self.weights)
                .zip(&self.means)
                .map(|((a, w), m)| w * (f.value(dot(theta, a)) - m).powi(2))
                .sum::<f64>()
    }

    fn value_and_gradient(&self, f: &LinkFunction, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = self.within;
        for ((a, w), m) in self.actions.iter().zip(&self.weights).zip(&self.means) {
            let x = dot(theta, a);
            let r = f.value(x) - m;
            total += w * r * r;
            axpy(2.0 * w * r * f.derivative(x), a, grad);
        }
        total
    }
}

/// Least-squares objective over the sphere, optionally cut by <theta, a0> >= 1/2.
pub trait SphereObjective {
    fn dim(&self) -> usize;
    /// Value, with the gradient written into `grad`.
    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64;
    fn value(&self, theta: &[f64]) -> f64;
}

pub struct LinkObjective<'a> {
    pub data: &'a RegressionData,
    pub link: &'a LinkFunction,
}

impl SphereObjective for LinkObjective<'_> {
    fn dim(&self) -> usize {
        self.data.dim().unwrap_or(0)
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.data.value_and_gradient(self.link, theta, grad)
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.data.objective(self.link, theta)
    }
}

/// theta' A theta - 2 b' theta + c: the identity-link objective in Gram form.
#[derive(Clone, Debug)]
pub struct GramObjective {
    d: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

impl GramObjective {
    pub fn new(d: usize) -> Self {
        GramObjective { d, a: vec![0.0; d * d], b: vec![0.0; d], c: 0.0 }
    }

    pub fn push(&mut self, action: &[f64], reward: f64) {
        self.push_weighted(action, 1.0, reward, reward * reward);
    }

    /// `weight` observations at `action` with reward mean `mean` and mean square `mean_sq`.
    pub fn push_weighted(&mut self, action: &[f64], weight: f64, mean: f64, mean_sq: f64) {
        let d = self.d;
        for i in 0..d {
            let wi = weight * action[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.a[i * d..(i + 1) * d];
            axpy(wi, action, row);
        }
        axpy(weight * mean, action, &mut self.b);
        self.c += weight * mean_sq;
    }
}

impl SphereObjective for GramObjective {
    fn dim(&self) -> usize {
        self.d
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.d;
        for i in 0..d {
            grad[i] = 2.0 * (dot(&self.a[i * d..(i + 1) * d], theta) - self.b[i]);
        }
        // theta' A theta - 2 b' theta = theta' (grad / 2 + b) - 2 b' theta
        0.5 * dot(grad, theta) - dot(&self.b, theta) + self.c
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.d];
        self.value_and_gradient(theta, &mut g)
    }
}

/// Nearest point of {||theta|| = 1, <theta, a0> >= 1/2} along the great circle through a0.
pub fn project_feasible(theta: &mut [f64], a0: Option<&[f64]>) {
    if normalize(theta) == 0.0 {
        match a0 {
            Some(a) => theta.copy_from_slice(a),
            None => theta[0] = 1.0,
        }
    }
    let Some(a0) = a0 else { return };
    let c = dot(theta, a0);
    if c >= 0.5 {
        return;
    }
    let mut w = theta.to_vec();
    axpy(-c, a0, &mut w);
    if normalize(&mut w) < 1e-12 {
        // theta = -a0: any orthogonal direction is equally close
        w.iter_mut().for_each(|x| *x = 0.0);
        let k = (0..a0.len()).min_by(|&i, &j| a0[i].abs().total_cmp(&a0[j].abs())).unwrap_or(0);
        w[k] = 1.0;
        axpy(-a0[k], a0, &mut w);
        normalize(&mut w);
    }
    let s = 0.75f64.sqrt();
    for ((t, a), wi) in theta.iter_mut().zip(a0).zip(&w) {
        *t = 0.5 * a + s * wi;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the projected gradient of the weight-normalized objective is this small.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { restarts: 8, max_iter: 500, tol: 1e-8 }
    }
}

/// Projected gradient descent from `start`, with Barzilai-Borwein trial steps
/// and Armijo backtracking. Returns the final point and objective value.
pub fn descend(obj: &dyn SphereObjective, start: &[f64], a0: Option<&[f64]>, opts: &SolverOptions, scale: f64) -> (Vec<f64>, f64) {
    let d = obj.dim();
    let mut theta = start.to_vec();
    project_feasible(&mut theta, a0);
    let mut grad = vec![0.0; d];
    let mut value = obj.value_and_gradient(&theta, &mut grad);
    let mut step = 1.0 / scale.max(1e-300);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut trial = vec![0.0; d];
    let mut trial_grad = vec![0.0; d];
    for _ in 0..opts.max_iter {
        let radial = dot(&grad, &theta);
        let rgrad: Vec<f64> = grad.iter().zip(&theta).map(|(g, t)| g - radial * t).collect();
        if let Some((s, y)) = &prev {
            let sy = dot(s, y);
            if sy > 0.0 {
                step = dot(s, s) / sy;
            }
        }
        let mut accepted = false;
        let mut next_value = value;
        for _ in 0..60 {
            trial.copy_from_slice(&theta);
            axpy(-step, &rgrad, &mut trial);
            project_feasible(&mut trial, a0);
            let moved: f64 = trial.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let new_value = obj.value_and_gradient(&trial, &mut trial_grad);
            if new_value <= value - 1e-4 * moved / step || moved == 0.0 {
                accepted = moved > 0.0 && new_value <= value;
                next_value = new_value;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let pg = norm(&s) / step / scale;
        theta.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        value = next_value;
        prev = Some((s, y));
        if pg <= opts.tol {
            break;
        }
    }
    (theta, value)
}

/// Best local minimum over random feasible starts plus the given extra starts.
pub fn minimize_with_restarts(
    obj: &dyn SphereObjective,
    a0: Option<&[f64]>,
    extra_starts: &[&[f64]],
    rng: &mut SimRng,
    opts: &SolverOptions,
    scale: f64,
) -> Result<(Vec<f64>, f64)> {
    let d = obj.dim();
    let mut starts: Vec<Vec<f64>> = extra_starts.iter().map(|s| s.to_vec()).collect();
    for _ in 0..opts.restarts {
        starts.push(sample_sphere(rng, d));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (theta, value) = descend(obj, s, a0, opts, scale);
        if value.is_finite() && best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((theta, value));
        }
    }
    best.ok_or_else(|| Error::SolverFailure("no finite objective value at any start".into()))
}

/// argmin of the squared error over unit theta with <theta, a0> >= 1/2.
pub fn constrained_least_squares(
    data: &RegressionData,
    link: &LinkFunction,
    a0: &[f64],
    warm_start: Option<&[f64]>,
    rng: &mut SimRng,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Precondition("history is empty".into()));
    }
    let obj = LinkObjective { data, link };
    let mut extra: Vec<&[f64]> = vec![a0];
    if let Some(w) = warm_start {
        extra.push(w);
    }
    let (theta, _) = minimize_with_restarts(&obj, Some(a0), &extra, rng, opts, data.total_weight())?;
    Ok(theta)
}

/// Least squares over the whole sphere (no half-space cut).
pub fn sphere_least_squares(
    data: &RegressionData,
    link: &LinkFunction,
    warm_start: Option<&[f64]>,
    rng: &mut SimRng,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Precondition("history is empty".into()));
    }
    let obj = LinkObjective { data, link };
    let extra: Vec<&[f64]> = warm_start.into_iter().collect();
    let (theta, _) = minimize_with_restarts(&obj, None, &extra, rng, opts, data.total_weight())?;
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnMode {
    Estimation,
    Regret,
}

#[derive(Clone, Debug)]
pub struct LearnConfig {
    pub mode: LearnMode,
    /// Overrides c_f from the link metadata in the exploration length.
    pub cf_lower: Option<f64>,
    /// Clip rewards to [-c, c] before fitting. Off by default.
    pub clip_rewards: Option<f64>,
    pub solver: SolverOptions,
}

impl LearnConfig {
    pub fn new(mode: LearnMode) -> Self {
        LearnConfig { mode, cf_lower: None, clip_rewards: None, solver: SolverOptions::default() }
    }
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub theta_hat: Vec<f64>,
    pub m_explore: u64,
    pub total_queries: u64,
    /// Filled in by the harness, which can read the ledger.
    pub cumulative_regret: Option<f64>,
    /// 1 - <theta*, theta_hat>, filled in by the harness.
    pub estimation_gap: Option<f64>,
}

/// Exploration length: T for estimation, min(T, ceil(d sqrt(T) / c_f)) for regret.
pub fn exploration_length(mode: LearnMode, d: usize, horizon: u64, cf_lower: f64) -> u64 {
    match mode {
        LearnMode::Estimation => horizon,
        LearnMode::Regret => {
            let m = (d as f64 * (horizon as f64).sqrt() / cf_lower).ceil();
            if m >= horizon as f64 {
                horizon
            } else {
                m as u64
            }
        }
    }
}

pub fn run_learning<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    rng: &mut SimRng,
    a0: &[f64],
    horizon: u64,
    cfg: &LearnConfig,
) -> Result<LearnOutcome> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be at least 1".into()));
    }
    let d = oracle.dim();
    let cycle = explore_actions(a0)?;
    let cf = cfg.cf_lower.unwrap_or_else(|| oracle.link().effective_cf_lower());
    let m = exploration_length(cfg.mode, d, horizon, cf);
    let start = oracle.queries();
    let mut data = RegressionData::new();
    match cfg.clip_rewards {
        Some(c) => {
            for t in 1..=m {
                let a = cycle.action(t);
                let r = oracle.query(&a)?.clamp(-c, c);
                data.push(&a, r);
            }
        }
        None => {
            // Without clipping only the per-action means matter, so each
            // explore action is queried as one batch.
            let full = m / d as u64;
            let rem = m % d as u64;
            for k in (1..d as u64).chain(std::iter::once(0)) {
                let n = full + u64::from(k >= 1 && k <= rem);
                if n > 0 {
                    let a = cycle.action(k);
                    let mean = oracle.query_batch(&a, n)?;
                    data.push_weighted(&a, n as f64, mean);
                }
            }
        }
    }
    let link = oracle.link().clone();
    let theta_hat = constrained_least_squares(&data, &link, a0, None, rng, &cfg.solver)?;
    if horizon > m {
        oracle.query_batch(&theta_hat, horizon - m)?;
    }
    Ok(LearnOutcome {
        theta_hat,
        m_explore: m,
        total_queries: oracle.queries() - start,
        cumulative_regret: None,
        estimation_gap: None,
    })
}
