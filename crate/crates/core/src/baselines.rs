//! Competitors: Eluder-UCB, learners driven by regression oracles, and a
//! nonadaptive sampler.

use crate::env::RewardOracle;
use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sample_complement, sample_sphere, DirectionBasis, SimRng};
use crate::learning::{descend, minimize_with_restarts, sphere_least_squares, GramObjective, RegressionData, SolverOptions, SphereObjective};
use crate::linkfn::LinkFunction;

/// Est_t = kappa d ln(e t).
pub fn estimation_budget(kappa: f64, d: usize, t: u64) -> f64 {
    kappa * d as f64 * (std::f64::consts::E * t.max(1) as f64).ln()
}

/// Sum over the history of (f(<a_s, theta>) - f(<a_s, reference>))^2.
pub fn residual_between(link: &LinkFunction, actions: &[Vec<f64>], theta: &[f64], reference: &[f64]) -> f64 {
    actions
        .iter()
        .map(|a| (link.value(dot(a, theta)) - link.value(dot(a, reference))).powi(2))
        .sum()
}

/// Least-squares confidence set around a fitted center.
#[derive(Clone, Debug)]
pub struct ConfidenceSet {
    link: LinkFunction,
    d: usize,
    actions: Vec<Vec<f64>>,
    data: RegressionData,
    gram: Option<GramObjective>,
    center: Option<Vec<f64>>,
    center_values: Vec<f64>,
    pub est_budget: f64,
}

impl ConfidenceSet {
    pub fn new(link: LinkFunction, d: usize, est_budget: f64) -> Self {
        let gram = link.is_identity().then(|| GramObjective::new(d));
        ConfidenceSet {
            link,
            d,
            actions: Vec::new(),
            data: RegressionData::new(),
            gram,
            center: None,
            center_values: Vec::new(),
            est_budget,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn center(&self) -> Option<&[f64]> {
        self.center.as_deref()
    }

    pub fn push(&mut self, action: Vec<f64>, reward: f64) {
        if let Some(g) = &mut self.gram {
            g.push(&action, reward);
        }
        self.data.push(&action, reward);
        if let Some(c) = &self.center {
            self.center_values.push(self.link.value(dot(&action, c)));
        }
        self.actions.push(action);
    }

    /// Replaces the center by the least-squares fit on the sphere.
    pub fn refit(&mut self, rng: &mut SimRng, opts: &SolverOptions) -> Result<()> {
        if self.actions.is_empty() {
            return Ok(());
        }
        let warm = self.center.clone();
        let center = match &self.gram {
            Some(g) => {
                let extra: Vec<&[f64]> = warm.as_deref().into_iter().collect();
                minimize_with_restarts(g, None, &extra, rng, opts, self.actions.len() as f64)?.0
            }
            None => sphere_least_squares(&self.data, &self.link, warm.as_deref(), rng, opts)?,
        };
        self.set_center(center);
        Ok(())
    }

    pub fn set_center(&mut self, center: Vec<f64>) {
        self.center_values = self.actions.iter().map(|a| self.link.value(dot(a, &center))).collect();
        self.center = Some(center);
    }

    /// Squared distance of theta's predictions from the center's on the history.
    pub fn residual(&self, theta: &[f64]) -> f64 {
        match &self.center {
            None => 0.0,
            Some(_) => self
                .actions
                .iter()
                .zip(&self.center_values)
                .map(|(a, c)| (self.link.value(dot(a, theta)) - c).powi(2))
                .sum(),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.residual(theta) <= self.est_budget
    }
}

struct ResidualObjective<'a> {
    set: &'a ConfidenceSet,
}

impl SphereObjective for ResidualObjective<'_> {
    fn dim(&self) -> usize {
        self.set.d
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (a, c) in self.set.actions.iter().zip(&self.set.center_values) {
            let x = dot(a, theta);
            let r = self.set.link.value(x) - c;
            total += r * r;
            let w = 2.0 * r * self.set.link.derivative(x);
            grad.iter_mut().zip(a).for_each(|(g, ai)| *g += w * ai);
        }
        total
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.set.residual(theta)
    }
}

/// Returns some member of the set: a random sphere point if it qualifies,
/// otherwise the end of a descent on the residual from a random start, and
/// finally the center itself.
pub fn optimistic_search(set: &ConfidenceSet, rng: &mut SimRng, restarts: usize) -> Result<Vec<f64>> {
    let theta = sample_sphere(rng, set.d);
    if set.is_empty() || set.center.is_none() || set.contains(&theta) {
        return Ok(theta);
    }
    let obj = ResidualObjective { set };
    let opts = SolverOptions { restarts: 0, max_iter: 200, tol: 1e-10 };
    let mut start = theta;
    for _ in 0..restarts {
        let (cand, value) = descend(&obj, &start, None, &opts, set.len() as f64);
        if value <= set.est_budget {
            return Ok(cand);
        }
        start = sample_sphere(rng, set.d);
    }
    set.center.clone().ok_or(Error::EmptyConfidenceSet(restarts))
}

/// Unit vectors with small pairwise correlation. Point 0 is the hidden direction.
#[derive(Clone, Debug)]
pub struct PackingSet {
    pub points: Vec<Vec<f64>>,
    pub bound: f64,
    pub t0: usize,
}

impl PackingSet {
    /// Rejection-samples `t0` sphere points whose pairwise |<., .>| stays below
    /// sqrt(c ln(t0) / d), starting from `theta_star`.
    pub fn build(rng: &mut SimRng, theta_star: &[f64], t0: usize, c: f64) -> Result<Self> {
        let d = theta_star.len();
        let bound = (c * (t0.max(2) as f64).ln() / d as f64).sqrt();
        let mut points = Vec::with_capacity(t0 + 1);
        points.push(theta_star.to_vec());
        let max_draws = 10 * (t0 + 1);
        let mut draws = 0;
        while points.len() < t0 + 1 {
            if draws >= max_draws {
                return Err(Error::Precondition(format!(
                    "packing stopped at {} of {} points after {draws} draws",
                    points.len(),
                    t0 + 1
                )));
            }
            draws += 1;
            let p = sample_sphere(rng, d);
            if points.iter().all(|q| dot(q, &p).abs() <= bound) {
                points.push(p);
            }
        }
        Ok(PackingSet { points, bound, t0 })
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.points[0]
    }
}

/// How Eluder-UCB picks among the maximizers.
#[derive(Clone, Debug)]
pub enum TieBreak {
    OptimisticSearch,
    /// Plays packing points while they stay consistent with theta*. Uses the
    /// hidden direction through the packing, so it is an adversary, not a learner.
    AdversarialPacking(PackingSet),
}

#[derive(Clone, Copy, Debug)]
pub struct UcbConfig {
    pub kappa: f64,
    pub refit_interval: u64,
    pub restarts: usize,
    pub solver: SolverOptions,
}

impl Default for UcbConfig {
    fn default() -> Self {
        UcbConfig {
            kappa: 4.0,
            refit_interval: 1,
            restarts: 8,
            solver: SolverOptions { restarts: 2, max_iter: 200, tol: 1e-8 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UcbSummary {
    pub steps: u64,
    pub packing_plays: u64,
    pub fallbacks: u64,
    pub refits: u64,
}

/// State carried between steps of Eluder-UCB.
pub struct UcbState {
    pub set: ConfidenceSet,
    pub tie_break: TieBreak,
    next_packing: usize,
    pub cfg: UcbConfig,
    stale: bool,
    pub summary: UcbSummary,
}

impl UcbState {
    pub fn new(link: LinkFunction, d: usize, tie_break: TieBreak, cfg: UcbConfig) -> Self {
        UcbState {
            set: ConfidenceSet::new(link, d, estimation_budget(cfg.kappa, d, 1)),
            tie_break,
            next_packing: 1,
            cfg,
            stale: true,
            summary: UcbSummary::default(),
        }
    }

    fn ensure_center(&mut self, rng: &mut SimRng) -> Result<()> {
        if self.stale && !self.set.is_empty() {
            self.set.refit(rng, &self.cfg.solver)?;
            self.summary.refits += 1;
            self.stale = false;
        }
        Ok(())
    }
}

/// Chooses the action for round t = history length + 1.
pub fn eluder_ucb_step(state: &mut UcbState, rng: &mut SimRng) -> Result<Vec<f64>> {
    let t = state.set.len() as u64 + 1;
    state.set.est_budget = estimation_budget(state.cfg.kappa, state.set.d, t);
    if let TieBreak::AdversarialPacking(p) = &state.tie_break {
        if state.next_packing < p.points.len() {
            let cand = &p.points[state.next_packing];
            let r = residual_between(&state.set.link, &state.set.actions, cand, p.theta_star());
            if r <= state.set.est_budget {
                state.next_packing += 1;
                state.summary.packing_plays += 1;
                return Ok(cand.clone());
            }
        }
        state.summary.fallbacks += 1;
        state.stale = true;
    } else if state.cfg.refit_interval > 0 && (t - 1).is_multiple_of(state.cfg.refit_interval) {
        state.stale = true;
    }
    state.ensure_center(rng)?;
    optimistic_search(&state.set, rng, state.cfg.restarts)
}

/// Runs `horizon` rounds. `stop` sees each action and may end the run early.
pub fn run_eluder_ucb<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    rng: &mut SimRng,
    horizon: u64,
    tie_break: TieBreak,
    cfg: UcbConfig,
    mut stop: impl FnMut(&[f64]) -> bool,
) -> Result<UcbSummary> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be at least 1".into()));
    }
    let d = oracle.dim();
    let mut state = UcbState::new(oracle.link().clone(), d, tie_break, cfg);
    for _ in 0..horizon {
        let a = eluder_ucb_step(&mut state, rng)?;
        let r = oracle.query(&a)?;
        let done = stop(&a);
        state.set.push(a, r);
        state.summary.steps += 1;
        if done {
            break;
        }
    }
    Ok(state.summary)
}

pub fn zero_online_oracle(d: usize) -> Vec<f64> {
    vec![0.0; d]
}

pub fn random_offline_oracle(rng: &mut SimRng, d: usize) -> Vec<f64> {
    sample_sphere(rng, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Zero,
    RandomOffline,
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OraclePolicy {
    PlayEstimate,
    EstimatePlusPerturbation,
}

/// Actions played and the estimate available when each was chosen.
#[derive(Clone, Debug, Default)]
pub struct OracleTrace {
    pub actions: Vec<Vec<f64>>,
    /// For online oracles the estimate made at the start of round s; for
    /// offline ones the estimate issued at the end of round s.
    pub estimates: Vec<Vec<f64>>,
}

fn policy_action(policy: OraclePolicy, estimate: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
    let d = estimate.len();
    let n = norm(estimate);
    let mut a = estimate.to_vec();
    if n > 1.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
    if policy == OraclePolicy::EstimatePlusPerturbation {
        let mut basis = DirectionBasis::new(d);
        if n > 1e-12 {
            basis.push(estimate.to_vec())?;
        }
        let w = sample_complement(rng, &basis)?;
        let s = 1.0 / (d as f64).sqrt();
        a.iter_mut().zip(&w).for_each(|(x, wi)| *x += s * wi);
        let m = norm(&a);
        if m > 1.0 {
            a.iter_mut().for_each(|x| *x /= m);
        }
    }
    Ok(a)
}

/// A learner that sees only the oracle's estimates, never the rewards.
pub fn run_oracle_learner<O: RewardOracle + ?Sized>(
    oracle_env: &mut O,
    kind: OracleKind,
    policy: OraclePolicy,
    horizon: u64,
    learner_rng: &mut SimRng,
    oracle_rng: &mut SimRng,
) -> Result<OracleTrace> {
    let d = oracle_env.dim();
    let link = oracle_env.link().clone();
    let mut trace = OracleTrace::default();
    let mut latest = vec![0.0; d];
    let mut gram = GramObjective::new(d);
    let mut data = RegressionData::new();
    let ls_opts = SolverOptions { restarts: 1, max_iter: 200, tol: 1e-8 };
    for _ in 0..horizon {
        let estimate = match kind {
            OracleKind::Zero => zero_online_oracle(d),
            _ => latest.clone(),
        };
        let a = policy_action(policy, &estimate, learner_rng)?;
        let r = oracle_env.query(&a)?;
        match kind {
            OracleKind::Zero => trace.estimates.push(estimate),
            OracleKind::RandomOffline => {
                latest = random_offline_oracle(oracle_rng, d);
                trace.estimates.push(latest.clone());
            }
            OracleKind::LeastSquares => {
                let warm = (norm(&latest) > 0.0).then(|| latest.clone());
                latest = if link.is_identity() {
                    gram.push(&a, r);
                    let extra: Vec<&[f64]> = warm.as_deref().into_iter().collect();
                    minimize_with_restarts(&gram, None, &extra, oracle_rng, &ls_opts, (trace.actions.len() + 1) as f64)?.0
                } else {
                    data.push(&a, r);
                    sphere_least_squares(&data, &link, warm.as_deref(), oracle_rng, &ls_opts)?
                };
                trace.estimates.push(latest.clone());
            }
        }
        trace.actions.push(a);
    }
    Ok(trace)
}

/// Running sums of (f(<theta*, a_s>) - f(<estimate_s, a_s>))^2 for an online oracle.
pub fn online_residuals(link: &LinkFunction, theta_star: &[f64], trace: &OracleTrace) -> Vec<f64> {
    let mut total = 0.0;
    trace
        .actions
        .iter()
        .zip(&trace.estimates)
        .map(|(a, e)| {
            total += (link.value(dot(theta_star, a)) - link.value(dot(e, a))).powi(2);
            total
        })
        .collect()
}

/// Largest over t of sum_{s<=t} (f(<theta*, a_s>) - f(<estimate_t, a_s>))^2 for an offline oracle.
pub fn offline_residual_max(link: &LinkFunction, theta_star: &[f64], trace: &OracleTrace) -> f64 {
    let truth: Vec<f64> = trace.actions.iter().map(|a| link.value(dot(theta_star, a))).collect();
    let mut worst: f64 = 0.0;
    for (t, e) in trace.estimates.iter().enumerate() {
        let r: f64 = trace.actions[..=t]
            .iter()
            .zip(&truth)
            .map(|(a, y)| (y - link.value(dot(e, a))).powi(2))
            .sum();
        worst = worst.max(r);
    }
    worst
}

/// Draws all `horizon` actions up front, queries them, and fits the sphere least squares.
pub fn run_nonadaptive<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    rng: &mut SimRng,
    horizon: u64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let d = oracle.dim();
    if horizon < d as u64 {
        return Err(Error::Precondition(format!("need at least d = {d} samples, got {horizon}")));
    }
    let actions: Vec<Vec<f64>> = (0..horizon).map(|_| sample_sphere(rng, d)).collect();
    let link = oracle.link().clone();
    if link.is_identity() {
        let mut g = GramObjective::new(d);
        for a in &actions {
            let r = oracle.query(a)?;
            g.push(a, r);
        }
        return Ok(minimize_with_restarts(&g, None, &[], rng, opts, horizon as f64)?.0);
    }
    let mut data = RegressionData::new();
    for a in &actions {
        let r = oracle.query(a)?;
        data.push(a, r);
    }
    sphere_least_squares(&data, &link, None, rng, opts)
}
