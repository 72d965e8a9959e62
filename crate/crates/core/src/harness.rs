//! Experiment configuration, Monte Carlo trials and their summaries.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    offline_residual_max, online_residuals, run_eluder_ucb, run_nonadaptive, run_oracle_learner, estimation_budget,
    OracleKind, OraclePolicy, PackingSet, TieBreak, UcbConfig,
};
use crate::burnin::{run_burnin_with, BurninConfig, BurninResult};
use crate::env::{RewardOracle, RidgeEnvironment};
use crate::error::{Error, Result};
use crate::geometry::{derive_seed, dot, norm, SimRng};
use crate::learning::{run_learning, LearnConfig, LearnMode, SolverOptions};
use crate::linkfn::{LinkDescriptor, LinkFunction, Parity};
use crate::theory::{
    burnin_integral_lb, burnin_integral_ub, lb_crossing_time, lb_epsilon_sequence, schedule_bridge_check, log_log_slope,
    ub_crossing_time, ub_trajectory_ode, write_curves_csv, TrajectoryCurve, DEFAULT_PANELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BurninCost,
    RegretCurve,
    TrajectoryOverlay,
    BaselineHeadtohead,
    TheoryCurves,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreakKind {
    OptimisticSearch,
    AdversarialPacking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    TwoStage,
    EluderUcb { tie_break: TieBreakKind },
    OracleLearner { oracle: OracleKind, policy: OraclePolicy },
    Nonadaptive,
}

/// snake_case name taken from a unit variant's serde form.
fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

impl AlgorithmSpec {
    pub fn label(&self) -> String {
        match self {
            AlgorithmSpec::TwoStage => "two_stage".into(),
            AlgorithmSpec::EluderUcb { tie_break } => format!("eluder_ucb/{}", snake(tie_break)),
            AlgorithmSpec::OracleLearner { oracle, policy } => format!("oracle_learner/{}/{}", snake(oracle), snake(policy)),
            AlgorithmSpec::Nonadaptive => "nonadaptive".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "four")]
    pub kappa: f64,
    #[serde(default)]
    pub cf_lower: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}

impl Default for Constants {
    fn default() -> Self {
        Constants { c: 1.0, kappa: 4.0, cf_lower: None }
    }
}

/// Which rounds count toward a two-stage regret.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretScope {
    /// Burn-in and learning share the horizon T.
    #[default]
    Pipeline,
    /// Learning runs for T rounds after a completed burn-in; only those rounds count.
    AfterBurnin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub link: LinkDescriptor,
    pub d_list: Vec<usize>,
    #[serde(rename = "T")]
    pub horizon: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one_u")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithm")]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Per-trial query cap; unset means no cap.
    #[serde(default)]
    pub max_queries: Option<u64>,
    /// Horizons for regret_curve; defaults to eight log-spaced values up to T.
    #[serde(default)]
    pub t_list: Option<Vec<u64>>,
    #[serde(default = "default_mode")]
    pub learn_mode: LearnMode,
    #[serde(default)]
    pub regret_scope: RegretScope,
    /// Keep one ledger entry in k for long runs. Ignored by trajectory_overlay.
    #[serde(default)]
    pub thinning: Option<u64>,
}

fn default_delta() -> f64 {
    0.1
}
fn one_u() -> usize {
    1
}
fn default_algorithm() -> AlgorithmSpec {
    AlgorithmSpec::TwoStage
}
fn default_output() -> PathBuf {
    PathBuf::from("ridgelab-out")
}
fn default_mode() -> LearnMode {
    LearnMode::Regret
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn link_function(&self) -> Result<LinkFunction> {
        LinkFunction::from_descriptor(&self.link).map_err(|e| Error::config("link", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.link_function()?;
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.d_list.is_empty() {
            return Err(Error::config("d_list", "must not be empty"));
        }
        let min_d = match (self.experiment, self.algorithm) {
            (ExperimentKind::TheoryCurves, _) => 2,
            (_, AlgorithmSpec::TwoStage) => 16,
            _ => 2,
        };
        if let Some(&d) = self.d_list.iter().find(|&&d| d < min_d) {
            return Err(Error::config("d_list", format!("dimension {d} is below the minimum {min_d}")));
        }
        if self.horizon == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::config("delta", format!("must lie in (0, 0.5), got {}", self.delta)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be finite and nonnegative, got {}", self.sigma)));
        }
        if !(self.constants.c > 0.0 && self.constants.c.is_finite()) {
            return Err(Error::config("constants.c", "must be positive"));
        }
        if !(self.constants.kappa > 0.0 && self.constants.kappa.is_finite()) {
            return Err(Error::config("constants.kappa", "must be positive"));
        }
        if let Some(cf) = self.constants.cf_lower {
            if !(cf > 0.0 && cf.is_finite()) {
                return Err(Error::config("constants.cf_lower", "must be positive"));
            }
        }
        if self.max_queries == Some(0) {
            return Err(Error::config("max_queries", "must be at least 1"));
        }
        if self.thinning == Some(0) {
            return Err(Error::config("thinning", "must be at least 1"));
        }
        if let Some(ts) = &self.t_list {
            if ts.is_empty() || ts.contains(&0) {
                return Err(Error::config("t_list", "needs at least one positive horizon"));
            }
        }
        if self.experiment == ExperimentKind::BurninCost && self.algorithm != AlgorithmSpec::TwoStage {
            return Err(Error::config("algorithm", "burnin_cost needs two_stage"));
        }
        if self.algorithm == AlgorithmSpec::Nonadaptive {
            if let Some(&d) = self.d_list.iter().find(|&&d| self.horizon < d as u64) {
                return Err(Error::config("T", format!("nonadaptive needs T >= d = {d}")));
            }
        }
        if self.experiment == ExperimentKind::TheoryCurves {
            let lo = (self.constants.c / *self.d_list.iter().min().unwrap() as f64).sqrt();
            if lo > 0.5 {
                return Err(Error::config("d_list", "sqrt(c/d) must not exceed 1/2"));
            }
        }
        Ok(())
    }

    fn horizons(&self) -> Vec<u64> {
        if self.experiment != ExperimentKind::RegretCurve {
            return vec![self.horizon];
        }
        match &self.t_list {
            Some(ts) => ts.clone(),
            None => {
                let lo = (self.horizon as f64 / 1000.0).max(1.0);
                let mut ts: Vec<u64> = (0..8)
                    .map(|k| (lo * (self.horizon as f64 / lo).powf(k as f64 / 7.0)).round() as u64)
                    .collect();
                ts.dedup();
                ts
            }
        }
    }
}

/// One row of records.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub seed: u64,
    pub d: usize,
    pub algorithm: String,
    pub queries: u64,
    pub success: bool,
    pub final_inner_product: f64,
    pub max_inner_product: f64,
    pub cum_regret: f64,
    pub wall_time_ms: f64,
    pub horizon: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochProgress {
    pub epoch: usize,
    pub loops: u64,
    pub queries: u64,
    pub inner_product_of_partial_sum: f64,
}

/// Everything a trial produces beyond its CSV row.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub ledger_queries: u64,
    pub burnin_queries: Option<u64>,
    /// Whether burn-in finished all its epochs.
    pub burnin_completed: Option<bool>,
    pub learning_regret: Option<f64>,
    pub residual_ok: Option<bool>,
    pub progress: Vec<EpochProgress>,
    pub measured: Option<TrajectoryCurve>,
}

fn aligned(parity: Parity, x: f64) -> f64 {
    match parity {
        Parity::Even => x.abs(),
        Parity::MonotoneOddLike => x,
    }
}

fn burnin_progress(res: &BurninResult, theta: &[f64]) -> Vec<EpochProgress> {
    res.epochs
        .iter()
        .map(|e| {
            let s = res.partial_sum(e.epoch);
            let n = norm(&s);
            EpochProgress {
                epoch: e.epoch,
                loops: e.loops,
                queries: e.queries,
                inner_product_of_partial_sum: if n > 0.0 { dot(&s, theta) / n } else { 0.0 },
            }
        })
        .collect()
}

/// Seed of trial `trial` at dimension `d`.
pub fn trial_seed(base: u64, d: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(base, d as u64), trial as u64)
}

/// Runs one trial on a fresh environment.
pub fn run_trial(cfg: &ExperimentConfig, d: usize, horizon: u64, trial: usize, trial_id: u64) -> Result<TrialOutcome> {
    let started = Instant::now();
    let link = cfg.link_function()?;
    let seed = trial_seed(cfg.seed, d, trial);
    let mut env = RidgeEnvironment::spawn(d, link.clone(), cfg.sigma, SimRng::derive(seed, 0), None)?;
    let mut rng = SimRng::derive(seed, 1);
    let keep_ledger = cfg.experiment == ExperimentKind::TrajectoryOverlay;
    if let (Some(k), false) = (cfg.thinning, keep_ledger) {
        env.set_thinning(k);
    }
    let theta = env.theta_star().to_vec();
    let parity = link.parity();
    let mut out = TrialOutcome {
        record: TrialRecord {
            trial_id,
            seed,
            d,
            algorithm: cfg.algorithm.label(),
            queries: 0,
            success: false,
            final_inner_product: 0.0,
            max_inner_product: 0.0,
            cum_regret: 0.0,
            wall_time_ms: 0.0,
            horizon,
        },
        ledger_queries: 0,
        burnin_queries: None,
        burnin_completed: None,
        learning_regret: None,
        residual_ok: None,
        progress: Vec::new(),
        measured: None,
    };

    match cfg.algorithm {
        AlgorithmSpec::TwoStage => {
            let burnin_only = cfg.experiment == ExperimentKind::BurninCost;
            let cap = match (burnin_only, cfg.regret_scope) {
                (false, RegretScope::Pipeline) => Some(cfg.max_queries.map_or(horizon, |m| m.min(horizon))),
                _ => cfg.max_queries,
            };
            let bcfg = BurninConfig { delta: cfg.delta, budget: cap, window_constant: None };
            let res = run_burnin_with(&mut env, &mut rng, &bcfg)?;
            out.burnin_queries = Some(res.queries_used);
            out.burnin_completed = Some(!res.failed());
            out.progress = burnin_progress(&res, &theta);
            let mut queries = res.queries_used;
            let mut final_ip = dot(&theta, &res.a0);
            let mut success = !res.failed() && aligned(parity, final_ip) >= 0.5;
            if !burnin_only {
                let learn_horizon = match cfg.regret_scope {
                    RegretScope::Pipeline => horizon.saturating_sub(res.queries_used),
                    RegretScope::AfterBurnin => horizon,
                };
                let regret_before = env.ledger().cumulative_regret();
                if learn_horizon > 0 {
                    if res.failed() {
                        // keep playing the partial burn-in direction
                        if cfg.regret_scope == RegretScope::Pipeline {
                            env.query_batch(&res.a0, learn_horizon)?;
                            queries += learn_horizon;
                        }
                        success = false;
                    } else {
                        let mut lcfg = LearnConfig::new(cfg.learn_mode);
                        lcfg.cf_lower = cfg.constants.cf_lower;
                        let outcome = run_learning(&mut env, &mut rng, &res.a0, learn_horizon, &lcfg)?;
                        queries += outcome.total_queries;
                        final_ip = dot(&theta, &outcome.theta_hat);
                        success = aligned(parity, final_ip) >= 0.5;
                    }
                }
                out.learning_regret = Some(env.ledger().cumulative_regret() - regret_before);
            }
            out.record.queries = queries;
            out.record.final_inner_product = final_ip;
            out.record.success = success;
        }
        AlgorithmSpec::EluderUcb { tie_break } => {
            let tb = match tie_break {
                TieBreakKind::OptimisticSearch => TieBreak::OptimisticSearch,
                TieBreakKind::AdversarialPacking => {
                    let mut prng = SimRng::derive(seed, 2);
                    TieBreak::AdversarialPacking(PackingSet::build(&mut prng, &theta, horizon as usize, 16.0)?)
                }
            };
            let ucfg = UcbConfig {
                kappa: cfg.constants.kappa,
                refit_interval: if link.is_identity() { 1 } else { d as u64 },
                ..UcbConfig::default()
            };
            let mut last = vec![0.0; d];
            let summary = run_eluder_ucb(&mut env, &mut rng, horizon, tb, ucfg, |a| {
                last.copy_from_slice(a);
                false
            })?;
            out.record.queries = summary.steps;
            out.record.final_inner_product = dot(&theta, &last);
            out.record.success = aligned(parity, max_ip(&env, parity)) >= 0.5;
        }
        AlgorithmSpec::OracleLearner { oracle, policy } => {
            let mut orng = SimRng::derive(seed, 2);
            let trace = run_oracle_learner(&mut env, oracle, policy, horizon, &mut rng, &mut orng)?;
            let budget = estimation_budget(cfg.constants.kappa, d, horizon);
            out.residual_ok = Some(match oracle {
                OracleKind::Zero => online_residuals(&link, &theta, &trace).last().copied().unwrap_or(0.0) <= budget,
                _ => offline_residual_max(&link, &theta, &trace) <= budget,
            });
            out.record.queries = trace.actions.len() as u64;
            out.record.final_inner_product = trace.actions.last().map_or(0.0, |a| dot(&theta, a));
            out.record.success = aligned(parity, max_ip(&env, parity)) >= 0.5;
        }
        AlgorithmSpec::Nonadaptive => {
            let est = run_nonadaptive(&mut env, &mut rng, horizon, &SolverOptions::default())?;
            out.record.queries = horizon;
            out.record.final_inner_product = dot(&theta, &est);
            out.record.success = aligned(parity, out.record.final_inner_product) >= 0.5;
        }
    }

    out.ledger_queries = env.ledger().queries();
    out.record.max_inner_product = max_ip(&env, parity);
    out.record.cum_regret = env.ledger().cumulative_regret();
    if keep_ledger {
        out.measured = Some(TrajectoryCurve::measured(env.ledger(), &link, d));
    }
    out.record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

fn max_ip(env: &RidgeEnvironment, parity: Parity) -> f64 {
    let l = env.ledger();
    if l.queries() == 0 {
        return 0.0;
    }
    match parity {
        Parity::Even => l.max_abs_inner_product(),
        Parity::MonotoneOddLike => l.max_inner_product(),
    }
}

/// Worker count: RIDGELAB_THREADS if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("RIDGELAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (d, horizon, trial) task on a pool of `threads` workers and
/// returns the outcomes ordered by trial_id.
pub fn run_trials(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<TrialOutcome>> {
    let mut tasks = Vec::new();
    for &d in &cfg.d_list {
        for h in cfg.horizons() {
            for trial in 0..cfg.trials {
                tasks.push((d, h, trial, tasks.len() as u64));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    let mut outcomes: Vec<TrialOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(d, h, trial, id)| run_trial(cfg, d, h, trial, id))
            .collect::<Result<Vec<_>>>()
    })?;
    outcomes.sort_by_key(|o| o.record.trial_id);
    for o in &outcomes {
        if o.record.queries != o.ledger_queries {
            return Err(Error::Precondition(format!(
                "trial {} reported {} queries but its ledger holds {}",
                o.record.trial_id, o.record.queries, o.ledger_queries
            )));
        }
    }
    Ok(outcomes)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    [(center - half).max(0.0), (center + half).min(1.0)]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub median: f64,
    pub ci: [f64; 2],
    pub successes: usize,
    pub total: usize,
    /// Success rate below 60%.
    pub flagged: bool,
}

/// Median queries over successful records with a bootstrap 90% interval.
pub fn estimate_burnin_cost(records: &[TrialRecord], seed: u64) -> Result<CostEstimate> {
    let costs: Vec<f64> = records.iter().filter(|r| r.success).map(|r| r.queries as f64).collect();
    if costs.len() < 5 {
        return Err(Error::InsufficientSuccess { successes: costs.len(), total: records.len() });
    }
    let mut rng = SimRng::new(seed);
    let n = costs.len();
    let mut medians: Vec<f64> = (0..2000)
        .map(|_| {
            let sample: Vec<f64> = (0..n).map(|_| costs[(rng.uniform() * n as f64) as usize % n]).collect();
            median(&sample)
        })
        .collect();
    medians.sort_by(f64::total_cmp);
    let pick = |q: f64| medians[((q * (medians.len() - 1) as f64).round()) as usize];
    Ok(CostEstimate {
        median: median(&costs),
        ci: [pick(0.05), pick(0.95)],
        successes: n,
        total: records.len(),
        flagged: (n as f64) < 0.6 * records.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Plateau height B of min(T, B + c sqrt(T)); the first knee.
    pub knee1: f64,
    /// (B/c)^2, where c sqrt(T) overtakes the plateau.
    pub knee2: f64,
    pub c: f64,
    pub single_phase: bool,
    pub loss: f64,
}

fn phase_loss(points: &[(f64, f64)], b: f64, c: f64) -> f64 {
    points.iter().map(|&(t, r)| (r.ln() - t.min(b + c * t.sqrt()).ln()).powi(2)).sum()
}

/// Fits min(T, B + c sqrt(T)) to a regret curve by least squares on log regret.
pub fn regret_phase_report(points: &[(f64, f64)]) -> Result<PhaseReport> {
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|&(t, r)| t > 0.0 && r > 0.0).collect();
    if pts.len() < 4 {
        return Err(Error::FitDegenerate(format!("need 4 positive points, have {}", pts.len())));
    }
    let t_min = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let t_max = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let scale = median(&pts.iter().map(|&(t, r)| r / t.sqrt()).collect::<Vec<_>>());
    let (lb_lo, lb_hi) = ((t_min / 100.0).ln(), (t_max * 100.0).ln());
    let (lc_lo, lc_hi) = ((scale * 1e-4).ln(), (scale * 1e4).ln());
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let n = 160;
    for i in 0..=n {
        let lb = lb_lo + (lb_hi - lb_lo) * i as f64 / n as f64;
        for j in 0..=n {
            let lc = lc_lo + (lc_hi - lc_lo) * j as f64 / n as f64;
            let l = phase_loss(&pts, lb.exp(), lc.exp());
            if l < best.0 {
                best = (l, lb, lc);
            }
        }
    }
    // shrinking pattern search around the grid optimum
    let mut step = ((lb_hi - lb_lo) / n as f64, (lc_hi - lc_lo) / n as f64);
    for _ in 0..200 {
        let mut improved = false;
        for (db, dc) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
            let lb = best.1 + db * step.0;
            let lc = best.2 + dc * step.1;
            let l = phase_loss(&pts, lb.exp(), lc.exp());
            if l < best.0 {
                best = (l, lb, lc);
                improved = true;
            }
        }
        if !improved {
            step = (step.0 * 0.5, step.1 * 0.5);
        }
    }
    let (b, c) = (best.1.exp(), best.2.exp());
    let single_phase = pts.iter().all(|&(t, _)| t <= b + c * t.sqrt()) || b >= t_max;
    Ok(PhaseReport { knee1: b, knee2: (b / c).powi(2), c, single_phase, loss: best.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub d: usize,
    pub horizon: u64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub success_ci: [f64; 2],
    pub mean_queries: f64,
    pub median_queries: f64,
    pub mean_final_inner_product: f64,
    pub mean_max_inner_product: f64,
    pub mean_cum_regret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub d: usize,
    pub estimate: Option<CostEstimate>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub d: usize,
    pub report: Option<PhaseReport>,
    pub error: Option<String>,
}

/// The part of summary.json that is a pure function of records.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub groups: Vec<GroupSummary>,
    pub burnin_cost: Vec<CostPoint>,
    pub fitted_slope: Option<f64>,
    pub regret_phases: Vec<RegretPoint>,
}

pub fn summarize_records(experiment: ExperimentKind, records: &[TrialRecord], seed: u64) -> RecordSummary {
    let mut keys: Vec<(usize, u64)> = records.iter().map(|r| (r.d, r.horizon)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let groups: Vec<GroupSummary> = keys
        .iter()
        .map(|&(d, h)| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.d == d && r.horizon == h).collect();
            let successes = rs.iter().filter(|r| r.success).count();
            let q: Vec<f64> = rs.iter().map(|r| r.queries as f64).collect();
            GroupSummary {
                d,
                horizon: h,
                trials: rs.len(),
                successes,
                success_rate: successes as f64 / rs.len() as f64,
                success_ci: wilson_interval(successes, rs.len(), 1.959_963_984_540_054),
                mean_queries: mean(&q),
                median_queries: median(&q),
                mean_final_inner_product: mean(&rs.iter().map(|r| r.final_inner_product).collect::<Vec<_>>()),
                mean_max_inner_product: mean(&rs.iter().map(|r| r.max_inner_product).collect::<Vec<_>>()),
                mean_cum_regret: mean(&rs.iter().map(|r| r.cum_regret).collect::<Vec<_>>()),
            }
        })
        .collect();
    let mut ds: Vec<usize> = keys.iter().map(|k| k.0).collect();
    ds.dedup();

    let mut burnin_cost = Vec::new();
    let mut fitted_slope = None;
    if experiment == ExperimentKind::BurninCost {
        for &d in &ds {
            let rs: Vec<TrialRecord> = records.iter().filter(|r| r.d == d).cloned().collect();
            match estimate_burnin_cost(&rs, derive_seed(seed, d as u64)) {
                Ok(e) => burnin_cost.push(CostPoint { d, estimate: Some(e), error: None }),
                Err(e) => burnin_cost.push(CostPoint { d, estimate: None, error: Some(e.to_string()) }),
            }
        }
        let fit: Vec<(f64, f64)> = burnin_cost
            .iter()
            .filter_map(|p| p.estimate.as_ref().map(|e| (p.d as f64, e.median)))
            .collect();
        if fit.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = fit.into_iter().unzip();
            fitted_slope = Some(log_log_slope(&x, &y));
        }
    }

    let mut regret_phases = Vec::new();
    if experiment == ExperimentKind::RegretCurve {
        for &d in &ds {
            let pts: Vec<(f64, f64)> = groups.iter().filter(|g| g.d == d).map(|g| (g.horizon as f64, g.mean_cum_regret)).collect();
            match regret_phase_report(&pts) {
                Ok(r) => regret_phases.push(RegretPoint { d, report: Some(r), error: None }),
                Err(e) => regret_phases.push(RegretPoint { d, report: None, error: Some(e.to_string()) }),
            }
        }
    }
    RecordSummary { groups, burnin_cost, fitted_slope, regret_phases }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub d: usize,
    pub lb_crossing_half: f64,
    pub ub_crossing_half: f64,
    pub integral_ub: Option<f64>,
    pub integral_lb: Option<f64>,
    pub bridge_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// (d, horizon, mean regret after burn-in) for two-stage runs.
    pub learning_regret: Vec<(usize, u64, f64)>,
    /// Fraction of oracle-learner trials whose residual stayed within Est.
    pub residual_ok_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub algorithm: String,
    pub link: LinkDescriptor,
    pub note: String,
    #[serde(flatten)]
    pub records: RecordSummary,
    pub diagnostics: Diagnostics,
    pub theory: Vec<TheoryPoint>,
}

pub struct ExperimentReport {
    pub outcomes: Vec<TrialOutcome>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn records(&self) -> Vec<TrialRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

pub fn write_records_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn write_progress_csv(path: &Path, rows: &[EpochProgress]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BaselineRow<'a> {
    algorithm: &'a str,
    d: usize,
    #[serde(rename = "T")]
    horizon: u64,
    seed: u64,
    max_inner_product: f64,
    final_inner_product: f64,
    cum_regret: f64,
    queries: u64,
}

fn theory_curves(cfg: &ExperimentConfig, link: &LinkFunction, d: usize) -> Result<Vec<TrajectoryCurve>> {
    let c = cfg.constants.c;
    let t_max = cfg.horizon;
    let lb = lb_epsilon_sequence(link, d, c, cfg.delta, t_max)?;
    let x0 = (c / d as f64).sqrt();
    let mut curves = vec![lb];
    if x0 < 1.0 {
        curves.push(ub_trajectory_ode(link, d, x0, t_max)?);
    }
    Ok(curves)
}

fn theory_point(cfg: &ExperimentConfig, link: &LinkFunction, d: usize) -> TheoryPoint {
    let c = cfg.constants.c;
    let x0 = (c / d as f64).sqrt();
    let log_t = (cfg.horizon as f64).ln();
    TheoryPoint {
        d,
        lb_crossing_half: lb_crossing_time(link, d, c, cfg.delta, 0.5).unwrap_or(f64::NAN),
        ub_crossing_half: if x0 < 0.5 { ub_crossing_time(link, d, x0, 0.5).unwrap_or(f64::NAN) } else { 0.0 },
        integral_ub: burnin_integral_ub(link, d, 0.5, c, DEFAULT_PANELS).ok(),
        integral_lb: burnin_integral_lb(link, d, 0.5, log_t, c, DEFAULT_PANELS).ok(),
        bridge_ratio: if d >= 16 { schedule_bridge_check(link, d).ok().map(|r| r.ratio) } else { None },
    }
}

/// Validates the config, runs all trials and writes records.csv, summary.json and curves.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_threads(cfg, worker_count())
}

pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let link = cfg.link_function()?;
    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir.join("curves"))?;

    let outcomes = if cfg.experiment == ExperimentKind::TheoryCurves { Vec::new() } else { run_trials(cfg, threads)? };
    let records: Vec<TrialRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    write_records_csv(&out_dir.join("records.csv"), &records)?;

    let mut theory = Vec::new();
    match cfg.experiment {
        ExperimentKind::TheoryCurves => {
            for &d in &cfg.d_list {
                write_curves_csv(&out_dir.join("curves").join(format!("theory_d{d}.csv")), &theory_curves(cfg, &link, d)?)?;
                theory.push(theory_point(cfg, &link, d));
            }
        }
        ExperimentKind::TrajectoryOverlay => {
            for o in &outcomes {
                let mut curves = theory_curves(cfg, &link, o.record.d)?;
                if let Some(m) = &o.measured {
                    curves.insert(0, m.clone());
                }
                let name = format!("trajectory_d{}_trial{}.csv", o.record.d, o.record.trial_id);
                write_curves_csv(&out_dir.join("curves").join(name), &curves)?;
            }
        }
        ExperimentKind::BurninCost => {
            std::fs::create_dir_all(out_dir.join("progress"))?;
            for &d in &cfg.d_list {
                if let Some(o) = outcomes.iter().find(|o| o.record.d == d) {
                    write_progress_csv(&out_dir.join("progress").join(format!("burnin_d{d}.csv")), &o.progress)?;
                }
            }
        }
        ExperimentKind::BaselineHeadtohead => {
            let mut w = csv::Writer::from_path(out_dir.join("baselines.csv"))?;
            for r in &records {
                w.serialize(BaselineRow {
                    algorithm: &r.algorithm,
                    d: r.d,
                    horizon: r.horizon,
                    seed: r.seed,
                    max_inner_product: r.max_inner_product,
                    final_inner_product: r.final_inner_product,
                    cum_regret: r.cum_regret,
                    queries: r.queries,
                })?;
            }
            w.flush()?;
        }
        ExperimentKind::RegretCurve => {}
    }

    let mut learning_regret = Vec::new();
    let mut keys: Vec<(usize, u64)> = outcomes.iter().map(|o| (o.record.d, o.record.horizon)).collect();
    keys.sort_unstable();
    keys.dedup();
    for (d, h) in keys {
        let v: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.record.d == d && o.record.horizon == h)
            .filter_map(|o| o.learning_regret)
            .collect();
        if !v.is_empty() {
            learning_regret.push((d, h, v.iter().sum::<f64>() / v.len() as f64));
        }
    }
    let checks: Vec<bool> = outcomes.iter().filter_map(|o| o.residual_ok).collect();
    let residual_ok_rate = (!checks.is_empty()).then(|| checks.iter().filter(|&&b| b).count() as f64 / checks.len() as f64);

    let summary = Summary {
        experiment: cfg.experiment,
        algorithm: cfg.algorithm.label(),
        link: cfg.link.clone(),
        note: "theory curves and integrals are stated up to absolute constants".into(),
        records: summarize_records(cfg.experiment, &records, cfg.seed),
        diagnostics: Diagnostics { learning_regret, residual_ok_rate },
        theory,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentReport { outcomes, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(queries: u64, success: bool) -> TrialRecord {
        TrialRecord {
            trial_id: 0,
            seed: 0,
            d: 16,
            algorithm: "two_stage".into(),
            queries,
            success,
            final_inner_product: 0.0,
            max_inner_product: 0.0,
            cum_regret: 0.0,
            wall_time_ms: 0.0,
            horizon: 1,
        }
    }

    #[test]
    fn median_of_synthetic_costs() {
        let rs: Vec<TrialRecord> = [10, 20, 30, 40, 50].iter().map(|&q| record(q, true)).collect();
        assert_eq!(estimate_burnin_cost(&rs, 1).unwrap().median, 30.0);
    }

    #[test]
    fn identical_costs_have_zero_width() {
        let rs: Vec<TrialRecord> = (0..7).map(|_| record(123, true)).collect();
        let e = estimate_burnin_cost(&rs, 1).unwrap();
        assert_eq!(e.ci, [123.0, 123.0]);
        assert!(!e.flagged);
    }

    #[test]
    fn too_few_successes_is_an_error() {
        let mut rs: Vec<TrialRecord> = (0..4).map(|_| record(5, true)).collect();
        rs.push(record(5, false));
        assert!(matches!(estimate_burnin_cost(&rs, 1), Err(Error::InsufficientSuccess { successes: 4, total: 5 })));
        let mut rs: Vec<TrialRecord> = (0..5).map(|_| record(5, true)).collect();
        rs.extend((0..5).map(|_| record(5, false)));
        assert!(estimate_burnin_cost(&rs, 1).unwrap().flagged);
    }

    #[test]
    fn synthetic_two_phase_curve() {
        let pts: Vec<(f64, f64)> = (0..25)
            .map(|k| {
                let t = 10f64.powf(1.0 + 5.0 * k as f64 / 24.0);
                (t, t.min(100.0 + 3.0 * t.sqrt()))
            })
            .collect();
        let r = regret_phase_report(&pts).unwrap();
        assert!(!r.single_phase);
        assert!((80.0..=125.0).contains(&r.knee1), "{r:?}");
        assert!((r.c - 3.0).abs() < 0.3, "{r:?}");
    }

    #[test]
    fn linear_curve_is_single_phase() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (10f64.powi(k + 1), 10f64.powi(k + 1))).collect();
        assert!(regret_phase_report(&pts).unwrap().single_phase);
        assert!(regret_phase_report(&pts[..3]).is_err());
    }

    #[test]
    fn wilson_is_inside_unit_interval() {
        let [lo, hi] = wilson_interval(400, 400, 2.576);
        assert!(lo > 0.98 && hi == 1.0);
        let [lo, hi] = wilson_interval(0, 10, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi < 0.35);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let text = r#"{"experiment":"burnin_cost","link":{"kind":"cubic"},"d_list":[256],"T":1000,"trials":3,"seed":7}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.horizon, 1000);
        assert_eq!(cfg.algorithm, AlgorithmSpec::TwoStage);
        assert_eq!(cfg.constants.kappa, 4.0);
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.trials = 0;
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "trials"));
        let mut bad = cfg.clone();
        bad.d_list.clear();
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "d_list"));
        let mut bad = cfg.clone();
        bad.delta = 0.7;
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "delta"));
        let mut bad = cfg;
        bad.algorithm = AlgorithmSpec::Nonadaptive;
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment":"burnin_cost","link":{"kind":"cubic"},"d_list":[256],"T":10,"typo":1}"#).is_err());
    }

    #[test]
    fn algorithm_labels() {
        let a = AlgorithmSpec::OracleLearner { oracle: OracleKind::RandomOffline, policy: OraclePolicy::PlayEstimate };
        assert_eq!(a.label(), "oracle_learner/random_offline/play_estimate");
        assert_eq!(AlgorithmSpec::EluderUcb { tie_break: TieBreakKind::AdversarialPacking }.label(), "eluder_ucb/adversarial_packing");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"kind":"oracle_learner","oracle":"random_offline","policy":"play_estimate"}"#);
    }

    #[test]
    fn default_regret_horizons_are_log_spaced() {
        let text = r#"{"experiment":"regret_curve","link":{"kind":"cubic"},"d_list":[16],"T":1000000}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let hs = cfg.horizons();
        assert_eq!(hs.first(), Some(&1000));
        assert_eq!(hs.last(), Some(&1_000_000));
        assert_eq!(hs.len(), 8);
    }
}
