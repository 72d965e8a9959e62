//! Burn-in: search for an action with constant correlation by certifying one
//! direction at a time.

use crate::env::RewardOracle;
use crate::error::{Error, Result};
use crate::geometry::{combine_scaled, dot, sample_complement, window_constant, DirectionBasis, SimRng};
use crate::linkfn::{epoch_count, gaht_epsilon, iaht_epsilon, LinkFunction, Parity};

const BISECT_ITERS: usize = 80;
const X_GRID: usize = 256;
const X_REFINE: usize = 65;

#[derive(Clone, Debug, PartialEq)]
pub struct HypTestVerdict {
    pub accepted: bool,
    pub queries_used: u64,
    /// `(z, x)` solving the anchored feasibility problem; only set by the anchored test.
    pub witness: Option<(f64, f64)>,
}

fn sample_count(eps: f64, delta: f64, k: f64) -> u64 {
    (2.0 * (k / delta).ln() / (eps * eps)).ceil() as u64
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.5 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("delta = {delta} must lie in (0, 1/2)")))
    }
}

/// Smallest point of [lo, hi] where the nondecreasing `g` reaches `target`.
fn first_at_least(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, target: f64) -> Option<f64> {
    if g(lo) >= target {
        return Some(lo);
    }
    if g(hi) < target {
        return None;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (a + b);
        if g(mid) >= target {
            b = mid;
        } else {
            a = mid;
        }
    }
    Some(b)
}

/// Largest point of [lo, hi] where the nondecreasing `g` is still at most `target`.
fn last_at_most(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, target: f64) -> Option<f64> {
    if g(hi) <= target {
        return Some(hi);
    }
    if g(lo) > target {
        return None;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (a + b);
        if g(mid) <= target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(a)
}

/// Some x in [lo, hi] with g(x) in [t_lo, t_hi], for nondecreasing g.
fn monotone_hit(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, t_lo: f64, t_hi: f64) -> Option<f64> {
    let x = first_at_least(g, lo, hi, t_lo)?;
    (g(x) <= t_hi).then_some(x)
}

/// The z-interval of [z_lo, z_hi] on which g(z) stays inside [t_lo, t_hi].
fn band(g: &impl Fn(f64) -> f64, z_lo: f64, z_hi: f64, t_lo: f64, t_hi: f64) -> Option<(f64, f64)> {
    let a = first_at_least(g, z_lo, z_hi, t_lo)?;
    let b = last_at_most(g, z_lo, z_hi, t_hi)?;
    Some((a, b))
}

/// Grid over `t` in [lo, hi]; `probe(t)` returns a witness or a gap to shrink.
/// The grid is refined once around the smallest gap.
fn grid_search(lo: f64, hi: f64, probe: impl Fn(f64) -> std::result::Result<(f64, f64), f64>) -> Option<(f64, f64)> {
    let scan = |a: f64, b: f64, n: usize| -> std::result::Result<(f64, f64), f64> {
        let mut best = (a, f64::INFINITY);
        for k in 0..n {
            let t = if n == 1 || b <= a { a } else { a + (b - a) * k as f64 / (n - 1) as f64 };
            match probe(t) {
                Ok(w) => return Ok(w),
                Err(gap) if gap < best.1 => best = (t, gap),
                Err(_) => {}
            }
        }
        Err(best.0)
    };
    match scan(lo, hi, X_GRID) {
        Ok(w) => Some(w),
        Err(t) => {
            let step = (hi - lo) / (X_GRID - 1) as f64;
            scan((t - step).max(lo), (t + step).min(hi), X_REFINE).ok()
        }
    }
}

/// Intersects two intervals; a witness inside is checked with `ok`.
fn meet(a: Option<(f64, f64)>, b: Option<(f64, f64)>, ok: impl Fn(f64) -> bool) -> std::result::Result<f64, f64> {
    match (a, b) {
        (Some(a), Some(b)) => {
            let (lo, hi) = (a.0.max(b.0), a.1.min(b.1));
            if lo <= hi {
                if let Some(t) = [0.5 * (lo + hi), lo, hi].into_iter().find(|&t| ok(t)) {
                    return Ok(t);
                }
            }
            Err(lo - hi)
        }
        _ => Err(f64::INFINITY),
    }
}

/// Checks whether some z in [z_lo, z_hi] and x in [x_lo, x_hi] satisfy
/// |r_minus - f(z - x)| <= eps and |r_plus - f(z + x)| <= eps.
/// Returns the witness `(z, x)` if one is found.
///
/// For fixed x each condition holds on an interval of z (f is monotone), and
/// for fixed z each holds on an interval of x, so the search scans x and
/// intersects z-intervals, then scans z and intersects x-intervals. Thin
/// feasible strips along either axis are found this way.
pub fn anchored_feasibility(
    f: &LinkFunction,
    r_minus: f64,
    r_plus: f64,
    eps: f64,
    (z_lo, z_hi): (f64, f64),
    (x_lo, x_hi): (f64, f64),
) -> Option<(f64, f64)> {
    let ok = |z: f64, x: f64| (r_minus - f.value(z - x)).abs() <= eps && (r_plus - f.value(z + x)).abs() <= eps;
    let by_x = grid_search(x_lo, x_hi, |x| {
        let gm = |z: f64| f.value(z - x);
        let gp = |z: f64| f.value(z + x);
        meet(
            band(&gm, z_lo, z_hi, r_minus - eps, r_minus + eps),
            band(&gp, z_lo, z_hi, r_plus - eps, r_plus + eps),
            |z| ok(z, x),
        )
        .map(|z| (z, x))
    });
    if by_x.is_some() {
        return by_x;
    }
    grid_search(z_lo, z_hi, |z| {
        // f(z - x) decreases in x; negate it to reuse the nondecreasing search
        let gm = |x: f64| -f.value(z - x);
        let gp = |x: f64| f.value(z + x);
        meet(
            band(&gm, x_lo, x_hi, -(r_minus + eps), -(r_minus - eps)),
            band(&gp, x_lo, x_hi, r_plus - eps, r_plus + eps),
            |x| ok(z, x),
        )
        .map(|x| (z, x))
    })
}

/// Single-direction test with a precomputed tolerance.
pub fn initial_action_hyp_test_with<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    v: &[f64],
    delta: f64,
    eps: f64,
) -> Result<HypTestVerdict> {
    let s = (oracle.dim() as f64).sqrt();
    let n = sample_count(eps, delta, 2.0);
    let mean = oracle.query_batch(v, n)?;
    let f = oracle.link();
    let g = |x: f64| f.value(x);
    let accepted = monotone_hit(&g, 2.2 / s, 2.8 / s, mean - eps, mean + eps).is_some();
    Ok(HypTestVerdict { accepted, queries_used: n, witness: None })
}

/// Accepts when the mean reward at `v` is consistent with an inner product in [2.2, 2.8]/sqrt(d).
pub fn initial_action_hyp_test<O: RewardOracle + ?Sized>(oracle: &mut O, v: &[f64], delta: f64) -> Result<HypTestVerdict> {
    check_delta(delta)?;
    let eps = iaht_epsilon(oracle.link(), oracle.dim())?;
    initial_action_hyp_test_with(oracle, v, delta, eps)
}

/// Anchored test with a precomputed `(epsilon, y_star)`.
pub fn good_action_hyp_test_with<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    v: &[f64],
    delta: f64,
    v_pre: &[f64],
    x_pre: f64,
    (eps, y_star): (f64, f64),
) -> Result<HypTestVerdict> {
    let c = dot(v, v_pre);
    if c.abs() > 1e-9 {
        return Err(Error::Precondition(format!("v is not orthogonal to v_pre: <v, v_pre> = {c}")));
    }
    let lambda = (2f64.sqrt() * y_star / x_pre).clamp(0.0, 1.0);
    let h = 0.5f64.sqrt();
    let a_minus = combine_scaled(v_pre, v, lambda * h, -h)?;
    let a_plus = combine_scaled(v_pre, v, lambda * h, h)?;
    let n = sample_count(eps, delta, 4.0);
    let r_minus = oracle.query_batch(&a_minus, n)?;
    let r_plus = oracle.query_batch(&a_plus, n)?;
    let s2 = (2.0 * oracle.dim() as f64).sqrt();
    let witness = anchored_feasibility(
        oracle.link(),
        r_minus,
        r_plus,
        eps,
        (y_star, 1.5 * y_star),
        (2.2 / s2, 2.8 / s2),
    );
    Ok(HypTestVerdict { accepted: witness.is_some(), queries_used: 2 * n, witness })
}

/// Tests `v` along a certified anchor `v_pre` with correlation about `x_pre`.
pub fn good_action_hyp_test<O: RewardOracle + ?Sized>(
    oracle: &mut O,
    v: &[f64],
    delta: f64,
    v_pre: &[f64],
    x_pre: f64,
) -> Result<HypTestVerdict> {
    check_delta(delta)?;
    let params = gaht_epsilon(oracle.link(), oracle.dim(), x_pre)?;
    good_action_hyp_test_with(oracle, v, delta, v_pre, x_pre, params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BurninFailure {
    BudgetExhausted { epoch: usize },
    LoopCap { epoch: usize, loops: u64 },
}

impl std::fmt::Display for BurninFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BurninFailure::BudgetExhausted { epoch } => write!(f, "query budget exhausted in epoch {epoch}"),
            BurninFailure::LoopCap { epoch, loops } => write!(f, "epoch {epoch} hit the loop cap after {loops} draws"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loops: u64,
    /// Queries spent since the start of burn-in, at the end of this epoch.
    pub queries: u64,
}

#[derive(Clone, Debug)]
pub struct BurninResult {
    pub a0: Vec<f64>,
    pub epochs_completed: usize,
    pub queries_used: u64,
    pub accepted_directions: DirectionBasis,
    pub per_epoch_loops: Vec<u64>,
    pub failure: Option<BurninFailure>,
    pub epochs: Vec<EpochRecord>,
}

impl BurninResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// (1/sqrt(k)) times the sum of the first k accepted directions.
    pub fn partial_sum(&self, k: usize) -> Vec<f64> {
        let vs = self.accepted_directions.vectors();
        let d = self.accepted_directions.dim();
        let mut s = vec![0.0; d];
        for v in &vs[..k] {
            s.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        if k > 0 {
            let r = (k as f64).sqrt();
            s.iter_mut().for_each(|a| *a /= r);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BurninConfig {
    pub delta: f64,
    pub budget: Option<u64>,
    /// Overrides the measured window probability used for L and the loop cap.
    pub window_constant: Option<f64>,
}

impl BurninConfig {
    pub fn new(delta: f64) -> Self {
        BurninConfig { delta, budget: None, window_constant: None }
    }
}

/// Burn-in for a monotone link.
pub fn run_burnin<O: RewardOracle + ?Sized>(oracle: &mut O, rng: &mut SimRng, delta: f64, budget: Option<u64>) -> Result<BurninResult> {
    run_burnin_checked(oracle, rng, &BurninConfig { delta, budget, window_constant: None }, false)
}

/// Burn-in for an even link: accepted directions are sign-aligned with the first one.
pub fn run_burnin_even<O: RewardOracle + ?Sized>(oracle: &mut O, rng: &mut SimRng, delta: f64, budget: Option<u64>) -> Result<BurninResult> {
    run_burnin_checked(oracle, rng, &BurninConfig { delta, budget, window_constant: None }, true)
}

/// Runs the variant matching the link's parity.
pub fn run_burnin_with<O: RewardOracle + ?Sized>(oracle: &mut O, rng: &mut SimRng, cfg: &BurninConfig) -> Result<BurninResult> {
    let even = oracle.link().parity() == Parity::Even;
    search(oracle, rng, cfg, even)
}

/// Fails with a parity mismatch unless the link's parity matches `even`.
pub fn run_burnin_checked<O: RewardOracle + ?Sized>(oracle: &mut O, rng: &mut SimRng, cfg: &BurninConfig, even: bool) -> Result<BurninResult> {
    let is_even = oracle.link().parity() == Parity::Even;
    if is_even != even {
        return Err(Error::ParityMismatch(format!(
            "link is {}, but the {} search was requested",
            if is_even { "even" } else { "monotone" },
            if even { "even" } else { "monotone" }
        )));
    }
    search(oracle, rng, cfg, even)
}

fn search<O: RewardOracle + ?Sized>(oracle: &mut O, rng: &mut SimRng, cfg: &BurninConfig, even: bool) -> Result<BurninResult> {
    check_delta(cfg.delta)?;
    let d = oracle.dim();
    let m = epoch_count(d);
    let delta = cfg.delta;
    let c_hat = cfg.window_constant.unwrap_or_else(|| window_constant(d, m));
    let log_term = (2.0 * m as f64 / delta).ln();
    let l = 2.0 * m as f64 * log_term / (0.5 * c_hat);
    let delta_call = delta / l;
    let loop_cap = (20.0 * log_term / c_hat).ceil() as u64;
    let eps_initial = iaht_epsilon(oracle.link(), d)?;

    let start = oracle.queries();
    let mut basis = DirectionBasis::new(d);
    let mut result = BurninResult {
        a0: vec![0.0; d],
        epochs_completed: 0,
        queries_used: 0,
        accepted_directions: basis.clone(),
        per_epoch_loops: Vec::with_capacity(m),
        failure: None,
        epochs: Vec::with_capacity(m),
    };
    let over_budget = |used: u64, extra: u64| cfg.budget.is_some_and(|b| used.saturating_add(extra) > b);

    'epochs: for i in 1..=m {
        let anchored = if i > 100 {
            let x_pre = 2.0 * ((i - 1) as f64 / d as f64).sqrt();
            let mut v_pre = basis.sum();
            let r = ((i - 1) as f64).sqrt();
            v_pre.iter_mut().for_each(|x| *x /= r);
            Some((v_pre, x_pre, gaht_epsilon(oracle.link(), d, x_pre)?))
        } else {
            None
        };
        let mut loops = 0u64;
        loop {
            if loops >= loop_cap {
                result.failure = Some(BurninFailure::LoopCap { epoch: i, loops });
                break 'epochs;
            }
            loops += 1;
            let used = oracle.queries() - start;
            let v = sample_complement(rng, &basis)?;
            let outcome = match &anchored {
                None => {
                    if over_budget(used, sample_count(eps_initial, delta_call, 2.0)) {
                        result.failure = Some(BurninFailure::BudgetExhausted { epoch: i });
                        break 'epochs;
                    }
                    initial_action_hyp_test_with(oracle, &v, delta_call, eps_initial)
                }
                Some((v_pre, x_pre, params)) => {
                    if over_budget(used, 2 * sample_count(params.0, delta_call, 4.0)) {
                        result.failure = Some(BurninFailure::BudgetExhausted { epoch: i });
                        break 'epochs;
                    }
                    good_action_hyp_test_with(oracle, &v, delta_call, v_pre, *x_pre, *params)
                }
            };
            let verdict = match outcome {
                Ok(v) => v,
                Err(Error::BudgetExhausted(_)) => {
                    result.failure = Some(BurninFailure::BudgetExhausted { epoch: i });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !verdict.accepted {
                continue;
            }
            let mut v = v;
            if even && anchored.is_none() && i >= 2 {
                let n = sample_count(eps_initial, delta_call, 4.0);
                if over_budget(oracle.queries() - start, 2 * n) {
                    result.failure = Some(BurninFailure::BudgetExhausted { epoch: i });
                    break 'epochs;
                }
                let v1 = &basis.vectors()[0];
                let h = 0.5f64.sqrt();
                let plus = combine_scaled(&v, v1, h, h)?;
                let minus = combine_scaled(&v, v1, h, -h)?;
                let signs = oracle
                    .query_batch(&plus, n)
                    .and_then(|rp| oracle.query_batch(&minus, n).map(|rm| (rp, rm)));
                match signs {
                    Ok((rp, rm)) => {
                        if rp < rm {
                            v.iter_mut().for_each(|x| *x = -*x);
                        }
                    }
                    Err(Error::BudgetExhausted(_)) => {
                        result.failure = Some(BurninFailure::BudgetExhausted { epoch: i });
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            basis.push(v)?;
            break;
        }
        result.per_epoch_loops.push(loops);
        result.epochs_completed = i;
        result.epochs.push(EpochRecord { epoch: i, loops, queries: oracle.queries() - start });
    }
    result.queries_used = oracle.queries() - start;
    result.accepted_directions = basis;
    result.a0 = result.partial_sum(result.epochs_completed);
    Ok(result)
}
