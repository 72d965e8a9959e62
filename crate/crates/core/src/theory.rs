//! Predicted burn-in trajectories and cost integrals, up to absolute constants.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Ledger;
use crate::error::{Error, Result};
use crate::linkfn::{burnin_schedule, LinkDescriptor, LinkFunction};

/// Quadrature panels used unless a caller asks for more.
pub const DEFAULT_PANELS: usize = 2048;

/// Unit steps taken exactly before the steppers switch to RK4 leaps.
const EXACT_STEPS: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    LowerBoundRecursion,
    UpperBoundOde,
    Measured,
}

impl CurveKind {
    pub fn label(self) -> &'static str {
        match self {
            CurveKind::LowerBoundRecursion => "lower_bound_recursion",
            CurveKind::UpperBoundOde => "upper_bound_ode",
            CurveKind::Measured => "measured",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub d: usize,
    pub c: f64,
    pub delta: Option<f64>,
    pub link: LinkDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCurve {
    pub kind: CurveKind,
    pub points: Vec<(u64, f64)>,
    pub params: CurveParams,
}

impl TrajectoryCurve {
    /// Inner products <theta*, a_t> read off an environment ledger.
    pub fn measured(ledger: &Ledger, link: &LinkFunction, d: usize) -> Self {
        TrajectoryCurve {
            kind: CurveKind::Measured,
            points: ledger.trajectory().iter().map(|e| (e.t, e.inner_product)).collect(),
            params: CurveParams { d, c: f64::NAN, delta: None, link: link.descriptor().clone() },
        }
    }

    /// First t at which x reaches `level`, if it does.
    pub fn crossing_time(&self, level: f64) -> Option<u64> {
        self.points.iter().find(|p| p.1 >= level).map(|p| p.0)
    }

    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let link = serde_json::to_string(&self.params.link)?;
        let c = if self.params.c.is_nan() { String::new() } else { self.params.c.to_string() };
        let delta = self.params.delta.map(|v| v.to_string()).unwrap_or_default();
        let d = self.params.d.to_string();
        for (t, x) in &self.points {
            w.write_record([t.to_string().as_str(), &x.to_string(), self.kind.label(), &d, &link, &c, &delta])?;
        }
        Ok(())
    }
}

/// Writes curves with the header t, x, kind, d, link, c, delta.
pub fn write_curves_csv(path: &Path, curves: &[TrajectoryCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "kind", "d", "link", "c", "delta"])?;
    for c in curves {
        c.write_csv_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Advances u_{t+1} = u_t + rate(u_t) from u0 until u reaches `u_stop` or t
/// reaches `t_max`. Unit steps are exact for the first EXACT_STEPS rounds;
/// after that the recursion is followed as an ODE with RK4 steps short
/// enough that u changes by at most 1e-4 relative per step.
/// `record` receives (t, u) after each step. Returns the fractional crossing time if reached.
fn march(u0: f64, u_stop: f64, t_max: f64, rate: impl Fn(f64) -> f64, mut record: impl FnMut(f64, f64)) -> Result<Option<f64>> {
    let mut u = u0;
    let mut t = 0.0_f64;
    record(t, u);
    while u < u_stop {
        if t >= t_max {
            return Ok(None);
        }
        let r = rate(u);
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::DivergentIntegrand(u.sqrt()));
        }
        if t < EXACT_STEPS as f64 || r >= 1e-4 * u {
            let next = u + r;
            if next >= u_stop {
                let frac = (u_stop - u) / r;
                record(t + 1.0, next);
                return Ok(Some(t + frac));
            }
            u = next;
            t += 1.0;
        } else {
            let h = (1e-4 * u / r).floor().min((t_max - t).max(1.0));
            let k1 = rate(u);
            let k2 = rate(u + 0.5 * h * k1);
            let k3 = rate(u + 0.5 * h * k2);
            let k4 = rate(u + h * k3);
            let next = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if next >= u_stop {
                // linear interpolation inside the leap
                let frac = h * (u_stop - u) / (next - u);
                record(t + h, next);
                return Ok(Some(t + frac));
            }
            u = next;
            t += h;
        }
        record(t, u);
    }
    Ok(Some(t))
}

/// Keeps roughly 50 points per decade of t.
struct Thinner {
    next: f64,
    points: Vec<(u64, f64)>,
}

impl Thinner {
    fn new() -> Self {
        Thinner { next: 0.0, points: Vec::new() }
    }

    fn offer(&mut self, t: f64, x: f64) {
        if t >= self.next {
            self.points.push((t.round() as u64, x.min(1.0)));
            self.next = (t * 1.047).max(t + 1.0);
        }
    }

    fn finish(mut self, t: f64, x: f64) -> Vec<(u64, f64)> {
        let t = t.round() as u64;
        if self.points.last().is_none_or(|p| p.0 < t) {
            self.points.push((t, x.min(1.0)));
        }
        self.points
    }
}

fn lb_rate(link: &LinkFunction, d: usize, c: f64) -> impl Fn(f64) -> f64 + '_ {
    move |u: f64| c / d as f64 * link.envelope(u.sqrt().min(1.0)).powi(2)
}

fn check_lb_args(d: usize, c: f64, delta: f64) -> Result<f64> {
    if d < 2 || !(c > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition(format!("need d >= 2, c > 0, delta in (0,1); got d={d}, c={c}, delta={delta}")));
    }
    Ok(c * (1.0 / delta).ln() / d as f64)
}

/// eps_1^2 = c ln(1/delta) / d and eps_{t+1}^2 = eps_t^2 + (c/d) g(eps_t)^2, stopped once eps reaches 1.
pub fn lb_epsilon_sequence(link: &LinkFunction, d: usize, c: f64, delta: f64, t_max: u64) -> Result<TrajectoryCurve> {
    let u0 = check_lb_args(d, c, delta)?;
    let mut thin = Thinner::new();
    let mut last = (0.0, u0);
    march(u0, 1.0, t_max as f64, lb_rate(link, d, c), |t, u| {
        thin.offer(t + 1.0, u.sqrt());
        last = (t + 1.0, u);
    })?;
    Ok(TrajectoryCurve {
        kind: CurveKind::LowerBoundRecursion,
        points: thin.finish(last.0, last.1.sqrt()),
        params: CurveParams { d, c, delta: Some(delta), link: link.descriptor().clone() },
    })
}

/// Every term eps_1, ..., eps_{t_max} of the recursion, computed exactly.
pub fn lb_epsilon_terms(link: &LinkFunction, d: usize, c: f64, delta: f64, t_max: usize) -> Result<Vec<f64>> {
    let mut u = check_lb_args(d, c, delta)?;
    let rate = lb_rate(link, d, c);
    let mut out = Vec::with_capacity(t_max);
    while out.len() < t_max {
        out.push(u.sqrt().min(1.0));
        if u >= 1.0 {
            break;
        }
        u += rate(u);
    }
    Ok(out)
}

/// Index t (1-based, fractional) at which eps_t first reaches `level`.
pub fn lb_crossing_time(link: &LinkFunction, d: usize, c: f64, delta: f64, level: f64) -> Result<f64> {
    let u0 = check_lb_args(d, c, delta)?;
    let t = march(u0, level * level, f64::INFINITY, lb_rate(link, d, c), |_, _| {})?;
    Ok(1.0 + t.unwrap_or(f64::INFINITY))
}

/// max over y in [lo, x] of min over z in [y/2, y] of f'(z)^2, tabulated on
/// a log grid and read back with the exact inner minimum at x.
pub struct DerivativeEnvelope<'a> {
    link: &'a LinkFunction,
    ys: Vec<f64>,
    running: Vec<f64>,
}

impl<'a> DerivativeEnvelope<'a> {
    pub fn new(link: &'a LinkFunction, lo: f64) -> Self {
        let n = 4096;
        let lo = lo.max(1e-6);
        let ratio = (1.0 / lo).ln();
        let ys: Vec<f64> = (0..=n).map(|k| lo * (ratio * k as f64 / n as f64).exp()).collect();
        let mut running = Vec::with_capacity(ys.len());
        let mut best: f64 = 0.0;
        for &y in &ys {
            best = best.max(Self::inner(link, y));
            running.push(best);
        }
        DerivativeEnvelope { link, ys, running }
    }

    fn inner(link: &LinkFunction, y: f64) -> f64 {
        let k = 64;
        (0..=k)
            .map(|j| {
                let z = 0.5 * y + 0.5 * y * j as f64 / k as f64;
                link.derivative(z).powi(2)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn at(&self, x: f64) -> f64 {
        let here = Self::inner(self.link, x);
        let idx = self.ys.partition_point(|&y| y <= x);
        if idx == 0 {
            return here;
        }
        here.max(self.running[idx - 1])
    }
}

/// Euler steps on u = x^2 with du/dt = R(x) / d^2, where R is the derivative envelope.
pub fn ub_trajectory_ode(link: &LinkFunction, d: usize, x0: f64, t_max: u64) -> Result<TrajectoryCurve> {
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(Error::Precondition(format!("x0 must lie in (0,1), got {x0}")));
    }
    let env = DerivativeEnvelope::new(link, x0);
    let d2 = (d as f64).powi(2);
    let mut thin = Thinner::new();
    let mut last = (0.0, x0 * x0);
    march(x0 * x0, 1.0, t_max as f64, |u| env.at(u.sqrt().min(1.0)) / d2, |t, u| {
        thin.offer(t, u.sqrt());
        last = (t, u);
    })?;
    Ok(TrajectoryCurve {
        kind: CurveKind::UpperBoundOde,
        points: thin.finish(last.0, last.1.sqrt()),
        params: CurveParams { d, c: 1.0, delta: None, link: link.descriptor().clone() },
    })
}

/// Time for the upper-bound ODE started at x0 to reach `level`.
pub fn ub_crossing_time(link: &LinkFunction, d: usize, x0: f64, level: f64) -> Result<f64> {
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(Error::Precondition(format!("x0 must lie in (0,1), got {x0}")));
    }
    let env = DerivativeEnvelope::new(link, x0);
    let d2 = (d as f64).powi(2);
    let t = march(x0 * x0, level * level, f64::INFINITY, |u| env.at(u.sqrt().min(1.0)) / d2, |_, _| {})?;
    Ok(t.unwrap_or(f64::INFINITY))
}

/// Trapezoid rule for the integral of h(u) du over [lo, hi] on a grid uniform in ln u.
fn log_trapezoid(lo: f64, hi: f64, panels: usize, h: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if hi <= lo * (1.0 + 1e-12) {
        return Ok(0.0);
    }
    let step = (hi / lo).ln() / panels as f64;
    let mut total = 0.0;
    for k in 0..=panels {
        let u = if k == panels { hi } else { lo * (step * k as f64).exp() };
        // du = u d(ln u)
        let w = if k == 0 || k == panels { 0.5 } else { 1.0 };
        total += w * h(u)? * u;
    }
    Ok(total * step)
}

/// d^2 times the integral over u = x^2 from c/d to eps_target^2 of du / R(x).
pub fn burnin_integral_ub(link: &LinkFunction, d: usize, eps_target: f64, c: f64, panels: usize) -> Result<f64> {
    let lo = (c / d as f64).sqrt();
    if !(c > 0.0) || eps_target < lo * (1.0 - 1e-12) || eps_target > 0.5 {
        return Err(Error::Precondition(format!("eps_target {eps_target} outside [{lo}, 0.5]")));
    }
    let env = DerivativeEnvelope::new(link, lo);
    let d2 = (d as f64).powi(2);
    let val = log_trapezoid(lo * lo, eps_target * eps_target, panels, |u| {
        let x = u.sqrt();
        let r = env.at(x);
        if !(r > 0.0) {
            return Err(Error::DivergentIntegrand(x));
        }
        Ok(1.0 / r)
    })?;
    Ok(d2 * val)
}

/// d times the integral over u = x^2 from c logT / d to eps_target^2 of du / g(x)^2.
pub fn burnin_integral_lb(link: &LinkFunction, d: usize, eps_target: f64, log_t: f64, c: f64, panels: usize) -> Result<f64> {
    let lo2 = c * log_t / d as f64;
    if !(c > 0.0) || !(log_t > 0.0) || eps_target * eps_target < lo2 * (1.0 - 1e-12) || eps_target > 1.0 {
        return Err(Error::Precondition(format!("eps_target {eps_target} below sqrt({lo2})")));
    }
    let val = log_trapezoid(lo2, eps_target * eps_target, panels, |u| {
        let x = u.sqrt();
        let g = link.envelope(x);
        if !(g > 0.0) {
            return Err(Error::DivergentIntegrand(x));
        }
        Ok(1.0 / (g * g))
    })?;
    Ok(d as f64 * val)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BridgeReport {
    pub d: usize,
    pub schedule_sum: f64,
    pub integral: f64,
    pub ratio: f64,
    pub within_bounds: bool,
}

/// Compares the burn-in schedule's sum of 1/eps_i^2 with the upper-bound integral at eps = 1/2.
pub fn schedule_bridge_check(link: &LinkFunction, d: usize) -> Result<BridgeReport> {
    let schedule_sum = burnin_schedule(link, d)?.inverse_square_sum();
    let integral = burnin_integral_ub(link, d, 0.5, 1.0, DEFAULT_PANELS)?;
    let ratio = schedule_sum / integral;
    Ok(BridgeReport { d, schedule_sum, integral, ratio, within_bounds: (1.0 / 64.0..=64.0).contains(&ratio) })
}

/// Least-squares slope of ln y against ln x.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn identity_recursion_is_geometric() {
        let f = LinkFunction::identity();
        let eps = lb_epsilon_terms(&f, 100, 1.0, (-1.0f64).exp(), 400).unwrap();
        for (k, e) in eps.iter().enumerate() {
            let want = 0.01 * 1.01f64.powi(k as i32);
            if want >= 1.0 {
                break;
            }
            assert!((e * e - want).abs() <= 1e-12 * want.max(1e-300) + 1e-15, "term {k}");
        }
    }

    #[test]
    fn recursion_increases_until_one() {
        let f = LinkFunction::cubic();
        let eps = lb_epsilon_terms(&f, 50, 1.0, 0.1, 100_000).unwrap();
        assert!(eps.windows(2).all(|w| w[1] > w[0] || w[1] == 1.0));
        assert_eq!(*eps.last().unwrap(), 1.0);
    }

    #[test]
    fn cubic_crossing_scales_as_d_cubed() {
        let f = LinkFunction::cubic();
        let ds = [100.0, 1000.0, 10000.0];
        let ts: Vec<f64> = ds.iter().map(|&d| lb_crossing_time(&f, d as usize, 1.0, 0.1, 0.5).unwrap()).collect();
        let s = log_log_slope(&ds, &ts);
        assert!((s - 3.0).abs() <= 0.05, "slope {s}");
    }

    #[test]
    fn leaping_agrees_with_exact_steps() {
        // d = 300 crosses near 2.6e6 rounds, past the exact-step limit
        let f = LinkFunction::cubic();
        let d = 300;
        let leap = lb_crossing_time(&f, d, 1.0, 0.1, 0.5).unwrap();
        let eps = lb_epsilon_terms(&f, d, 1.0, 0.1, 10_000_000).unwrap();
        let exact = eps.iter().position(|&e| e >= 0.5).unwrap() as f64 + 1.0;
        assert!(exact > EXACT_STEPS as f64);
        assert!(rel(leap, exact) < 1e-3, "{leap} vs {exact}");
    }

    #[test]
    fn identity_ode_is_linear_in_u() {
        let f = LinkFunction::identity();
        let curve = ub_trajectory_ode(&f, 10, 0.1, 50).unwrap();
        for &(t, x) in &curve.points {
            assert!((x * x - (0.01 + t as f64 / 100.0)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn ode_crossing_matches_the_integral() {
        let f = LinkFunction::cubic();
        let t = ub_crossing_time(&f, 100, 0.1, 0.5).unwrap();
        let v = burnin_integral_ub(&f, 100, 0.5, 1.0, DEFAULT_PANELS).unwrap();
        assert!(rel(t, v) < 0.05, "{t} vs {v}");
    }

    #[test]
    fn lower_bound_curve_sits_above_the_upper_bound_curve() {
        let f = LinkFunction::cubic();
        let d = 100;
        let env = DerivativeEnvelope::new(&f, 0.1);
        for k in 0..=200 {
            let x = 0.1 + 0.9 * k as f64 / 200.0;
            assert!(f.envelope(x).powi(2) / d as f64 >= env.at(x) / (d * d) as f64);
        }
        let delta = (-1.0f64).exp();
        for level in [0.2, 0.3, 0.5, 0.8] {
            let lb = lb_crossing_time(&f, d, 1.0, delta, level).unwrap();
            let ub = ub_crossing_time(&f, d, 0.1, level).unwrap();
            assert!(lb <= ub + 1.0, "level {level}: {lb} > {ub}");
        }
    }

    #[test]
    fn identity_integrals_have_closed_forms() {
        let f = LinkFunction::identity();
        let ub = burnin_integral_ub(&f, 100, 0.5, 1.0, DEFAULT_PANELS).unwrap();
        assert!(rel(ub, 2400.0) < 1e-6, "{ub}");
        let log_t = 100f64.ln();
        let lb = burnin_integral_lb(&f, 100, 0.5, log_t, 1.0, DEFAULT_PANELS).unwrap();
        let want = 100.0 * 2.0 * (0.5 / (log_t / 100.0).sqrt()).ln();
        assert!(rel(lb, want) < 0.005, "{lb} vs {want}");
    }

    #[test]
    fn empty_ranges_give_zero() {
        let f = LinkFunction::cubic();
        assert_eq!(burnin_integral_ub(&f, 100, 0.1, 1.0, 64).unwrap(), 0.0);
        assert_eq!(burnin_integral_lb(&f, 100, 0.1, 1.0, 1.0, 64).unwrap(), 0.0);
        assert!(burnin_integral_ub(&f, 100, 0.6, 1.0, 64).is_err());
    }

    #[test]
    fn panel_doubling_is_stable() {
        for f in [LinkFunction::identity(), LinkFunction::cubic(), LinkFunction::abs_power(3.0).unwrap()] {
            for d in [100usize, 10_000] {
                let a = burnin_integral_ub(&f, d, 0.5, 1.0, DEFAULT_PANELS).unwrap();
                let b = burnin_integral_ub(&f, d, 0.5, 1.0, 2 * DEFAULT_PANELS).unwrap();
                assert!(rel(a, b) < 1e-3, "{} d={d}", f.name());
                let a = burnin_integral_lb(&f, d, 0.5, 2.0, 1.0, DEFAULT_PANELS).unwrap();
                let b = burnin_integral_lb(&f, d, 0.5, 2.0, 1.0, 2 * DEFAULT_PANELS).unwrap();
                assert!(rel(a, b) < 1e-3);
            }
        }
    }

    #[test]
    fn power_link_exponents() {
        let ds = [100.0, 1000.0, 10000.0];
        let ub_slope = |f: &LinkFunction| {
            let v: Vec<f64> = ds.iter().map(|&d| burnin_integral_ub(f, d as usize, 0.5, 1.0, DEFAULT_PANELS).unwrap()).collect();
            log_log_slope(&ds, &v)
        };
        let lb_slope = |f: &LinkFunction| {
            let v: Vec<f64> = ds.iter().map(|&d| burnin_integral_lb(f, d as usize, 0.5, 1.0, 1.0, DEFAULT_PANELS).unwrap()).collect();
            log_log_slope(&ds, &v)
        };
        let p3 = LinkFunction::abs_power(3.0).unwrap();
        assert!((ub_slope(&p3) - 3.0).abs() <= 0.05);
        let cubic = LinkFunction::cubic();
        let lb_over_d: Vec<f64> = ds.iter().map(|&d| burnin_integral_lb(&cubic, d as usize, 0.5, 1.0, 1.0, DEFAULT_PANELS).unwrap() / d).collect();
        assert!((log_log_slope(&ds, &lb_over_d) - 2.0).abs() <= 0.05);
        for p in [3.0, 4.0] {
            let f = LinkFunction::abs_power(p).unwrap();
            assert!((ub_slope(&f) - p.max(2.0)).abs() <= 0.1, "ub p={p}");
            assert!((lb_slope(&f) - p.max(1.0)).abs() <= 0.1, "lb p={p}");
        }
        let f = LinkFunction::abs_power(1.0).unwrap();
        assert!((ub_slope(&f) - 2.0).abs() <= 0.1);
    }

    #[test]
    fn integrals_grow_with_the_target() {
        let f = LinkFunction::cubic();
        let mut prev = 0.0;
        for k in 1..=8 {
            let eps = 0.1 + 0.4 * k as f64 / 8.0;
            let v = burnin_integral_ub(&f, 100, eps, 1.0, 256).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn bridge_ratios() {
        for f in [LinkFunction::identity(), LinkFunction::cubic()] {
            for d in [512, 2048] {
                let r = schedule_bridge_check(&f, d).unwrap();
                assert!(r.ratio > 0.0);
                assert!(r.within_bounds, "{} d={d} ratio {}", f.name(), r.ratio);
            }
        }
    }

    #[test]
    fn curve_csv_round_trip() {
        let f = LinkFunction::cubic();
        let curve = lb_epsilon_sequence(&f, 64, 1.0, 0.1, 1_000_000).unwrap();
        assert!(curve.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert!(curve.points.iter().all(|p| p.1 > 0.0 && p.1 <= 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_curves_csv(&path, std::slice::from_ref(&curve)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x,kind,d,link,c,delta\n"));
        assert_eq!(text.lines().count(), curve.points.len() + 1);
    }
}
