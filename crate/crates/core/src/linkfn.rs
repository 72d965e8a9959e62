//! Link functions and the epsilon schedules derived from their finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID: usize = 512;
const REFINE: usize = 65;
const TIE_TOL: f64 = 1e-9;
/// Step used for numerical derivatives of the link.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mirror {
    Odd,
    Even,
}

/// JSON form of a link, e.g. `{"kind":"abs_power","p":2.0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkDescriptor {
    Identity,
    Cubic,
    AbsPower {
        p: f64,
    },
    SignedPower {
        p: u32,
    },
    /// Breakpoints `[x, y]` sorted by x. With `mirror` set the table covers
    /// [0, 1] and is reflected; otherwise it must cover [-1, 1].
    Piecewise {
        points: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mirror: Option<Mirror>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    MonotoneOddLike,
    Even,
}

#[derive(Clone, Debug)]
enum Shape {
    Identity,
    Cubic,
    AbsPower(f64),
    SignedPower(i32),
    Table { xs: Vec<f64>, ys: Vec<f64>, mirror: Option<Mirror> },
}

#[derive(Clone, Debug)]
pub struct LinkFunction {
    descriptor: LinkDescriptor,
    shape: Shape,
    parity: Parity,
    lipschitz_l: Option<f64>,
    cf_lower: Option<f64>,
    cf_upper: Option<f64>,
}

impl LinkFunction {
    pub fn identity() -> Self {
        Self::from_descriptor(&LinkDescriptor::Identity).expect("identity is valid")
    }

    pub fn cubic() -> Self {
        Self::from_descriptor(&LinkDescriptor::Cubic).expect("cubic is valid")
    }

    pub fn abs_power(p: f64) -> Result<Self> {
        Self::from_descriptor(&LinkDescriptor::AbsPower { p })
    }

    pub fn signed_power(p: u32) -> Result<Self> {
        Self::from_descriptor(&LinkDescriptor::SignedPower { p })
    }

    pub fn piecewise(points: Vec<[f64; 2]>, mirror: Option<Mirror>) -> Result<Self> {
        Self::from_descriptor(&LinkDescriptor::Piecewise { points, mirror })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let desc: LinkDescriptor = serde_json::from_str(s)?;
        Self::from_descriptor(&desc)
    }

    pub fn from_descriptor(desc: &LinkDescriptor) -> Result<Self> {
        let link = match desc {
            LinkDescriptor::Identity => LinkFunction {
                descriptor: desc.clone(),
                shape: Shape::Identity,
                parity: Parity::MonotoneOddLike,
                lipschitz_l: Some(1.0),
                cf_lower: Some(1.0),
                cf_upper: Some(1.0),
            },
            LinkDescriptor::Cubic => LinkFunction {
                descriptor: desc.clone(),
                shape: Shape::Cubic,
                parity: Parity::MonotoneOddLike,
                lipschitz_l: Some(3.0),
                cf_lower: Some(0.03),
                cf_upper: Some(3.0),
            },
            LinkDescriptor::AbsPower { p } => {
                let p = *p;
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::InvalidLink(format!("abs_power needs p > 0, got {p}")));
                }
                let (lo, hi, l) = power_constants(p);
                LinkFunction {
                    descriptor: desc.clone(),
                    shape: Shape::AbsPower(p),
                    parity: Parity::Even,
                    lipschitz_l: l,
                    cf_lower: Some(lo),
                    cf_upper: Some(hi),
                }
            }
            LinkDescriptor::SignedPower { p } => {
                if *p == 0 {
                    return Err(Error::InvalidLink("signed_power needs p >= 1".into()));
                }
                let (lo, hi, l) = power_constants(*p as f64);
                LinkFunction {
                    descriptor: desc.clone(),
                    shape: Shape::SignedPower(*p as i32),
                    parity: if p % 2 == 0 { Parity::Even } else { Parity::MonotoneOddLike },
                    lipschitz_l: l,
                    cf_lower: Some(lo),
                    cf_upper: Some(hi),
                }
            }
            LinkDescriptor::Piecewise { points, mirror } => build_table(desc, points, *mirror)?,
        };
        link.check_invariants()?;
        Ok(link)
    }

    pub fn descriptor(&self) -> &LinkDescriptor {
        &self.descriptor
    }

    /// Short label used in CSV output.
    pub fn name(&self) -> String {
        match &self.descriptor {
            LinkDescriptor::Identity => "identity".into(),
            LinkDescriptor::Cubic => "cubic".into(),
            LinkDescriptor::AbsPower { p } => format!("abs_power_{p}"),
            LinkDescriptor::SignedPower { p } => format!("signed_power_{p}"),
            LinkDescriptor::Piecewise { .. } => "piecewise".into(),
        }
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn lipschitz_l(&self) -> Option<f64> {
        self.lipschitz_l
    }

    pub fn cf_lower(&self) -> Option<f64> {
        self.cf_lower
    }

    pub fn cf_upper(&self) -> Option<f64> {
        self.cf_upper
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.shape, Shape::Identity)
    }

    /// c_f from the metadata, or the smallest finite-difference slope on [0.1, 1].
    pub fn effective_cf_lower(&self) -> f64 {
        self.cf_lower.unwrap_or_else(|| min_slope(self, 0.1, 1.0, 900))
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x.abs() <= 1.0 + 1e-9) {
            return Err(Error::Domain { value: x, lo: -1.0, hi: 1.0 });
        }
        Ok(self.value(x))
    }

    /// Unchecked evaluation; the argument is clamped to [-1, 1].
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let x = x.clamp(-1.0, 1.0);
        match &self.shape {
            Shape::Identity => x,
            Shape::Cubic => x * x * x,
            Shape::AbsPower(p) => x.abs().powf(*p),
            Shape::SignedPower(p) => x.powi(*p),
            Shape::Table { xs, ys, mirror } => match mirror {
                None => interpolate(xs, ys, x),
                Some(Mirror::Even) => interpolate(xs, ys, x.abs()),
                Some(Mirror::Odd) => x.signum() * interpolate(xs, ys, x.abs()),
            },
        }
    }

    /// Central finite-difference derivative, one-sided at the ends of [-1, 1].
    pub fn derivative(&self, x: f64) -> f64 {
        let lo = (x - FD_STEP).max(-1.0);
        let hi = (x + FD_STEP).min(1.0);
        (self.value(hi) - self.value(lo)) / (hi - lo)
    }

    pub fn envelope_g(&self, x: f64) -> Result<f64> {
        if !(-1e-12..=1.0 + 1e-12).contains(&x) {
            return Err(Error::Domain { value: x, lo: 0.0, hi: 1.0 });
        }
        Ok(self.envelope(x))
    }

    #[inline]
    pub(crate) fn envelope(&self, x: f64) -> f64 {
        self.value(x).abs().max(self.value(-x).abs())
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidLink(msg));
        if self.value(0.0).abs() > 1e-12 || (self.value(1.0) - 1.0).abs() > 1e-12 {
            return bad("need f(0) = 0 and f(1) = 1".into());
        }
        let n = 2000;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=n {
            let x = -1.0 + 2.0 * k as f64 / n as f64;
            let y = self.value(x);
            if y.abs() > 1.0 + 1e-12 {
                return bad(format!("|f({x})| = {} exceeds 1", y.abs()));
            }
            match self.parity {
                Parity::MonotoneOddLike => {
                    if y < prev - 1e-12 {
                        return bad(format!("f decreases near x = {x}"));
                    }
                    prev = y;
                }
                Parity::Even => {
                    if (y - self.value(-x)).abs() > 1e-12 {
                        return bad(format!("f is not even at x = {x}"));
                    }
                    if x >= 0.0 {
                        if y < prev - 1e-12 {
                            return bad(format!("f decreases on [0,1] near x = {x}"));
                        }
                        prev = y;
                    }
                }
            }
        }
        if let Some(c) = self.cf_lower {
            let slope = min_slope(self, 0.1, 1.0, 900);
            if slope < 0.9 * c {
                return bad(format!("slope {slope} on [0.1,1] is below 0.9 * c_f = {}", 0.9 * c));
            }
        }
        Ok(())
    }
}

fn power_constants(p: f64) -> (f64, f64, Option<f64>) {
    let at_tenth = p * 0.1f64.powf(p - 1.0);
    if p >= 1.0 {
        (at_tenth, p, Some(p))
    } else {
        (p, at_tenth, None)
    }
}

fn min_slope(f: &LinkFunction, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|k| {
            let x = lo + k as f64 * h;
            (f.value(x + h) - f.value(x)) / h
        })
        .fold(f64::INFINITY, f64::min)
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let j = xs.partition_point(|&p| p < x);
    if j == 0 {
        return ys[0];
    }
    if j == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[j - 1], xs[j]);
    ys[j - 1] + (ys[j] - ys[j - 1]) * (x - x0) / (x1 - x0)
}

fn build_table(desc: &LinkDescriptor, points: &[[f64; 2]], mirror: Option<Mirror>) -> Result<LinkFunction> {
    if points.len() < 2 {
        return Err(Error::InvalidLink("piecewise table needs at least two points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidLink("non-finite breakpoint".into()));
    }
    for k in 1..xs.len() {
        if xs[k] < xs[k - 1] {
            return Err(Error::InvalidLink("breakpoints must be sorted by x".into()));
        }
        if k >= 2 && xs[k] == xs[k - 2] {
            return Err(Error::InvalidLink(format!("more than two breakpoints at x = {}", xs[k])));
        }
    }
    let start = if mirror.is_some() { 0.0 } else { -1.0 };
    if xs[0] != start || xs[xs.len() - 1] != 1.0 {
        return Err(Error::InvalidLink(format!("table must cover [{start}, 1]")));
    }
    let parity = match mirror {
        Some(Mirror::Even) => Parity::Even,
        _ => Parity::MonotoneOddLike,
    };
    let mut slope_lo = f64::INFINITY;
    let mut slope_hi: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut jump_in_range = false;
    let mut jump_anywhere = false;
    for k in 1..xs.len() {
        let (x0, x1) = (xs[k - 1], xs[k]);
        if x1 == x0 {
            jump_anywhere |= ys[k] != ys[k - 1];
            jump_in_range |= ys[k] != ys[k - 1] && x0 > 0.1;
            continue;
        }
        let s = (ys[k] - ys[k - 1]) / (x1 - x0);
        lip = lip.max(s.abs());
        if x1.min(1.0) - x0.max(0.1) > 0.0 {
            slope_lo = slope_lo.min(s);
            slope_hi = slope_hi.max(s);
        }
    }
    Ok(LinkFunction {
        descriptor: desc.clone(),
        shape: Shape::Table { xs, ys, mirror },
        parity,
        lipschitz_l: (!jump_anywhere).then_some(lip),
        cf_lower: (slope_lo.is_finite() && slope_lo > 0.0).then_some(slope_lo),
        cf_upper: (!jump_in_range && slope_hi > 0.0).then_some(slope_hi),
    })
}

/// Minimum of `g` over a 512-point grid of [lo, hi], refined once around the best point.
pub(crate) fn grid_min(lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> (f64, f64) {
    let scan = |a: f64, b: f64, n: usize| {
        let mut best = (a, g(a));
        let mut best_k = 0;
        for k in 1..n {
            let x = a + (b - a) * k as f64 / (n - 1) as f64;
            let v = g(x);
            if v < best.1 {
                best = (x, v);
                best_k = k;
            }
        }
        (best, best_k)
    };
    if hi <= lo {
        return (lo, g(lo));
    }
    let step = (hi - lo) / (GRID - 1) as f64;
    let ((x, v), _) = scan(lo, hi, GRID);
    let ((rx, rv), _) = scan((x - step).max(lo), (x + step).min(hi), REFINE);
    if rv < v {
        (rx, rv)
    } else {
        (x, v)
    }
}

/// Maximum of `g` over the same grid; near-ties (relative 1e-9) go to the largest x.
pub(crate) fn grid_max_largest(lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> (f64, f64) {
    let scan = |a: f64, b: f64, n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let x = if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 };
                (x, g(x))
            })
            .collect()
    };
    let pick = |pts: &[(f64, f64)]| {
        let top = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        *pts.iter().rev().find(|p| p.1 >= top - TIE_TOL * top.abs()).expect("nonempty grid")
    };
    if hi <= lo {
        return (lo, g(lo));
    }
    let step = (hi - lo) / (GRID - 1) as f64;
    let coarse = pick(&scan(lo, hi, GRID));
    let mut fine = scan((coarse.0 - step).max(lo), (coarse.0 + step).min(hi), REFINE);
    fine.push(coarse);
    pick(&fine)
}

/// Smallest |f(z + h) - f(z)| over a grid of [z_lo, z_hi].
pub fn finite_difference_min(f: &LinkFunction, z_lo: f64, z_hi: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || !(0.0 <= z_lo && z_lo <= z_hi) {
        return Err(Error::Precondition(format!(
            "need 0 <= z_lo <= z_hi and h > 0, got [{z_lo}, {z_hi}], h = {h}"
        )));
    }
    if z_hi + h > 1.0 + 1e-12 {
        return Err(Error::Domain { value: z_hi + h, lo: 0.0, hi: 1.0 });
    }
    Ok(grid_min(z_lo, z_hi, |z| (f.value(z + h) - f.value(z)).abs()).1)
}

/// Tolerance of the single-direction test at dimension `d`.
pub fn iaht_epsilon(f: &LinkFunction, d: usize) -> Result<f64> {
    if d < 16 {
        return Err(Error::Precondition(format!("d = {d} must be at least 16")));
    }
    let s = (d as f64).sqrt();
    let eps = 0.5 * finite_difference_min(f, 2.0 / s, 2.8 / s, 0.2 / s)?;
    if eps <= 0.0 {
        return Err(Error::DegenerateLink(format!(
            "f is flat somewhere on [{}, {}]",
            2.0 / s,
            3.0 / s
        )));
    }
    Ok(eps)
}

/// Tolerance and anchor level y* of the anchored test. Returns `(epsilon, y_star)`.
pub fn gaht_epsilon(f: &LinkFunction, d: usize, x_pre: f64) -> Result<(f64, f64)> {
    let s = (d as f64).sqrt();
    if x_pre < 20.0 / s * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "x_pre = {x_pre} is below 20/sqrt(d) = {}",
            20.0 / s
        )));
    }
    let h = 0.2 / (2.0 * d as f64).sqrt();
    let y_lo = 20.0 / (2.0 * d as f64).sqrt();
    // keep 5y/3 + h inside the domain of f
    let y_hi = (x_pre / 2f64.sqrt()).min(0.6 * (1.0 - h)).max(y_lo);
    let inner = |y: f64| grid_min(5.0 * y / 6.0, 5.0 * y / 3.0, |z| (f.value(z + h) - f.value(z)).abs()).1;
    let (y_star, best) = grid_max_largest(y_lo, y_hi, inner);
    let eps = 0.5 * best;
    if eps <= 0.0 {
        return Err(Error::DegenerateLink(format!("zero anchored tolerance at d = {d}")));
    }
    Ok((eps, y_star))
}

/// Number of burn-in epochs, ceil(d / 16).
pub fn epoch_count(d: usize) -> usize {
    d.div_ceil(16)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub values: Vec<f64>,
}

impl EpsilonSchedule {
    /// Value for 1-based epoch `i`.
    pub fn get(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    pub fn inverse_square_sum(&self) -> f64 {
        self.values.iter().map(|e| 1.0 / (e * e)).sum()
    }
}

pub fn burnin_schedule(f: &LinkFunction, d: usize) -> Result<EpsilonSchedule> {
    let m = epoch_count(d);
    let first = iaht_epsilon(f, d)?;
    let mut values = Vec::with_capacity(m);
    for i in 1..=m {
        if i <= 100 {
            values.push(first);
        } else {
            let x_pre = 2.0 * ((i - 1) as f64 / d as f64).sqrt();
            values.push(gaht_epsilon(f, d, x_pre)?.0);
        }
    }
    Ok(EpsilonSchedule { values })
}
