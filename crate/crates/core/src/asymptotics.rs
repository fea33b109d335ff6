//! Finite-horizon classification of motions: bounded, parabolic,
//! hyperbolic, partially hyperbolic, superhyperbolic.
//!
//! Every verdict is evidence over the recorded horizon, never a proof.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{Termination, Trajectory};
use crate::model::MassSystem;

/// Exponent tolerance around the admissible window `[2/3, 1]`.
pub const EXPONENT_TOL: f64 = 0.05;
/// Absolute tolerance for equality of two body velocity limits.
pub const VELOCITY_EQ_TOL: f64 = 1e-3;
/// Minimum fraction of monotone window steps for a trend.
pub const TREND_FRACTION: f64 = 0.95;
/// Running-max exponent of `R(t)` at or below which a motion is bounded.
pub const BOUNDED_EXPONENT: f64 = 0.25;
/// Minimum nodes in the trailing fit window.
pub const MIN_FIT_NODES: usize = 16;
const TREND_WINDOWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Parabolic,
    Hyperbolic,
    PartiallyHyperbolic,
    Superhyperbolic,
    Bounded,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExponent {
    pub i: usize,
    pub j: usize,
    /// Least-squares slope of `ln r_ij` against `ln t`.
    pub exponent: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitShape {
    /// `a` in `x(t) = a t + b t^{2/3} + c`, flat configuration layout.
    pub a: Vec<f64>,
    pub norm: f64,
    /// Weighted RMS of the regression residual, in mass norm.
    pub residual: f64,
    /// Log-log slope of `‖x(t) - a t - c‖` over the window; the
    /// construction predicts about `2/3`, but only `<= 1` is required.
    pub remainder_exponent: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperhyperbolicEvidence {
    pub detected: bool,
    /// `(R/t)(end) / (R/t)(start)` over the sampled windows.
    pub r_over_t_growth: f64,
    /// `r(start) / r(end)`.
    pub min_separation_shrink: f64,
    pub r_over_t_increasing_fraction: f64,
    pub min_separation_decreasing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub class: MotionClass,
    pub horizon: f64,
    pub energy: f64,
    pub limit_shape: Option<LimitShape>,
    pub growth_exponents: Vec<PairExponent>,
    /// Running-max exponent of `R(t)`.
    pub max_separation_exponent: f64,
    /// Fraction of window steps over which `R(t)/t` increased.
    pub r_over_t_trend: f64,
    pub superhyperbolic: Option<SuperhyperbolicEvidence>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExpansion {
    pub i: usize,
    pub j: usize,
    pub exponent: f64,
    pub increasing_fraction: f64,
    pub expansive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansivenessReport {
    pub pairs: Vec<PairExpansion>,
    pub all_expansive: bool,
}

/// Node indices of the trailing half of the horizon.
fn trailing_half(tr: &Trajectory) -> Vec<usize> {
    let t0 = tr.times[0];
    let cut = t0 + 0.5 * (tr.horizon() - t0);
    (0..tr.len()).filter(|&k| tr.times[k] >= cut && tr.times[k] > 0.0).collect()
}

/// Trapezoid weights of the selected nodes.
fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|k| {
            let lo = if k > 0 { times[k - 1] } else { times[k] };
            let hi = if k + 1 < n { times[k + 1] } else { times[k] };
            0.5 * (hi - lo)
        })
        .collect()
}

/// Weighted least squares of `y ≈ p + q x`; returns `(p, q, rms residual)`.
fn line_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((a, b), c) in x.iter().zip(y).zip(w) {
        sxx += c * (a - mx) * (a - mx);
        sxy += c * (a - mx) * (b - my);
    }
    let q = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let p = my - q * mx;
    let rss: f64 = x.iter().zip(y).zip(w).map(|((a, b), c)| c * (b - p - q * a).powi(2)).sum();
    (p, q, (rss / sw).sqrt())
}

/// Solves the small symmetric system `A z = b` by Gaussian elimination.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut z = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * z[k]).sum();
        z[row] = (b[row] - s) / a[row][row];
    }
    z
}

/// Pair exponents on the trailing half of the horizon.
pub fn growth_exponents(tr: &Trajectory) -> Vec<PairExponent> {
    let idx = trailing_half(tr);
    if idx.len() < 2 {
        return Vec::new();
    }
    let times: Vec<f64> = idx.iter().map(|&k| tr.times[k]).collect();
    let w = trapezoid_weights(&times);
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let s = &tr.system;
    s.pair_labels()
        .into_iter()
        .map(|(i, j)| {
            let lr: Vec<f64> = idx.iter().map(|&k| s.pair_distance(&tr.positions[k], i, j).ln()).collect();
            let (_, q, res) = line_fit(&lt, &lr, &w);
            PairExponent { i, j, exponent: q, residual: res }
        })
        .collect()
}

/// Regression of the positions on the trailing half against
/// `t, t^{2/3}, 1`. `None` when fewer than [`MIN_FIT_NODES`] nodes remain.
pub fn estimate_limit_shape(tr: &Trajectory) -> Option<LimitShape> {
    let idx = trailing_half(tr);
    if idx.len() < MIN_FIT_NODES {
        return None;
    }
    let s = &tr.system;
    let horizon = tr.horizon();
    let times: Vec<f64> = idx.iter().map(|&k| tr.times[k]).collect();
    let w = trapezoid_weights(&times);
    let basis: Vec<[f64; 3]> = times.iter().map(|t| [t / horizon, (t / horizon).powf(2.0 / 3.0), 1.0]).collect();
    let mut gram = [[0.0; 3]; 3];
    for (b, wk) in basis.iter().zip(&w) {
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] += wk * b[i] * b[j];
            }
        }
    }
    let n = s.len();
    let mut a = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut coef = vec![[0.0; 3]; n];
    for q in 0..n {
        let mut rhs = [0.0; 3];
        for ((b, wk), &k) in basis.iter().zip(&w).zip(&idx) {
            for i in 0..3 {
                rhs[i] += wk * b[i] * tr.positions[k][q];
            }
        }
        let z = solve3(gram, rhs);
        a[q] = z[0] / horizon;
        c[q] = z[2];
        coef[q] = z;
    }
    let sw: f64 = w.iter().sum();
    let mut rss = 0.0;
    let mut rem = Vec::with_capacity(idx.len());
    for ((b, wk), &k) in basis.iter().zip(&w).zip(&idx) {
        let fit: Vec<f64> = (0..n).map(|q| coef[q][0] * b[0] + coef[q][1] * b[1] + coef[q][2]).collect();
        rss += wk * s.mass_distance_unchecked(&tr.positions[k], &fit).powi(2);
        let lin: Vec<f64> = (0..n).map(|q| a[q] * tr.times[k] + c[q]).collect();
        rem.push(s.mass_distance_unchecked(&tr.positions[k], &lin).max(f64::MIN_POSITIVE).ln());
    }
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (_, remainder_exponent, _) = line_fit(&lt, &rem, &w);
    let norm = s.mass_norm_unchecked(&a);
    Some(LimitShape { a, norm, residual: (rss / sw).sqrt(), remainder_exponent, horizon })
}

/// Values of `f` at the ends of `TREND_WINDOWS` equal time windows covering
/// `[from, horizon]`.
fn window_samples(tr: &Trajectory, from: f64, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let horizon = tr.horizon();
    (0..=TREND_WINDOWS)
        .map(|w| {
            let t = from + (horizon - from) * w as f64 / TREND_WINDOWS as f64;
            f(tr.nearest_index(t))
        })
        .collect()
}

fn increasing_fraction(v: &[f64]) -> f64 {
    let steps = (v.len().max(2) - 1) as f64;
    v.windows(2).filter(|w| w[1] > w[0]).count() as f64 / steps
}

fn first_positive_time(tr: &Trajectory) -> f64 {
    tr.times.iter().copied().find(|t| *t > 0.0).unwrap_or(tr.horizon())
}

/// Detector for `R(t)/t → ∞` together with `r(t) → 0`: both must move
/// monotonically by a factor of at least 10 across the horizon.
pub fn superhyperbolic_probe(tr: &Trajectory) -> SuperhyperbolicEvidence {
    let s = &tr.system;
    let from = first_positive_time(tr);
    let ratio = window_samples(tr, from, |k| s.min_max_unchecked(&tr.positions[k]).1 / tr.times[k]);
    let rmin = window_samples(tr, from, |k| s.min_max_unchecked(&tr.positions[k]).0);
    let growth = ratio.last().unwrap() / ratio[0];
    let shrink = rmin[0] / rmin.last().unwrap();
    let up = increasing_fraction(&ratio);
    let neg: Vec<f64> = rmin.iter().map(|v| -v).collect();
    let down = increasing_fraction(&neg);
    SuperhyperbolicEvidence {
        detected: growth >= 10.0 && shrink >= 10.0 && up >= TREND_FRACTION && down >= TREND_FRACTION,
        r_over_t_growth: growth,
        min_separation_shrink: shrink,
        r_over_t_increasing_fraction: up,
        min_separation_decreasing_fraction: down,
    }
}

/// Exponent of the running maximum of `R(t)` on the trailing half.
fn max_separation_exponent(tr: &Trajectory) -> f64 {
    let idx = trailing_half(tr);
    if idx.len() < 2 {
        return 0.0;
    }
    let s = &tr.system;
    let mut running = 0.0f64;
    for k in 0..idx[0] {
        running = running.max(s.min_max_unchecked(&tr.positions[k]).1);
    }
    let mut lr = Vec::with_capacity(idx.len());
    for &k in &idx {
        running = running.max(s.min_max_unchecked(&tr.positions[k]).1);
        lr.push(running.ln());
    }
    let times: Vec<f64> = idx.iter().map(|&k| tr.times[k]).collect();
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    line_fit(&lt, &lr, &trapezoid_weights(&times)).1
}

/// Per-pair growth: a pair is expansive when its distance increases over at
/// least [`TREND_FRACTION`] of the trailing windows and its exponent is at
/// least `2/3 - EXPONENT_TOL`.
pub fn expansiveness_check(tr: &Trajectory) -> ExpansivenessReport {
    let s = &tr.system;
    let t0 = tr.times[0];
    let from = t0 + 0.5 * (tr.horizon() - t0);
    let exps = growth_exponents(tr);
    let pairs: Vec<PairExpansion> = s
        .pair_labels()
        .into_iter()
        .enumerate()
        .map(|(p, (i, j))| {
            let r = window_samples(tr, from, |k| s.pair_distance(&tr.positions[k], i, j));
            let frac = increasing_fraction(&r);
            let exponent = exps.get(p).map_or(f64::NAN, |e| e.exponent);
            PairExpansion { i, j, exponent, increasing_fraction: frac, expansive: frac >= TREND_FRACTION && exponent >= 2.0 / 3.0 - EXPONENT_TOL }
        })
        .collect();
    let all_expansive = !pairs.is_empty() && pairs.iter().all(|p| p.expansive);
    ExpansivenessReport { pairs, all_expansive }
}

/// `ε_a = 0.02 · max(1, √(2h))`.
pub fn limit_shape_tolerance(h: f64) -> f64 {
    0.02 * (2.0 * h.max(0.0)).sqrt().max(1.0)
}

fn body_limits_distinct(system: &MassSystem, a: &[f64]) -> (bool, bool) {
    let d = system.dimension();
    let mut all_distinct = true;
    let mut any_equal = false;
    for (i, j) in system.pair_labels() {
        let gap = (0..d).map(|c| (a[i * d + c] - a[j * d + c]).powi(2)).sum::<f64>().sqrt();
        if gap > VELOCITY_EQ_TOL {
            continue;
        }
        all_distinct = false;
        any_equal = true;
    }
    (all_distinct, any_equal)
}

/// Decision tree: bounded, then superhyperbolic, then the limit shape.
/// Inconsistent evidence yields `Unresolved`.
pub fn classify(tr: &Trajectory) -> AsymptoticReport {
    let mut report = AsymptoticReport {
        class: MotionClass::Unresolved,
        horizon: tr.horizon(),
        energy: tr.energy,
        limit_shape: None,
        growth_exponents: growth_exponents(tr),
        max_separation_exponent: f64::NAN,
        r_over_t_trend: f64::NAN,
        superhyperbolic: None,
        notes: Vec::new(),
    };
    if tr.termination == Termination::CollisionDetected {
        report.notes.push("trajectory ends in a collision".into());
        return report;
    }
    if trailing_half(tr).len() < MIN_FIT_NODES {
        report.notes.push(format!("horizon too short: fewer than {MIN_FIT_NODES} nodes in the fit window"));
        return report;
    }
    let s = &tr.system;
    report.max_separation_exponent = max_separation_exponent(tr);
    let probe = superhyperbolic_probe(tr);
    report.r_over_t_trend = probe.r_over_t_increasing_fraction;
    let detected = probe.detected;
    report.superhyperbolic = Some(probe);

    if report.max_separation_exponent <= BOUNDED_EXPONENT && !detected {
        report.class = MotionClass::Bounded;
        return report;
    }
    if detected {
        report.class = MotionClass::Superhyperbolic;
        return report;
    }
    let Some(shape) = estimate_limit_shape(tr) else {
        report.notes.push("limit shape fit failed".into());
        return report;
    };
    let h = tr.energy;
    let eps = limit_shape_tolerance(h);
    let class = if shape.norm <= eps {
        MotionClass::Parabolic
    } else {
        match body_limits_distinct(s, &shape.a) {
            (true, _) => MotionClass::Hyperbolic,
            _ => MotionClass::PartiallyHyperbolic,
        }
    };
    let in_window = report
        .growth_exponents
        .iter()
        .all(|e| e.exponent >= 2.0 / 3.0 - EXPONENT_TOL && e.exponent <= 1.0 + EXPONENT_TOL);
    let mut conflict = None;
    match class {
        MotionClass::Parabolic if h.abs() > 0.5 * eps * eps => conflict = Some(format!("parabolic shape but h = {h:e}")),
        MotionClass::Hyperbolic if h <= 0.0 => conflict = Some(format!("hyperbolic shape but h = {h:e}")),
        MotionClass::Parabolic | MotionClass::Hyperbolic if !in_window => {
            conflict = Some("pair exponent outside [2/3, 1]".into())
        }
        _ => {}
    }
    report.limit_shape = Some(shape);
    match conflict {
        Some(note) => report.notes.push(note),
        None => report.class = class,
    }
    report
}

/// Pair exponents as columns `i j exponent residual`.
pub fn write_exponent_table<W: Write>(exps: &[PairExponent], mut out: W) -> io::Result<()> {
    writeln!(out, "# i j exponent residual")?;
    for e in exps {
        writeln!(out, "{} {} {:.16e} {:.16e}", e.i, e.j, e.exponent, e.residual)?;
    }
    Ok(())
}
