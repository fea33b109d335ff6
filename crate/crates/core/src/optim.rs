//! Limited-memory BFGS with a user preconditioner, and golden-section search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Smooth objective for [`lbfgs`].
pub trait Objective {
    /// Writes the gradient into `grad` and returns the value, or `None` if
    /// `x` is outside the admissible region (the line search then shrinks).
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64>;

    /// Applies the initial inverse-Hessian approximation.
    fn precondition(&self, grad: &[f64], out: &mut [f64]) {
        out.copy_from_slice(grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `(gᵀ H₀ g)^{1/2} <= grad_tol · (1 + |f|)^{1/2}`.
    pub grad_tol: f64,
    pub armijo: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_iter: 5000, grad_tol: 1e-7, armijo: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    LineSearchFailed,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Preconditioned gradient norm `(gᵀ H₀ g)^{1/2}`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lbfgs<O: Objective>(obj: &mut O, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut hg = vec![0.0; n];
    let Some(mut f) = obj.evaluate(&x, &mut g) else {
        return LbfgsResult { x, value: f64::INFINITY, grad_norm: f64::INFINITY, iterations: 0, stop: StopReason::Infeasible };
    };
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut gamma = 1.0;
    let mut d = vec![0.0; n];
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory];
    let mut failures = 0;
    let mut iter = 0;
    loop {
        obj.precondition(&g, &mut hg);
        let gnorm = dot(&g, &hg).max(0.0).sqrt();
        if gnorm <= opts.grad_tol * (1.0 + f.abs()).sqrt() {
            return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: iter, stop: StopReason::Converged };
        }
        if iter >= opts.max_iter {
            return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: iter, stop: StopReason::MaxIterations };
        }
        iter += 1;

        // two-loop recursion
        d.copy_from_slice(&g);
        for (slot, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[slot] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        obj.precondition(&d, &mut hg);
        d.iter_mut().zip(&hg).for_each(|(di, hi)| *di = gamma * hi);
        for (slot, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            let a = alpha_buf[slot];
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            gamma = 1.0;
            obj.precondition(&g, &mut hg);
            d.iter_mut().zip(&hg).for_each(|(di, hi)| *di = -hi);
            slope = dot(&g, &d);
        }

        // backtracking Armijo search; infeasible trials count as failures
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                xt[i] = x[i] + step * d[i];
            }
            if let Some(ft) = obj.evaluate(&xt, &mut gt) {
                if ft.is_finite() && ft <= f + opts.armijo * step * slope {
                    accepted = Some(ft);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else {
            if pairs.is_empty() {
                failures += 1;
            }
            if failures >= 2 || pairs.is_empty() {
                obj.precondition(&g, &mut hg);
                let gnorm = dot(&g, &hg).max(0.0).sqrt();
                return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: iter, stop: StopReason::LineSearchFailed };
            }
            pairs.clear();
            gamma = 1.0;
            continue;
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            obj.precondition(&y, &mut hg);
            let yhy = dot(&y, &hg);
            if yhy > 0.0 {
                gamma = sy / yhy;
            }
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Outcome of a one-dimensional minimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMinimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Finds `a < b < c` with `f(b) <= min(f(a), f(c))` by expanding geometrically
/// from `x0` (positive arguments). Returns the triple and `f(b)`.
pub fn bracket_positive<F, E>(mut f: F, x0: f64, factor: f64, max_expansions: usize) -> Result<Option<([f64; 3], f64, usize)>, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let mut evals = 0;
    let mut eval = |x: f64, evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut b = x0;
    let mut fb = eval(b, &mut evals)?;
    let mut c = b * factor;
    let mut fc = eval(c, &mut evals)?;
    let mut a = b / factor;
    let mut fa = eval(a, &mut evals)?;
    for _ in 0..max_expansions {
        if fb <= fa && fb <= fc {
            return Ok(Some(([a, b, c], fb, evals)));
        }
        if fc < fb {
            // minimum lies to the right
            a = b;
            fa = fb;
            b = c;
            fb = fc;
            c = b * factor;
            fc = eval(c, &mut evals)?;
        } else {
            c = b;
            fc = fb;
            b = a;
            fb = fa;
            a = b / factor;
            fa = eval(a, &mut evals)?;
        }
    }
    let _ = (fa, fc);
    Ok(None)
}

/// Golden-section search on the bracket `a < b < c` in the variable
/// `ln x`, stopping when the bracket is within `rel_tol` relative width.
pub fn golden_log<F, E>(mut f: F, bracket: [f64; 3], fb: f64, rel_tol: f64) -> Result<LineMinimum, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let (mut lo, mut mid, mut hi) = (bracket[0].ln(), bracket[1].ln(), bracket[2].ln());
    let mut fmid = fb;
    let mut evals = 0;
    let tol = rel_tol.max(1e-15);
    while hi - lo > tol {
        let probe = if mid - lo > hi - mid { mid - (1.0 - INV_PHI) * (mid - lo) } else { mid + (1.0 - INV_PHI) * (hi - mid) };
        let fp = f(probe.exp())?;
        evals += 1;
        if fp < fmid {
            if probe < mid {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = probe;
            fmid = fp;
        } else if probe < mid {
            lo = probe;
        } else {
            hi = probe;
        }
    }
    Ok(LineMinimum { x: mid.exp(), value: fmid, evaluations: evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosen;

    impl Objective for Rosen {
        fn evaluate(&mut self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Some((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        }
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let r = lbfgs(&mut Rosen, vec![-1.2, 1.0], &LbfgsOptions { grad_tol: 1e-10, ..Default::default() });
        assert!(r.converged(), "{:?}", r.stop);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
    }

    struct Walled;

    impl Objective for Walled {
        // minimum at 0.3 but x < 0.2 is forbidden
        fn evaluate(&mut self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            if x[0] < 0.2 {
                return None;
            }
            g[0] = 2.0 * (x[0] - 0.3);
            Some((x[0] - 0.3).powi(2))
        }
    }

    #[test]
    fn lbfgs_backs_off_forbidden_region() {
        let r = lbfgs(&mut Walled, vec![5.0], &LbfgsOptions::default());
        assert!(r.converged());
        assert!((r.x[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn golden_finds_log_minimum() {
        // minimum of t + 4/t at t = 2
        let f = |t: f64| Ok::<_, ()>(t + 4.0 / t);
        let (br, fb, _) = bracket_positive(f, 0.01, 2.0, 60).unwrap().unwrap();
        let m = golden_log(f, br, fb, 1e-9).unwrap();
        assert!((m.x - 2.0).abs() < 1e-7, "{}", m.x);
        assert!((m.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bracket_reports_monotone_failure() {
        let f = |t: f64| Ok::<_, ()>(-t);
        assert!(bracket_positive(f, 1.0, 2.0, 10).unwrap().is_none());
    }
}
