//! Discrete curves in configuration space.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::MassSystem;

/// Configurations at strictly increasing times. The endpoints are the
/// boundary data of a minimization and stay fixed while it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    times: Vec<f64>,
    nodes: Vec<Vec<f64>>,
}

impl DiscretePath {
    pub fn new(times: Vec<f64>, nodes: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != nodes.len() {
            return Err(invalid(format!(
                "path needs matching non-empty times and nodes ({} vs {})",
                times.len(),
                nodes.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(invalid("path times must be finite and strictly increasing"));
        }
        let width = nodes[0].len();
        if let Some(bad) = nodes.iter().find(|n| n.len() != width) {
            return Err(Error::Dimension { expected: width, got: bad.len() });
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite path coordinate"));
        }
        Ok(Self { times, nodes })
    }

    /// Straight segment from `x` to `y` sampled at `times`.
    pub fn linear(x: &[f64], y: &[f64], times: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension { expected: x.len(), got: y.len() });
        }
        let (t0, t1) = (times[0], *times.last().unwrap());
        let span = t1 - t0;
        let nodes = times
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if k == 0 {
                    return x.to_vec();
                }
                if k + 1 == times.len() {
                    return y.to_vec();
                }
                let s = (t - t0) / span;
                x.iter().zip(y).map(|(a, b)| a + s * (b - a)).collect()
            })
            .collect();
        Self::new(times, nodes)
    }

    pub fn check_system(&self, system: &MassSystem) -> Result<()> {
        system.check_shape(&self.nodes[0])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.nodes
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k]
    }

    /// Number of segments `M`.
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn duration(&self) -> f64 {
        self.t_end() - self.t_start()
    }

    pub fn start(&self) -> &[f64] {
        &self.nodes[0]
    }

    pub fn end(&self) -> &[f64] {
        self.nodes.last().unwrap()
    }

    pub fn is_uniform(&self, rel: f64) -> bool {
        let dt = self.duration() / self.segments().max(1) as f64;
        self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= rel * dt)
    }

    /// Same geometric curve traversed backwards over the same time span.
    pub fn reversed(&self) -> Self {
        let (a, b) = (self.t_start(), self.t_end());
        let times = self.times.iter().rev().map(|t| a + b - t).collect();
        let nodes = self.nodes.iter().rev().cloned().collect();
        Self { times, nodes }
    }

    /// Same nodes on a new time grid with the same number of points.
    pub fn with_times(&self, times: Vec<f64>) -> Result<Self> {
        Self::new(times, self.nodes.clone())
    }

    /// Sub-path between node indices `a <= b`.
    pub fn slice(&self, a: usize, b: usize) -> Result<Self> {
        if a > b || b >= self.nodes.len() {
            return Err(invalid(format!("node range {a}..={b} outside path")));
        }
        Self::new(self.times[a..=b].to_vec(), self.nodes[a..=b].to_vec())
    }

    /// Piecewise-linear resampling in normalized time: node `k` of the result
    /// sits at fraction `(t_k - t_0)/(t_M - t_0)` of this path.
    pub fn resample_normalized(&self, times: Vec<f64>) -> Result<Self> {
        let (a, span) = (times[0], times[times.len() - 1] - times[0]);
        let (t0, own) = (self.t_start(), self.duration());
        let last = times.len() - 1;
        let mut nodes = Vec::with_capacity(times.len());
        let mut j = 0;
        for (k, t) in times.iter().enumerate() {
            if k == 0 {
                nodes.push(self.start().to_vec());
                continue;
            }
            if k == last {
                nodes.push(self.end().to_vec());
                continue;
            }
            let s = t0 + (t - a) / span * own;
            while j + 2 < self.times.len() && self.times[j + 1] < s {
                j += 1;
            }
            let (ta, tb) = (self.times[j], self.times[j + 1]);
            let w = ((s - ta) / (tb - ta)).clamp(0.0, 1.0);
            let (p, q) = (&self.nodes[j], &self.nodes[j + 1]);
            nodes.push(p.iter().zip(q).map(|(u, v)| u + w * (v - u)).collect());
        }
        Self::new(times, nodes)
    }

    /// Joins `other` onto the end of `self`; the shared node must agree.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let gap: f64 = self.end().iter().zip(other.start()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-9 * (1.0 + self.end().iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            return Err(invalid(format!("paths do not meet (gap {gap:e})")));
        }
        let shift = self.t_end() - other.t_start();
        let mut times = self.times.clone();
        let mut nodes = self.nodes.clone();
        times.extend(other.times[1..].iter().map(|t| t + shift));
        nodes.extend(other.nodes[1..].iter().cloned());
        Self::new(times, nodes)
    }
}

pub fn uniform_times(t0: f64, t1: f64, segments: usize) -> Vec<f64> {
    let dt = (t1 - t0) / segments as f64;
    (0..=segments).map(|k| if k == segments { t1 } else { t0 + k as f64 * dt }).collect()
}

/// Local time scale at one end of a graded grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndScale {
    /// Node density `1/(τ + t)` at distance `t` from the end.
    Regular(f64),
    /// Endpoint on the collision set: density `t^{-2/3}/(t^{1/3} + τ^{1/3})`,
    /// so nodes are evenly spaced in `t^{1/3}` near the end and the
    /// ejection `r ~ t^{2/3}` is smooth in the grid parameter.
    Ejection(f64),
}

impl EndScale {
    /// Cumulative node weight over distance `u` from the end.
    fn weight(self, u: f64) -> f64 {
        match self {
            EndScale::Regular(tau) => (u / tau).ln_1p(),
            EndScale::Ejection(tau) => 3.0 * (u / tau).cbrt().ln_1p(),
        }
    }
}

/// Grid on `[0, duration]` with node density `1/(τ_a + t) + 1/(τ_b + T - t)`,
/// so that encounters near either endpoint are resolved on their own time
/// scale. With `τ ≫ T` the grid is close to uniform.
pub fn graded_times(duration: f64, tau_a: f64, tau_b: f64, segments: usize) -> Vec<f64> {
    graded_times_ends(duration, EndScale::Regular(tau_a), EndScale::Regular(tau_b), segments)
}

/// Graded grid with an explicit scale law at each end.
pub fn graded_times_ends(duration: f64, a: EndScale, b: EndScale, segments: usize) -> Vec<f64> {
    let t = duration;
    let wb = b.weight(t);
    let w = |s: f64| a.weight(s) + wb - b.weight(t - s);
    let total = w(t);
    let mut out = Vec::with_capacity(segments + 1);
    out.push(0.0);
    let mut lo = 0.0;
    for k in 1..segments {
        let target = total * k as f64 / segments as f64;
        let (mut x, mut y) = (lo, t);
        for _ in 0..200 {
            let mid = 0.5 * (x + y);
            if w(mid) < target {
                x = mid;
            } else {
                y = mid;
            }
            if y - x <= 1e-15 * mid.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        lo = 0.5 * (x + y);
        out.push(lo);
    }
    out.push(t);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_grid_is_monotone_and_hits_endpoints() {
        let g = graded_times(100.0, 1e-6, 50.0, 256);
        assert_eq!(g.len(), 257);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[256], 100.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(g[1] < 1e-3);
    }

    #[test]
    fn graded_grid_is_nearly_uniform_for_slow_endpoints() {
        let g = graded_times(1.0, 1e6, 1e6, 10);
        for (k, t) in g.iter().enumerate() {
            assert!((t - k as f64 / 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ejection_end_spaces_nodes_by_cube_root() {
        let g = graded_times_ends(1.0, EndScale::Ejection(1e6), EndScale::Regular(1e6), 100);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        // far from both scales the grid is uniform in t^{1/3}
        for k in [1usize, 2, 5, 10] {
            let expect = (k as f64 / 100.0).powi(3) * g[100];
            assert!((g[k] / expect - 1.0).abs() < 0.05, "{k}: {} vs {expect}", g[k]);
        }
    }

    #[test]
    fn reversal_is_an_involution() {
        let p = DiscretePath::linear(&[0.0, 1.0], &[2.0, 3.0], graded_times(2.0, 0.1, 1.0, 8)).unwrap();
        let r = p.reversed();
        assert_eq!(r.start(), p.end());
        let rr = r.reversed();
        for (a, b) in rr.times().iter().zip(p.times()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(rr.nodes(), p.nodes());
    }

    #[test]
    fn resampling_preserves_linear_paths() {
        let p = DiscretePath::linear(&[0.0, 0.0], &[2.0, 4.0], uniform_times(0.0, 1.0, 7)).unwrap();
        let q = p.resample_normalized(graded_times(3.0, 0.5, 2.0, 11)).unwrap();
        for (t, node) in q.times().iter().zip(q.nodes()) {
            let s = t / 3.0;
            assert!((node[0] - 2.0 * s).abs() < 1e-12 && (node[1] - 4.0 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_increasing_times() {
        assert!(DiscretePath::new(vec![0.0, 0.0], vec![vec![0.0], vec![1.0]]).is_err());
    }
}
