//! Discrete Lagrangian action, fixed- and free-time minimizers, and the
//! action potentials `φ(x, y, T)` and `φ_h(x, y)`.
//!
//! The quadrature uses forward-difference velocities and the midpoint rule
//! for the potential on each segment:
//!
//! `A_h = Σ_k ½‖q_{k+1} - q_k‖² / Δt_k + Δt_k U((q_k + q_{k+1})/2) + h T`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::MassSystem;
use crate::optim::{bracket_positive, golden_log, lbfgs, LbfgsOptions, Objective, StopReason};
use crate::path::{graded_times_ends, uniform_times, DiscretePath, EndScale};

pub use crate::dynamics::lagrangian;

/// Relative barrier distance: trial paths may not bring two bodies closer
/// than `SAFE_FACTOR` times the endpoint scale.
pub const SAFE_FACTOR: f64 = 1e-6;

/// Lower floor on the endpoint time scale of a graded grid, relative to
/// the duration.
const TAU_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    /// Refined toward endpoints with close encounters, see [`graded_times_ends`].
    Graded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub segments: usize,
    pub grid: GridKind,
    /// Perturbed restarts in addition to the straight-line start.
    pub restarts: usize,
    /// Restart amplitude relative to the endpoint scale.
    pub perturbation: f64,
    pub seed: u64,
    pub lbfgs: LbfgsOptions,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            segments: 256,
            grid: GridKind::Graded,
            restarts: 3,
            perturbation: 0.1,
            seed: 0,
            lbfgs: LbfgsOptions { grad_tol: 1e-6, max_iter: 4000, ..LbfgsOptions::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub path: DiscretePath,
    /// Fixed-time action `A_0` of `path`.
    pub action_value: f64,
    /// `(gᵀ K⁻¹ g)^{1/2}` with `K` the kinetic Hessian.
    pub gradient_norm: f64,
    pub tolerance: f64,
    pub converged: bool,
    /// Minimum mutual distance over interior nodes.
    pub min_separation: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

fn endpoint_scale(system: &MassSystem, x: &[f64], y: &[f64]) -> f64 {
    let rx = system.min_max_unchecked(x).1;
    let ry = system.min_max_unchecked(y).1;
    let dist = system.mass_distance_unchecked(x, y) / system.total_mass().sqrt();
    rx.max(ry).max(dist).max(f64::MIN_POSITIVE)
}

/// Node times on `[0, duration]` for a path from `x` to `y`.
pub fn time_grid(system: &MassSystem, x: &[f64], y: &[f64], duration: f64, segments: usize, grid: GridKind) -> Vec<f64> {
    match grid {
        GridKind::Uniform => uniform_times(0.0, duration, segments),
        GridKind::Graded => {
            let scale = |z: &[f64]| match system.dynamical_time(z) {
                t if t > 0.0 => EndScale::Regular(t.max(TAU_FLOOR * duration)),
                _ => EndScale::Ejection(duration),
            };
            graded_times_ends(duration, scale(x), scale(y), segments)
        }
    }
}

/// Quadrature of the action over a fixed-endpoint problem. Endpoints may lie
/// on the collision set; interior nodes and midpoints are guarded.
struct ActionProblem<'a> {
    system: &'a MassSystem,
    n: usize,
    dt: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
    mass: Vec<f64>,
    /// Barrier per node, then per segment midpoint.
    node_delta: Vec<f64>,
    mid_delta: Vec<f64>,
    // forward-elimination factors of the unit-mass kinetic matrix
    thomas_c: Vec<f64>,
    thomas_inv: Vec<f64>,
    mid: Vec<f64>,
    gmid: Vec<f64>,
}

impl<'a> ActionProblem<'a> {
    fn new(system: &'a MassSystem, times: &[f64], start: &[f64], end: &[f64], delta_safe: f64) -> Self {
        let n = system.len();
        let dt: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let m = dt.len();
        let mass = (0..n).map(|k| system.mass_of_coord(k)).collect();
        // near a collision endpoint the barrier follows the ejection law r ~ t^{2/3}
        let (t0, span) = (times[0], times[m] - times[0]);
        let (ea, eb) = (system.dynamical_time(start) == 0.0, system.dynamical_time(end) == 0.0);
        let barrier = |t: f64| {
            let mut f = 1.0f64;
            if ea {
                f = f.min(((t - t0) / span).powf(2.0 / 3.0));
            }
            if eb {
                f = f.min(((t0 + span - t) / span).powf(2.0 / 3.0));
            }
            delta_safe * f
        };
        let node_delta = times.iter().map(|&t| barrier(t)).collect();
        let mid_delta = times.windows(2).map(|w| barrier(0.5 * (w[0] + w[1]))).collect();
        // interior size P = M - 1; row j couples nodes j+1 with j and j+2
        let p = m.saturating_sub(1);
        let mut thomas_c = vec![0.0; p];
        let mut thomas_inv = vec![0.0; p];
        for j in 0..p {
            let diag = 1.0 / dt[j] + 1.0 / dt[j + 1];
            let lower = if j > 0 { -1.0 / dt[j] } else { 0.0 };
            let denom = diag - if j > 0 { lower * thomas_c[j - 1] } else { 0.0 };
            thomas_inv[j] = 1.0 / denom;
            thomas_c[j] = if j + 1 < p { (-1.0 / dt[j + 1]) / denom } else { 0.0 };
        }
        Self {
            system,
            n,
            dt,
            start: start.to_vec(),
            end: end.to_vec(),
            mass,
            node_delta,
            mid_delta,
            thomas_c,
            thomas_inv,
            mid: vec![0.0; n],
            gmid: vec![0.0; n],
        }
    }

    fn segments(&self) -> usize {
        self.dt.len()
    }

    fn node<'b>(&'b self, interior: &'b [f64], k: usize) -> &'b [f64] {
        let n = self.n;
        if k == 0 {
            &self.start
        } else if k == self.segments() {
            &self.end
        } else {
            &interior[(k - 1) * n..k * n]
        }
    }

    fn interior_min_separation(&self, interior: &[f64]) -> f64 {
        interior.chunks(self.n).map(|q| self.system.min_max_unchecked(q).0).fold(f64::INFINITY, f64::min)
    }

    /// Fixed-time action `A_0`; `None` when a guarded point is too close to
    /// the collision set.
    fn eval(&mut self, interior: &[f64], mut grad: Option<&mut [f64]>) -> Option<f64> {
        let n = self.n;
        let m = self.segments();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let guarded = interior.chunks(n).zip(&self.node_delta[1..]).all(|(q, d)| self.system.min_max_unchecked(q).0 >= *d);
        if !guarded {
            return None;
        }
        let mut mid = std::mem::take(&mut self.mid);
        let mut gmid = std::mem::take(&mut self.gmid);
        let mut total = 0.0;
        let mut ok = true;
        for k in 0..m {
            let a = self.node(interior, k);
            let b = self.node(interior, k + 1);
            let dt = self.dt[k];
            let mut kin = 0.0;
            for c in 0..n {
                let dq = b[c] - a[c];
                kin += self.mass[c] * dq * dq;
                mid[c] = 0.5 * (a[c] + b[c]);
            }
            gmid.iter_mut().for_each(|v| *v = 0.0);
            let (u, rmin) = self.system.potential_sweep(&mid, 0.5 * dt, grad.is_some().then_some(&mut gmid[..]));
            if rmin < self.mid_delta[k] || !u.is_finite() {
                ok = false;
                break;
            }
            total += 0.5 * kin / dt + dt * u;
            if let Some(g) = grad.as_deref_mut() {
                if k > 0 {
                    let ga = &mut g[(k - 1) * n..k * n];
                    for c in 0..n {
                        ga[c] += -self.mass[c] * (b[c] - a[c]) / dt + gmid[c];
                    }
                }
                if k + 1 < m {
                    let gb = &mut g[k * n..(k + 1) * n];
                    for c in 0..n {
                        gb[c] += self.mass[c] * (b[c] - a[c]) / dt + gmid[c];
                    }
                }
            }
        }
        self.mid = mid;
        self.gmid = gmid;
        ok.then_some(total)
    }
}

impl Objective for ActionProblem<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        self.eval(x, Some(grad))
    }

    /// Applies `K⁻¹`, `K` being the tridiagonal kinetic Hessian.
    fn precondition(&self, g: &[f64], out: &mut [f64]) {
        let n = self.n;
        let p = self.thomas_c.len();
        out.copy_from_slice(g);
        for c in 0..n {
            let inv_m = 1.0 / self.mass[c];
            for j in 0..p {
                let prev = if j > 0 { out[(j - 1) * n + c] } else { 0.0 };
                let lower = if j > 0 { -1.0 / self.dt[j] } else { 0.0 };
                out[j * n + c] = (out[j * n + c] - lower * prev) * self.thomas_inv[j];
            }
            for j in (0..p.saturating_sub(1)).rev() {
                out[j * n + c] -= self.thomas_c[j] * out[(j + 1) * n + c];
            }
            for j in 0..p {
                out[j * n + c] *= inv_m;
            }
        }
    }
}

fn check_path(system: &MassSystem, path: &DiscretePath) -> Result<()> {
    path.check_system(system)?;
    for x in path.nodes() {
        system.potential_energy(x)?;
    }
    Ok(())
}

fn flatten_interior(path: &DiscretePath) -> Vec<f64> {
    let m = path.segments();
    path.nodes()[1..m].iter().flatten().copied().collect()
}

fn rebuild(path: &DiscretePath, n: usize, interior: &[f64]) -> Result<DiscretePath> {
    let m = path.segments();
    let mut nodes = Vec::with_capacity(m + 1);
    nodes.push(path.start().to_vec());
    nodes.extend(interior.chunks(n).map(|c| c.to_vec()));
    nodes.push(path.end().to_vec());
    DiscretePath::new(path.times().to_vec(), nodes)
}

/// Discrete `A_h` of a path whose nodes all lie off the collision set.
pub fn discrete_action(system: &MassSystem, path: &DiscretePath, h: f64) -> Result<f64> {
    check_path(system, path)?;
    if path.segments() == 0 {
        return Ok(0.0);
    }
    let mut prob = ActionProblem::new(system, path.times(), path.start(), path.end(), 0.0);
    let a = prob
        .eval(&flatten_interior(path), None)
        .ok_or_else(|| invalid("segment midpoint on the collision set"))?;
    Ok(a + h * path.duration())
}

/// Gradient of [`discrete_action`] with respect to the interior nodes.
pub fn discrete_action_gradient(system: &MassSystem, path: &DiscretePath, _h: f64) -> Result<Vec<Vec<f64>>> {
    check_path(system, path)?;
    let m = path.segments();
    if m < 2 {
        return Ok(Vec::new());
    }
    let n = system.len();
    let mut prob = ActionProblem::new(system, path.times(), path.start(), path.end(), 0.0);
    let mut g = vec![0.0; (m - 1) * n];
    prob.eval(&flatten_interior(path), Some(&mut g))
        .ok_or_else(|| invalid("segment midpoint on the collision set"))?;
    Ok(g.chunks(n).map(|c| c.to_vec()).collect())
}

/// Discrete momenta `(p(t_0), p(t_M))` of a path, from the boundary terms of
/// the discrete Euler–Lagrange equations. Exact solutions give `m v` to
/// second order in the step.
pub fn boundary_momenta(system: &MassSystem, path: &DiscretePath) -> Result<(Vec<f64>, Vec<f64>)> {
    path.check_system(system)?;
    let m = path.segments();
    if m == 0 {
        return Err(invalid("path has no segments"));
    }
    let n = system.len();
    let t = path.times();
    let side = |k: usize, sign: f64| -> Result<Vec<f64>> {
        let (a, b) = (path.node(k), path.node(k + 1));
        let dt = t[k + 1] - t[k];
        let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
        let mut g = vec![0.0; n];
        let (u, _) = system.potential_sweep(&mid, 0.5 * dt, Some(&mut g));
        if !u.is_finite() {
            return Err(invalid("segment midpoint on the collision set"));
        }
        Ok((0..n).map(|c| system.mass_of_coord(c) * (b[c] - a[c]) / dt + sign * g[c]).collect())
    };
    Ok((side(0, -1.0)?, side(m - 1, 1.0)?))
}

/// Velocities `(v(t_0), v(t_M))` from [`boundary_momenta`].
pub fn boundary_velocities(system: &MassSystem, path: &DiscretePath) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut p0, mut p1) = boundary_momenta(system, path)?;
    for c in 0..p0.len() {
        let m = system.mass_of_coord(c);
        p0[c] /= m;
        p1[c] /= m;
    }
    Ok((p0, p1))
}

fn validate_endpoints(system: &MassSystem, x: &[f64], y: &[f64]) -> Result<()> {
    system.check_finite(x)?;
    system.check_finite(y)?;
    Ok(())
}

/// Local minimization of the fixed-time action from `initial`, whose
/// endpoints are held fixed.
pub fn minimize_path(system: &MassSystem, initial: &DiscretePath, opts: &MinimizeOptions) -> Result<MinimizeReport> {
    initial.check_system(system)?;
    if initial.segments() < 2 {
        return Err(invalid("minimization needs at least two segments"));
    }
    let (x, y) = (initial.start(), initial.end());
    let delta = SAFE_FACTOR * endpoint_scale(system, x, y);
    let mut prob = ActionProblem::new(system, initial.times(), x, y, delta);
    let res = lbfgs(&mut prob, flatten_interior(initial), &opts.lbfgs);
    if res.stop == StopReason::Infeasible {
        return Err(Error::CollisionSingularity { i: 0, j: 0, separation: prob.interior_min_separation(&res.x) });
    }
    let min_separation = prob.interior_min_separation(&res.x);
    let tolerance = opts.lbfgs.grad_tol * (1.0 + res.value.abs()).sqrt();
    Ok(MinimizeReport {
        path: rebuild(initial, system.len(), &res.x)?,
        action_value: res.value,
        gradient_norm: res.grad_norm,
        tolerance,
        converged: res.converged(),
        min_separation,
        iterations: res.iterations,
        stop: res.stop,
    })
}

/// Straight line plus a smooth perturbation made of odd sine modes, which
/// are symmetric under time reversal so swapped endpoints see mirrored
/// starts.
fn perturbed_start(system: &MassSystem, line: &DiscretePath, restart: usize, amplitude: f64, seed: u64) -> Result<DiscretePath> {
    let n = system.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let modes = [1.0f64, 3.0, 5.0];
    let coef: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut c = [0.0; 3];
            for (slot, k) in c.iter_mut().zip(&modes) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *slot = z / k;
            }
            c
        })
        .collect();
    let (t0, span) = (line.t_start(), line.duration());
    let m = line.segments();
    let mut nodes = line.nodes().to_vec();
    for (k, node) in nodes.iter_mut().enumerate().take(m).skip(1) {
        let s = (line.times()[k] - t0) / span;
        for c in 0..n {
            let bump: f64 = modes.iter().zip(&coef[c]).map(|(k, a)| a * (k * std::f64::consts::PI * s).sin()).sum();
            node[c] += amplitude * bump;
        }
    }
    DiscretePath::new(line.times().to_vec(), nodes)
}

/// Straight segment from `x` to `y`. At a collision endpoint the fraction
/// covered grows like `t^{2/3}`, the ejection law, instead of linearly.
fn initial_line(system: &MassSystem, x: &[f64], y: &[f64], times: Vec<f64>) -> Result<DiscretePath> {
    let (ex, ey) = (system.dynamical_time(x) == 0.0, system.dynamical_time(y) == 0.0);
    if !ex && !ey {
        return DiscretePath::linear(x, y, times);
    }
    let (t0, span) = (times[0], times[times.len() - 1] - times[0]);
    let last = times.len() - 1;
    let nodes = times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let s = (t - t0) / span;
            let a = if ex { s.powf(2.0 / 3.0) } else { s };
            let b = if ey { (1.0 - s).powf(2.0 / 3.0) } else { 1.0 - s };
            let f = if k == last { 1.0 } else { a / (a + b) };
            x.iter().zip(y).map(|(p, q)| p + f * (q - p)).collect()
        })
        .collect();
    DiscretePath::new(times, nodes)
}

fn better(a: &MinimizeReport, b: &MinimizeReport) -> bool {
    a.action_value < b.action_value
}

/// Minimizer of the fixed-time action from `x` to `y` in time `duration`,
/// best over a straight-line start and `opts.restarts` perturbed starts.
pub fn fixed_time_minimizer(system: &MassSystem, x: &[f64], y: &[f64], duration: f64, opts: &MinimizeOptions) -> Result<MinimizeReport> {
    validate_endpoints(system, x, y)?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(invalid("duration must be positive"));
    }
    if opts.segments < 2 {
        return Err(invalid("need at least two segments"));
    }
    let times = time_grid(system, x, y, duration, opts.segments, opts.grid);
    let line = initial_line(system, x, y, times)?;
    let mut crossing = None;
    let mut best: Option<MinimizeReport> = match minimize_path(system, &line, opts) {
        Ok(rep) => Some(rep),
        Err(e @ Error::CollisionSingularity { .. }) => {
            crossing = Some(e);
            None
        }
        Err(e) => return Err(e),
    };
    let amplitude = opts.perturbation * endpoint_scale(system, x, y);
    for r in 1..=opts.restarts {
        // smaller bumps near a collision endpoint, larger ones around a crossing
        for amp in [1.0, 0.5, 0.25, 2.0, 4.0].map(|f| f * amplitude) {
            let start = perturbed_start(system, &line, r, amp, opts.seed)?;
            match minimize_path(system, &start, opts) {
                Ok(rep) => {
                    if best.as_ref().is_none_or(|b| better(&rep, b)) {
                        best = Some(rep);
                    }
                    break;
                }
                Err(e @ Error::CollisionSingularity { .. }) => crossing = Some(e),
                Err(e) => return Err(e),
            }
        }
    }
    // every start crossed the collision set
    best.ok_or_else(|| crossing.expect("a failed start records its error"))
}

/// Upper bound on `φ(x, y, T)` from [`fixed_time_minimizer`].
pub fn fixed_time_potential(system: &MassSystem, x: &[f64], y: &[f64], duration: f64, opts: &MinimizeOptions) -> Result<f64> {
    Ok(fixed_time_minimizer(system, x, y, duration, opts)?.action_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeTimeOptions {
    pub minimize: MinimizeOptions,
    /// Golden-section stopping width in `ln T`.
    pub rel_tol: f64,
    pub bracket_factor: f64,
    pub max_expansions: usize,
    /// Double the grid at the optimal duration until the value settles.
    pub refine: bool,
    pub refine_tol: f64,
    pub max_segments: usize,
    /// With an endpoint on the collision set the quadrature is first order;
    /// the value is then extrapolated from grids `M, 2M, 4M`.
    pub collision_extrapolation: bool,
}

impl Default for FreeTimeOptions {
    fn default() -> Self {
        Self {
            minimize: MinimizeOptions::default(),
            rel_tol: 1e-6,
            bracket_factor: 1.6,
            max_expansions: 60,
            refine: true,
            refine_tol: 1e-6,
            max_segments: 1024,
            collision_extrapolation: true,
        }
    }
}

impl FreeTimeOptions {
    /// Fixed grid of `segments`, no refinement.
    pub fn fixed_grid(segments: usize) -> Self {
        Self { minimize: MinimizeOptions { segments, ..MinimizeOptions::default() }, refine: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeTimeResult {
    /// Approximation of `φ_h(x, y)`.
    pub value: f64,
    pub duration: f64,
    /// Minimizer at the optimal duration; `None` when `x = y`.
    pub report: Option<MinimizeReport>,
    pub segments: usize,
    /// Grid refinement met its tolerance (always true without refinement).
    pub resolved: bool,
    pub converged: bool,
    /// Fixed-time evaluations made during the search.
    pub evaluations: usize,
    /// Evaluations with `φ(x,y,T) < ‖x-y‖²/(2T)`; nonzero means a bug.
    pub lower_bound_violations: usize,
    /// `value` is a Richardson extrapolation, see
    /// [`FreeTimeOptions::collision_extrapolation`].
    pub extrapolated: bool,
}

struct FreeTimeSearch<'a> {
    system: &'a MassSystem,
    h: f64,
    x: &'a [f64],
    y: &'a [f64],
    opts: FreeTimeOptions,
    warm: Option<DiscretePath>,
    best: Option<(f64, MinimizeReport)>,
    evaluations: usize,
    violations: usize,
    dist2: f64,
}

impl FreeTimeSearch<'_> {
    fn eval(&mut self, t: f64) -> Result<f64> {
        let mo = &self.opts.minimize;
        let times = time_grid(self.system, self.x, self.y, t, mo.segments, mo.grid);
        let cold = || match fixed_time_minimizer(self.system, self.x, self.y, t, &MinimizeOptions { restarts: 0, ..*mo }) {
            // the straight start crosses the collision set; go around it
            Err(Error::CollisionSingularity { .. }) => {
                fixed_time_minimizer(self.system, self.x, self.y, t, &MinimizeOptions { restarts: mo.restarts.max(1), ..*mo })
            }
            r => r,
        };
        let rep = match &self.warm {
            Some(w) => minimize_path(self.system, &w.resample_normalized(times)?, mo).or_else(|_| cold())?,
            None => cold()?,
        };
        self.evaluations += 1;
        if rep.action_value < self.dist2 / (2.0 * t) {
            self.violations += 1;
        }
        let f = rep.action_value + self.h * t;
        self.warm = Some(rep.path.clone());
        if self.best.as_ref().is_none_or(|(fb, _)| f < *fb) {
            self.best = Some((f, rep));
        }
        Ok(f)
    }

    fn search(&mut self, t0: f64) -> Result<()> {
        let mut factor = self.opts.bracket_factor;
        let (expansions, rel_tol) = (self.opts.max_expansions, self.opts.rel_tol);
        for _ in 0..2 {
            let found = bracket_positive(|t| self.eval(t), t0, factor, expansions)?;
            if let Some((br, fb, _)) = found {
                golden_log(|t| self.eval(t), br, fb, rel_tol)?;
                return Ok(());
            }
            factor *= factor;
        }
        Err(Error::Bracket(format!("no interior minimum found from T0 = {t0:e}")))
    }
}

/// Free-time potential `φ_h(x, y) = inf_T φ(x, y, T) + hT` for `h >= 0`.
pub fn free_time_potential(system: &MassSystem, h: f64, x: &[f64], y: &[f64], opts: &FreeTimeOptions) -> Result<FreeTimeResult> {
    if !(h >= 0.0 && h.is_finite()) {
        return Err(invalid(format!("energy must be finite and nonnegative, got {h}")));
    }
    validate_endpoints(system, x, y)?;
    if x == y {
        return Ok(FreeTimeResult {
            value: 0.0,
            duration: 0.0,
            report: None,
            segments: 0,
            resolved: true,
            converged: true,
            evaluations: 0,
            lower_bound_violations: 0,
            extrapolated: false,
        });
    }
    let dist = system.mass_distance_unchecked(x, y);
    let mut s = FreeTimeSearch {
        system,
        h,
        x,
        y,
        opts: *opts,
        warm: None,
        best: None,
        evaluations: 0,
        violations: 0,
        dist2: dist * dist,
    };
    let t0 = dist / (2.0 * h + 1.0).sqrt();
    s.search(t0)?;

    // restarts at the optimum; a better basin triggers one more search
    let (f_star, rep_star) = s.best.clone().expect("search evaluated at least once");
    let t_star = rep_star.path.duration();
    let mo = opts.minimize;
    if mo.restarts > 0 {
        let alt = fixed_time_minimizer(system, x, y, t_star, &mo)?;
        s.evaluations += 1 + mo.restarts;
        if alt.action_value + h * t_star < f_star - 1e-9 * (1.0 + f_star.abs()) {
            s.warm = Some(alt.path.clone());
            s.best = Some((alt.action_value + h * t_star, alt));
            s.search(t_star)?;
        }
    }
    let (mut value, mut rep) = s.best.take().expect("search evaluated at least once");
    let duration = rep.path.duration();
    let mut segments = mo.segments;
    let mut resolved = true;
    let mut extrapolated = false;
    let ejection = system.dynamical_time(x) == 0.0 || system.dynamical_time(y) == 0.0;
    let mut refine_at = |segments: usize, from: &DiscretePath| -> Result<MinimizeReport> {
        let times = time_grid(system, x, y, duration, segments, mo.grid);
        s.evaluations += 1;
        minimize_path(system, &from.resample_normalized(times)?, &mo)
    };
    if ejection && opts.collision_extrapolation {
        let r2 = refine_at(2 * segments, &rep.path)?;
        let r4 = refine_at(4 * segments, &r2.path)?;
        let (v1, v2, v4) = (value, r2.action_value + h * duration, r4.action_value + h * duration);
        // error expansion a/M + b/M²
        value = (8.0 * v4 - 6.0 * v2 + v1) / 3.0;
        resolved = (v4 - value).abs() <= 0.6 * (v2 - value).abs() + opts.refine_tol * value.abs();
        segments *= 4;
        rep = r4;
        extrapolated = true;
    } else if opts.refine {
        resolved = false;
        while 2 * segments <= opts.max_segments {
            segments *= 2;
            let fine = refine_at(segments, &rep.path)?;
            let v = fine.action_value + h * duration;
            let change = (v - value).abs();
            value = v;
            rep = fine;
            if change <= opts.refine_tol * value.abs() {
                resolved = true;
                break;
            }
        }
    }
    if rep.action_value < s.dist2 / (2.0 * duration) {
        s.violations += 1;
    }
    Ok(FreeTimeResult {
        value,
        duration,
        converged: rep.converged,
        report: Some(rep),
        segments,
        resolved,
        evaluations: s.evaluations,
        lower_bound_violations: s.violations,
        extrapolated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleRow {
    pub phi_xy: f64,
    pub phi_yz: f64,
    pub phi_xz: f64,
    pub phi_zx: f64,
    /// `φ_h(x,z) - φ_h(x,y) - φ_h(y,z)`.
    pub slack: f64,
    /// `|φ_h(x,z) - φ_h(z,x)|`.
    pub symmetry_gap: f64,
    /// `1 + max φ` over the row.
    pub scale: f64,
    pub lower_bound_violations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleAudit {
    pub h: f64,
    pub rows: Vec<TriangleRow>,
    /// Largest `slack / scale`.
    pub worst_slack: f64,
    /// Largest `symmetry_gap / scale`.
    pub worst_symmetry: f64,
    pub lower_bound_violations: usize,
}

impl TriangleAudit {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_slack <= tol && self.worst_symmetry <= tol && self.lower_bound_violations == 0
    }
}

pub type Triple = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Triangle inequality and symmetry of `φ_h` on each triple, evaluated in
/// parallel and reported in input order.
pub fn triangle_inequality_audit(system: &MassSystem, h: f64, triples: &[Triple], opts: &FreeTimeOptions) -> Result<TriangleAudit> {
    let rows: Vec<TriangleRow> = triples
        .par_iter()
        .map(|(x, y, z)| -> Result<TriangleRow> {
            let xy = free_time_potential(system, h, x, y, opts)?;
            let yz = free_time_potential(system, h, y, z, opts)?;
            let xz = free_time_potential(system, h, x, z, opts)?;
            let zx = free_time_potential(system, h, z, x, opts)?;
            let scale = 1.0 + xy.value.max(yz.value).max(xz.value).max(zx.value);
            Ok(TriangleRow {
                phi_xy: xy.value,
                phi_yz: yz.value,
                phi_xz: xz.value,
                phi_zx: zx.value,
                slack: xz.value - xy.value - yz.value,
                symmetry_gap: (xz.value - zx.value).abs(),
                scale,
                lower_bound_violations: xy.lower_bound_violations
                    + yz.lower_bound_violations
                    + xz.lower_bound_violations
                    + zx.lower_bound_violations,
                converged: xy.converged && yz.converged && xz.converged && zx.converged,
            })
        })
        .collect::<Result<_>>()?;
    let worst_slack = rows.iter().map(|r| r.slack / r.scale).fold(f64::NEG_INFINITY, f64::max);
    let worst_symmetry = rows.iter().map(|r| r.symmetry_gap / r.scale).fold(0.0, f64::max);
    let lower_bound_violations = rows.iter().map(|r| r.lower_bound_violations).sum();
    Ok(TriangleAudit { h, rows, worst_slack, worst_symmetry, lower_bound_violations })
}

/// Constants of `φ(x,y,T) <= C₁ l²/T + C₂ T/l` and of the derived
/// `μ(l) = (α l + β l²)^{1/2}` with `α = 4C₁C₂`, `β = 4C₁M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub energy_bound: f64,
}

impl BoundConstants {
    pub fn new(c1: f64, c2: f64, energy_bound: f64) -> Self {
        Self { c1, c2, alpha: 4.0 * c1 * c2, beta: 4.0 * c1 * energy_bound, energy_bound }
    }

    pub fn fixed_time_bound(&self, l: f64, t: f64) -> f64 {
        self.c1 * l * l / t + self.c2 * t / l
    }

    pub fn mu(&self, l: f64) -> f64 {
        (self.alpha * l + self.beta * l * l).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFit {
    pub constants: BoundConstants,
    /// `φ(x, y, T)` per sample.
    pub potentials: Vec<f64>,
    /// Samples violating the fitted fixed-time bound.
    pub violations: usize,
}

/// Margin on `‖x - y‖` used when fitting, so the bound is tested strictly
/// inside its domain `l > ‖x - y‖`.
pub const BOUND_MARGIN: f64 = 1.01;

/// Smallest admissible `C₁`: as `T → 0` the action is at least
/// `‖x - y‖²/(2T)`.
pub const C1_MIN: f64 = 0.5;

/// Inflation of the fitted `C₂`, which is a sample maximum.
pub const C2_SAFETY: f64 = 1.1;

/// Grid search for the smallest constants that dominate `φ` on the
/// samples. For each `C₁` on a log grid the least admissible `C₂` is
/// exact; the pair minimizing `Σ μ(‖x - y‖)` over the samples is kept,
/// with `C₂` then scaled by [`C2_SAFETY`].
pub fn fit_bound_constants(system: &MassSystem, h_max: f64, samples: &[BoundSample], opts: &MinimizeOptions) -> Result<BoundFit> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    if !(h_max >= 0.0) {
        return Err(invalid("energy bound must be nonnegative"));
    }
    let potentials: Vec<f64> = samples
        .par_iter()
        .map(|s| fixed_time_potential(system, &s.x, &s.y, s.t, opts))
        .collect::<Result<_>>()?;
    fit_bound_from_potentials(system, h_max, samples, potentials)
}

/// The grid search of [`fit_bound_constants`] on precomputed `φ(x, y, T)`.
pub fn fit_bound_from_potentials(system: &MassSystem, h_max: f64, samples: &[BoundSample], potentials: Vec<f64>) -> Result<BoundFit> {
    if samples.is_empty() || samples.len() != potentials.len() {
        return Err(invalid("need one potential per sample"));
    }
    if !(h_max >= 0.0) {
        return Err(invalid("energy bound must be nonnegative"));
    }
    let dists: Vec<f64> = samples.iter().map(|s| system.mass_distance_unchecked(&s.x, &s.y)).collect();
    if dists.iter().any(|d| *d <= 0.0) {
        return Err(invalid("bound samples need x != y"));
    }
    let mut best: Option<(f64, BoundConstants)> = None;
    let steps = 400;
    for i in 0..=steps {
        let c1 = C1_MIN * 10f64.powf(4.0 * i as f64 / steps as f64);
        let c2 = samples
            .iter()
            .zip(&potentials)
            .zip(&dists)
            .map(|((s, phi), d)| {
                let l = BOUND_MARGIN * d;
                (phi - c1 * l * l / s.t) * l / s.t
            })
            .fold(f64::MIN_POSITIVE, f64::max);
        let k = BoundConstants::new(c1, c2, h_max);
        let score: f64 = dists.iter().map(|d| k.mu(*d)).sum();
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, k));
        }
    }
    let fitted = best.expect("grid is non-empty").1;
    let constants = BoundConstants::new(fitted.c1, C2_SAFETY * fitted.c2, h_max);
    let violations = samples
        .iter()
        .zip(&potentials)
        .zip(&dists)
        .filter(|((s, phi), d)| **phi > constants.fixed_time_bound(BOUND_MARGIN * **d, s.t) * (1.0 + 1e-12))
        .count();
    if violations > 0 {
        return Err(invalid(format!("{violations} samples exceed the fitted bound")));
    }
    Ok(BoundFit { constants, potentials, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::graded_times;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn three() -> MassSystem {
        MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap()
    }

    #[test]
    fn lagrangian_examples() {
        let s = MassSystem::equal_masses(2, 2).unwrap();
        let x = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(lagrangian(&s, &x, &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(lagrangian(&s, &x, &[1.0, 0.0, 0.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn constant_path_action() {
        let s = three();
        let x = vec![0.0, 0.0, 1.0, 0.3, -0.5, 0.9];
        let t = 2.5;
        let path = DiscretePath::new(uniform_times(0.0, t, 10), vec![x.clone(); 11]).unwrap();
        let u = s.potential_energy(&x).unwrap();
        assert_relative_eq!(discrete_action(&s, &path, 0.0).unwrap(), t * u, max_relative = 1e-14);
        assert_relative_eq!(discrete_action(&s, &path, 0.7).unwrap(), t * (u + 0.7), max_relative = 1e-14);
    }

    #[test]
    fn preconditioner_inverts_kinetic_matrix() {
        let s = three();
        let times = graded_times(3.0, 0.2, 1.0, 9);
        let x = vec![0.0; 6];
        let mut prob = ActionProblem::new(&s, &times, &x, &x, 0.0);
        let n = 6;
        let p = 8;
        let g: Vec<f64> = (0..p * n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let mut z = vec![0.0; p * n];
        prob.precondition(&g, &mut z);
        // apply K and compare
        for j in 0..p {
            for c in 0..n {
                let m = s.mass_of_coord(c);
                let dl = prob.dt[j];
                let dr = prob.dt[j + 1];
                let mut kz = m * (1.0 / dl + 1.0 / dr) * z[j * n + c];
                if j > 0 {
                    kz -= m / dl * z[(j - 1) * n + c];
                }
                if j + 1 < p {
                    kz -= m / dr * z[(j + 1) * n + c];
                }
                assert!((kz - g[j * n + c]).abs() < 1e-10, "{kz} vs {}", g[j * n + c]);
            }
        }
        let _ = prob.eval(&vec![0.0; p * n], None);
    }

    #[test]
    fn free_time_potential_is_zero_on_diagonal() {
        let s = three();
        let x = vec![0.0, 0.0, 1.0, 0.3, -0.5, 0.9];
        let r = free_time_potential(&s, 0.5, &x, &x, &FreeTimeOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(free_time_potential(&s, -0.1, &x, &x, &FreeTimeOptions::default()).is_err());
    }

    #[test]
    fn boundary_momenta_of_uniform_motion() {
        let s = MassSystem::equal_masses(2, 2).unwrap();
        let times = uniform_times(0.0, 1.0, 4);
        let path = DiscretePath::linear(&[0.0, 0.0, 100.0, 0.0], &[0.0, 1.0, 100.0, -1.0], times).unwrap();
        let (v0, v1) = boundary_velocities(&s, &path).unwrap();
        for v in [v0, v1] {
            assert!((v[1] - 1.0).abs() < 1e-3 && (v[3] + 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bound_constants_relations() {
        let k = BoundConstants::new(0.7, 2.0, 1.5);
        assert_relative_eq!(k.alpha, 4.0 * 0.7 * 2.0);
        assert_relative_eq!(k.beta, 4.0 * 0.7 * 1.5);
        // μ is the infimum over T of the fixed-time bound plus M·T
        for l in [0.1, 1.0, 5.0] {
            let inf = (1..4000)
                .map(|i| {
                    let t = 1e-3 * 1.005f64.powi(i);
                    k.fixed_time_bound(l, t) + 1.5 * t
                })
                .fold(f64::INFINITY, f64::min);
            assert!(inf >= k.mu(l) * (1.0 - 1e-12) && inf <= k.mu(l) * (1.0 + 1e-4), "{inf} vs {}", k.mu(l));
        }
    }

    fn random_path(seed: u64) -> DiscretePath {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0.0, 0.0, 1.0, 0.2, -0.3, 1.1];
        let times = graded_times(1.5, 0.3, 0.8, 12);
        let nodes = (0..13)
            .map(|k| base.iter().map(|b| b + 0.05 * k as f64 + rng.random_range(-0.1..0.1)).collect())
            .collect();
        DiscretePath::new(times, nodes).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1000) {
            let s = three();
            let p = random_path(seed);
            let g = discrete_action_gradient(&s, &p, 0.0).unwrap();
            let step = 1e-6;
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 1..p.segments() {
                for c in 0..6 {
                    let mut a = p.clone();
                    let mut b = p.clone();
                    a.nodes_mut()[k][c] += step;
                    b.nodes_mut()[k][c] -= step;
                    let fd = (discrete_action(&s, &a, 0.0).unwrap() - discrete_action(&s, &b, 0.0).unwrap()) / (2.0 * step);
                    num += (fd - g[k - 1][c]).powi(2);
                    den += g[k - 1][c].powi(2);
                }
            }
            prop_assert!(num.sqrt() <= 1e-6 * den.sqrt());
        }

        #[test]
        fn action_shift_is_h_times_duration(seed in 0u64..1000, h in 0.0f64..5.0) {
            let s = three();
            let p = random_path(seed);
            let a0 = discrete_action(&s, &p, 0.0).unwrap();
            let ah = discrete_action(&s, &p, h).unwrap();
            prop_assert!((ah - a0 - h * p.duration()).abs() <= 1e-12 * ah);
        }

        #[test]
        fn gradient_is_rotation_equivariant(seed in 0u64..1000, angle in 0.0f64..6.28) {
            let s = three();
            let p = random_path(seed);
            let (c, sn) = (angle.cos(), angle.sin());
            let rot = |v: &[f64]| -> Vec<f64> { v.chunks(2).flat_map(|q| [c * q[0] - sn * q[1], sn * q[0] + c * q[1]]).collect() };
            let pr = DiscretePath::new(p.times().to_vec(), p.nodes().iter().map(|q| rot(q)).collect()).unwrap();
            let g = discrete_action_gradient(&s, &p, 0.0).unwrap();
            let gr = discrete_action_gradient(&s, &pr, 0.0).unwrap();
            for (a, b) in g.iter().zip(&gr) {
                for (u, v) in rot(a).iter().zip(b) {
                    prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
                }
            }
        }
    }
}
