//! Busemann functions built from free-time potentials, calibrating rays,
//! Hamilton–Jacobi audits and the closedness experiment for geodesic rays.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{boundary_velocities, free_time_potential, FreeTimeOptions, FreeTimeResult};
use crate::asymptotics::{classify, expansiveness_check, AsymptoticReport, ExpansivenessReport};
use crate::dynamics::{propagate_sampled, StepControls, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::jm::{certify_geodesic_ray, GeodesicCertificate, Verdict, WindowPlan};
use crate::model::MassSystem;
use crate::path::{uniform_times, DiscretePath};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOptions {
    /// Number of horizon points `p_0 … p_{levels-1}`.
    pub levels: usize,
    pub potential: FreeTimeOptions,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self { levels: 6, potential: FreeTimeOptions::fixed_grid(256) }
    }
}

/// `u_n(x) = φ_{h_n}(0, p_n) - φ_{h_n}(x, p_n)` with `‖p_n‖ = ρ₀ 2ⁿ` along
/// a fixed direction. Evaluations are cached.
#[derive(Debug)]
pub struct BusemannField {
    system: MassSystem,
    h: f64,
    h_sequence: Vec<f64>,
    direction: Vec<f64>,
    rho0: f64,
    horizon_points: Vec<Vec<f64>>,
    base_point: Vec<f64>,
    opts: FreeTimeOptions,
    base_values: Vec<OnceLock<f64>>,
    cache: Mutex<HashMap<(usize, Vec<u64>), f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub level: usize,
    pub x: Vec<f64>,
    pub value: f64,
}

/// Serializable view of a field with its evaluated values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub h: f64,
    pub h_sequence: Vec<f64>,
    pub direction: Vec<f64>,
    pub rho0: f64,
    pub horizon_points: Vec<Vec<f64>>,
    pub base_point: Vec<f64>,
    pub base_values: Vec<Option<f64>>,
    pub cache: Vec<CacheEntry>,
}

impl BusemannField {
    /// Field with constant energies `h_n = h`. `reference` sets the radius
    /// scale `ρ₀ = 10‖reference‖ + 10`.
    pub fn new(system: &MassSystem, h: f64, direction: &[f64], reference: &[f64], opts: &FieldOptions) -> Result<Self> {
        Self::with_energies(system, vec![h; opts.levels], h, direction, reference, opts)
    }

    /// Field with an explicit energy sequence `h_n → h`.
    pub fn with_energies(
        system: &MassSystem,
        h_sequence: Vec<f64>,
        h: f64,
        direction: &[f64],
        reference: &[f64],
        opts: &FieldOptions,
    ) -> Result<Self> {
        system.check_shape(direction)?;
        system.check_shape(reference)?;
        if h_sequence.is_empty() || h_sequence.len() != opts.levels {
            return Err(invalid(format!("need {} energies, got {}", opts.levels, h_sequence.len())));
        }
        if h_sequence.iter().chain([&h]).any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(invalid("energies must be finite and nonnegative"));
        }
        let norm = system.mass_norm(direction)?;
        if !(norm > 0.0) {
            return Err(invalid("horizon direction must be nonzero"));
        }
        let direction: Vec<f64> = direction.iter().map(|v| v / norm).collect();
        let rho0 = 10.0 * system.mass_norm(reference)? + 10.0;
        let horizon_points: Vec<Vec<f64>> = (0..opts.levels)
            .map(|n| {
                let rho = rho0 * 2f64.powi(n as i32);
                direction.iter().map(|v| rho * v).collect()
            })
            .collect();
        if let Some(p) = horizon_points.iter().find(|p| system.in_collision_set(p).unwrap_or(true)) {
            return Err(invalid(format!("horizon point {p:?} lies on the collision set")));
        }
        Ok(Self {
            system: system.clone(),
            h,
            h_sequence,
            direction,
            rho0,
            horizon_points,
            base_point: vec![0.0; system.len()],
            opts: opts.potential,
            base_values: (0..opts.levels).map(|_| OnceLock::new()).collect(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn system(&self) -> &MassSystem {
        &self.system
    }

    /// Limit energy `h`.
    pub fn energy(&self) -> f64 {
        self.h
    }

    pub fn h_sequence(&self) -> &[f64] {
        &self.h_sequence
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn levels(&self) -> usize {
        self.horizon_points.len()
    }

    pub fn horizon_point(&self, n: usize) -> &[f64] {
        &self.horizon_points[n]
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    pub fn potential_options(&self) -> &FreeTimeOptions {
        &self.opts
    }

    fn check_level(&self, n: usize) -> Result<()> {
        if n >= self.levels() {
            return Err(invalid(format!("level {n} outside 0..{}", self.levels())));
        }
        Ok(())
    }

    /// `φ_{h_n}(x, p_n)` with its minimizer.
    pub fn horizon_potential(&self, x: &[f64], n: usize) -> Result<FreeTimeResult> {
        self.check_level(n)?;
        self.system.check_shape(x)?;
        free_time_potential(&self.system, self.h_sequence[n], x, &self.horizon_points[n], &self.opts)
    }

    fn base_value(&self, n: usize) -> Result<f64> {
        if let Some(v) = self.base_values[n].get() {
            return Ok(*v);
        }
        let v = self.horizon_potential(&self.base_point, n)?.value;
        Ok(*self.base_values[n].get_or_init(|| v))
    }

    fn key(n: usize, x: &[f64]) -> (usize, Vec<u64>) {
        (n, x.iter().map(|v| v.to_bits()).collect())
    }

    fn store(&self, n: usize, x: &[f64], value: f64) {
        self.cache.lock().expect("cache poisoned").insert(Self::key(n, x), value);
    }

    /// `u_n(x)`; exactly zero at the base point.
    pub fn eval(&self, x: &[f64], n: usize) -> Result<f64> {
        self.check_level(n)?;
        self.system.check_shape(x)?;
        if x == self.base_point.as_slice() {
            return Ok(0.0);
        }
        if let Some(v) = self.cache.lock().expect("cache poisoned").get(&Self::key(n, x)) {
            return Ok(*v);
        }
        let value = self.base_value(n)? - self.horizon_potential(x, n)?.value;
        self.store(n, x, value);
        Ok(value)
    }

    /// `u_n(x)` together with the minimizer from `x` to `p_n`.
    fn eval_with_path(&self, x: &[f64], n: usize) -> Result<(f64, FreeTimeResult)> {
        let far = self.horizon_potential(x, n)?;
        let value = if x == self.base_point.as_slice() { 0.0 } else { self.base_value(n)? - far.value };
        self.store(n, x, value);
        Ok((value, far))
    }

    pub fn snapshot(&self) -> FieldSnapshot {
        let mut cache: Vec<CacheEntry> = self
            .cache
            .lock()
            .expect("cache poisoned")
            .iter()
            .map(|((level, bits), value)| CacheEntry {
                level: *level,
                x: bits.iter().map(|b| f64::from_bits(*b)).collect(),
                value: *value,
            })
            .collect();
        cache.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.x.iter().zip(&b.x).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)));
        FieldSnapshot {
            h: self.h,
            h_sequence: self.h_sequence.clone(),
            direction: self.direction.clone(),
            rho0: self.rho0,
            horizon_points: self.horizon_points.clone(),
            base_point: self.base_point.clone(),
            base_values: self.base_values.iter().map(|v| v.get().copied()).collect(),
            cache,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusemannLimit {
    pub value: f64,
    /// Level at which the Cauchy test passed.
    pub level: usize,
    /// `u_0(x), u_1(x), …` up to `level`.
    pub history: Vec<f64>,
    pub increments: Vec<f64>,
}

/// Evaluates `u_n(x)` for increasing `n` until two successive values differ
/// by less than `cauchy_tol`.
pub fn busemann_limit(field: &BusemannField, x: &[f64], cauchy_tol: f64) -> Result<BusemannLimit> {
    if !(cauchy_tol > 0.0) {
        return Err(invalid("Cauchy tolerance must be positive"));
    }
    let mut history = Vec::new();
    let mut increments = Vec::new();
    for n in 0..field.levels() {
        let v = field.eval(x, n)?;
        if let Some(prev) = history.last() {
            let inc: f64 = v - prev;
            increments.push(inc.abs());
            if inc.abs() < cauchy_tol {
                history.push(v);
                return Ok(BusemannLimit { value: v, level: n, history, increments });
            }
        }
        history.push(v);
    }
    Err(Error::NonConvergent { history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Sphere directions besides the minimizer crossing; `4·N·d` if `None`.
    pub sphere_samples: Option<usize>,
    /// Pattern-search sweeps around the best candidate.
    pub refine_sweeps: usize,
    /// Failure when the best defect is below `-failure_tol·(1 + φ_h)`.
    pub failure_tol: f64,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { sphere_samples: None, refine_sweeps: 1, failure_tol: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub radius: f64,
    pub origin: Vec<f64>,
    pub target: Vec<f64>,
    /// `u(y) - u(x) - φ_h(x, y)`, at most zero up to numerics.
    pub defect: f64,
    pub potential: f64,
    pub duration: f64,
    /// Minimizer from `origin` to `target`.
    pub path: DiscretePath,
    pub candidates: usize,
}

struct Candidate {
    y: Vec<f64>,
    score: f64,
    phi: FreeTimeResult,
}

/// Point `y` with `‖y - x‖ = r` on the piecewise-linear path, or `None`.
fn sphere_crossing(system: &MassSystem, x: &[f64], path: &DiscretePath, r: f64) -> Option<Vec<f64>> {
    let nodes = path.nodes();
    let k = nodes.iter().position(|z| system.mass_distance_unchecked(z, x) >= r)?;
    if k == 0 {
        return None;
    }
    let (a, b) = (&nodes[k - 1], &nodes[k]);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let z: Vec<f64> = a.iter().zip(b).map(|(p, q)| p + mid * (q - p)).collect();
        if system.mass_distance_unchecked(&z, x) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z: Vec<f64> = a.iter().zip(b).map(|(p, q)| p + hi * (q - p)).collect();
    Some(on_sphere(system, x, &z, r))
}

/// `x + r (z - x)/‖z - x‖`.
fn on_sphere(system: &MassSystem, x: &[f64], z: &[f64], r: f64) -> Vec<f64> {
    let d = system.mass_distance_unchecked(z, x);
    x.iter().zip(z).map(|(p, q)| p + r * (q - p) / d).collect()
}

fn sphere_directions(system: &MassSystem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = system.len();
    let mut out = Vec::with_capacity(count);
    // signed coordinate axes first, then seeded Gaussian directions
    for k in 0..(2 * n).min(count) {
        let mut e = vec![0.0; n];
        e[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
        out.push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < count {
        out.push((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    out
}

/// Picks `y_r` on the sphere `‖y - x‖ = r` maximizing
/// `u_n(y) - u_n(x) - φ_h(x, y)`: the crossing of the minimizer toward
/// `p_n`, quasi-uniform sphere samples, then a pattern search.
pub fn calibration_step(field: &BusemannField, level: usize, x: &[f64], r: f64, opts: &CalibrationOptions) -> Result<CalibrationStep> {
    let system = field.system();
    system.check_shape(x)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid(format!("radius must be positive, got {r}")));
    }
    let (ux, far) = field.eval_with_path(x, level)?;
    let h = field.energy();
    let guard = |y: &[f64]| system.min_max_unchecked(y).0 > 1e-6 * r;
    let score = |y: Vec<f64>| -> Result<Option<Candidate>> {
        if !guard(&y) {
            return Ok(None);
        }
        let uy = field.eval(&y, level)?;
        let phi = match free_time_potential(system, h, x, &y, field.potential_options()) {
            Ok(phi) => phi,
            Err(Error::CollisionSingularity { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        Ok(Some(Candidate { score: uy - ux - phi.value, y, phi }))
    };

    let mut starts = Vec::new();
    if let Some(path) = far.report.as_ref().map(|r| &r.path) {
        if let Some(y) = sphere_crossing(system, x, path, r) {
            starts.push(y);
        }
    }
    let count = opts.sphere_samples.unwrap_or(4 * system.len());
    for dir in sphere_directions(system, count, opts.seed) {
        let z: Vec<f64> = x.iter().zip(&dir).map(|(p, q)| p + q).collect();
        starts.push(on_sphere(system, x, &z, r));
    }
    let mut candidates = starts.len();
    let scored: Vec<Option<Candidate>> = starts.into_par_iter().map(score).collect::<Result<_>>()?;
    let mut best = scored
        .into_iter()
        .flatten()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .ok_or_else(|| Error::CalibrationFailure("every sphere sample was near the collision set".into()))?;

    let n = system.len();
    let mut step = 0.1;
    for _ in 0..opts.refine_sweeps {
        let trials: Vec<Vec<f64>> = (0..2 * n)
            .map(|k| {
                let mut z = best.y.clone();
                z[k / 2] += if k % 2 == 0 { step * r } else { -step * r };
                on_sphere(system, x, &z, r)
            })
            .collect();
        candidates += trials.len();
        let scored: Vec<Option<Candidate>> = trials.into_par_iter().map(score).collect::<Result<_>>()?;
        if let Some(c) = scored.into_iter().flatten().max_by(|a, b| a.score.total_cmp(&b.score)) {
            if c.score > best.score {
                best = c;
            }
        }
        step *= 0.5;
    }

    let dist = system.mass_distance_unchecked(&best.y, x);
    if (dist - r).abs() > 1e-10 * r.max(1.0) {
        return Err(invalid(format!("target left the sphere: |y - x| = {dist} vs r = {r}")));
    }
    if best.score < -opts.failure_tol * (1.0 + best.phi.value.abs()) {
        return Err(Error::CalibrationFailure(format!("best defect {:e} at radius {r}", best.score)));
    }
    let report = best.phi.report.ok_or_else(|| invalid("calibration target coincides with the origin"))?;
    Ok(CalibrationStep {
        radius: r,
        origin: x.to_vec(),
        target: best.y,
        defect: best.score,
        potential: best.phi.value,
        duration: best.phi.duration,
        path: report.path,
        candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayOptions {
    /// Number of chained calibration steps.
    pub steps: usize,
    /// First radius; `0.5·max(1, ‖x0‖)` if `None`. Radii grow by the
    /// golden ratio.
    pub first_radius: Option<f64>,
    /// Uniform samples of the propagated ray.
    pub samples: usize,
    pub calibration: CalibrationOptions,
    pub controls: StepControls,
}

impl Default for RayOptions {
    fn default() -> Self {
        Self {
            steps: 3,
            first_radius: None,
            samples: 2048,
            calibration: CalibrationOptions::default(),
            controls: StepControls::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratingRay {
    pub energy: f64,
    /// Propagated ray; its time origin sits at `start_time` along the first
    /// minimizer (nonzero only for collision starts).
    pub trajectory: Trajectory,
    pub start_time: f64,
    pub direction: Vec<f64>,
    pub steps: Vec<CalibrationStep>,
    /// `‖γ̇_k(end) - γ̇_{k+1}(0)‖` between chained minimizers.
    pub junction_mismatch: Vec<f64>,
    /// Distance from the propagated ray to each chained target at the
    /// matching time, relative to the step radius.
    pub skeleton_deviation: Vec<f64>,
    pub failure: Option<String>,
}

const GOLDEN: f64 = 1.618_033_988_749_895;

/// Chains calibration steps from `x0` and propagates the first minimizer's
/// initial velocity, rescaled onto the energy shell, up to `horizon`.
pub fn generate_calibrating_ray(field: &BusemannField, x0: &[f64], horizon: f64, opts: &RayOptions) -> Result<CalibratingRay> {
    let system = field.system();
    system.check_shape(x0)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be positive"));
    }
    if opts.steps == 0 {
        return Err(invalid("a ray needs at least one calibration step"));
    }
    let h = field.energy();
    let level = field.levels() - 1;
    let r0 = opts.first_radius.unwrap_or(0.5 * system.mass_norm(x0)?.max(1.0));
    let mut steps: Vec<CalibrationStep> = Vec::new();
    let mut failure = None;
    let mut x = x0.to_vec();
    for k in 0..opts.steps {
        let r = r0 * GOLDEN.powi(k as i32);
        match calibration_step(field, level, &x, r, &opts.calibration) {
            Ok(step) => {
                x = step.target.clone();
                steps.push(step);
            }
            Err(Error::CalibrationFailure(msg)) => {
                failure = Some(format!("step {k}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let first = steps.first().ok_or_else(|| Error::CalibrationFailure(failure.clone().unwrap_or_default()))?;

    let mut junction_mismatch = Vec::new();
    for w in steps.windows(2) {
        let (_, v_end) = boundary_velocities(system, &w[0].path)?;
        let (v_start, _) = boundary_velocities(system, &w[1].path)?;
        junction_mismatch.push(system.mass_distance_unchecked(&v_end, &v_start));
    }

    // a collision start is replaced by the first comfortably separated node
    let path = &first.path;
    let scale = system.min_max_unchecked(path.end()).0;
    let j = if system.dynamical_time(x0) == 0.0 {
        path.nodes().iter().position(|q| system.min_max_unchecked(q).0 >= 0.05 * scale).unwrap_or(1).min(path.segments() - 1)
    } else {
        0
    };
    let start_time = path.times()[j] - path.t_start();
    let tail = path.slice(j, path.segments())?;
    let (mut v, _) = boundary_velocities(system, &tail)?;
    let xs = tail.start().to_vec();
    let speed = (2.0 * (h + system.potential_energy(&xs)?)).sqrt();
    let norm = system.mass_norm_unchecked(&v);
    if norm > 0.0 {
        v.iter_mut().for_each(|c| *c *= speed / norm);
    }

    // junction times along the chain, shifted to the ray's clock
    let mut marks = Vec::new();
    let mut t = -start_time;
    for s in &steps {
        t += s.duration;
        if t > 0.0 && t < horizon {
            marks.push(t);
        }
    }
    let mut times: Vec<f64> = uniform_times(0.0, horizon, opts.samples.max(2))[1..].to_vec();
    times.extend(&marks);
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * horizon);
    let trajectory = propagate_sampled(system, &xs, &v, &times, &opts.controls)?;
    let skeleton_deviation = steps
        .iter()
        .zip(&marks)
        .filter_map(|(s, t)| {
            let k = trajectory.nearest_index(*t);
            ((trajectory.times[k] - t).abs() <= 1e-9 * horizon)
                .then(|| system.mass_distance_unchecked(&trajectory.positions[k], &s.target) / s.radius)
        })
        .collect();

    Ok(CalibratingRay {
        energy: h,
        trajectory,
        start_time,
        direction: field.direction().to_vec(),
        steps,
        junction_mismatch,
        skeleton_deviation,
        failure,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicOptions {
    pub field: FieldOptions,
    pub ray: RayOptions,
}

impl Default for ParabolicOptions {
    fn default() -> Self {
        Self { field: FieldOptions::default(), ray: RayOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolicRun {
    /// Direction of the horizon points, recorded as metadata.
    pub direction: Vec<f64>,
    pub ray: CalibratingRay,
    pub report: AsymptoticReport,
    pub expansiveness: ExpansivenessReport,
    /// Energy of the propagated ray.
    pub energy: f64,
    /// Terminal speed over the escape speed `√(2U)` at the start.
    pub terminal_speed_ratio: f64,
}

/// Zero-energy calibrating ray from `x0` toward horizon points along the
/// normalized `x0`, with its classification.
pub fn parabolic_from(system: &MassSystem, x0: &[f64], horizon: f64, opts: &ParabolicOptions) -> Result<ParabolicRun> {
    let field = BusemannField::new(system, 0.0, x0, x0, &opts.field)?;
    let ray = generate_calibrating_ray(&field, x0, horizon, &opts.ray)?;
    let tr = &ray.trajectory;
    let escape = (2.0 * system.potential_energy(&tr.positions[0])?).sqrt();
    let last = tr.len() - 1;
    let terminal = system.mass_norm_unchecked(&tr.velocities[last]);
    Ok(ParabolicRun {
        direction: field.direction().to_vec(),
        report: classify(tr),
        expansiveness: expansiveness_check(tr),
        energy: tr.energy,
        terminal_speed_ratio: terminal / escape,
        ray,
    })
}

/// Regular grid of cell centers `origin + s₁ e₁ + s₂ e₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub origin: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub range1: (f64, f64),
    pub range2: (f64, f64),
    pub n1: usize,
    pub n2: usize,
}

impl SliceGrid {
    pub fn cells(&self) -> Vec<(f64, f64, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.n1 * self.n2);
        for i in 0..self.n1 {
            let s1 = self.range1.0 + (i as f64 + 0.5) * (self.range1.1 - self.range1.0) / self.n1 as f64;
            for j in 0..self.n2 {
                let s2 = self.range2.0 + (j as f64 + 0.5) * (self.range2.1 - self.range2.0) / self.n2 as f64;
                let x = self.origin.iter().zip(&self.e1).zip(&self.e2).map(|((o, a), b)| o + s1 * a + s2 * b).collect();
                out.push((s1, s2, x));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjOptions {
    /// Central-difference step in each coordinate.
    pub fd_step: f64,
    /// Pass threshold on the residual.
    pub tol: f64,
    /// Cells whose closest pair is nearer than this are masked.
    pub mask_separation: f64,
    /// Fraction of unmasked cells that must pass.
    pub pass_fraction: f64,
}

impl Default for HjOptions {
    fn default() -> Self {
        Self { fd_step: 1e-3, tol: 0.01, mask_separation: 0.05, pass_fraction: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjCell {
    pub s1: f64,
    pub s2: f64,
    /// `½‖du‖²_* - U - h`; `None` on masked cells.
    pub residual: Option<f64>,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjAudit {
    pub h: f64,
    pub tol: f64,
    pub cells: Vec<HjCell>,
    pub unmasked: usize,
    pub passing: usize,
    pub pass_fraction: f64,
    pub max_residual: f64,
    pub passes: bool,
}

/// Subsolution audit of `u` on a slice: central differences in every
/// coordinate and the residual `½‖du‖²_* - U - h`, dual norm
/// `(Σ p_i²/m_i)^{1/2}`.
pub fn hj_subsolution_audit<F>(system: &MassSystem, h: f64, u: F, slice: &SliceGrid, opts: &HjOptions) -> Result<HjAudit>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    for v in [&slice.origin, &slice.e1, &slice.e2] {
        system.check_shape(v)?;
    }
    if slice.n1 == 0 || slice.n2 == 0 || !(opts.fd_step > 0.0) {
        return Err(invalid("slice needs cells and a positive difference step"));
    }
    let n = system.len();
    let del = opts.fd_step;
    let cells: Vec<HjCell> = slice
        .cells()
        .into_par_iter()
        .map(|(s1, s2, x)| -> Result<HjCell> {
            let masked = HjCell { s1, s2, residual: None, masked: true };
            if system.min_max_unchecked(&x).0 < opts.mask_separation.max(4.0 * del) {
                return Ok(masked);
            }
            let mut dual = 0.0;
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += del;
                xm[c] -= del;
                let g = (u(&xp)? - u(&xm)?) / (2.0 * del);
                dual += g * g / system.mass_of_coord(c);
            }
            let residual = 0.5 * dual - system.potential_energy(&x)? - h;
            Ok(HjCell { s1, s2, residual: Some(residual), masked: false })
        })
        .collect::<Result<_>>()?;
    let unmasked = cells.iter().filter(|c| !c.masked).count();
    let passing = cells.iter().filter_map(|c| c.residual).filter(|r| *r <= opts.tol).count();
    let max_residual = cells.iter().filter_map(|c| c.residual).fold(f64::NEG_INFINITY, f64::max);
    let pass_fraction = if unmasked > 0 { passing as f64 / unmasked as f64 } else { 0.0 };
    Ok(HjAudit {
        h,
        tol: opts.tol,
        cells,
        unmasked,
        passing,
        pass_fraction,
        max_residual,
        passes: unmasked > 0 && pass_fraction >= opts.pass_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosednessOptions {
    pub horizon: f64,
    pub samples: usize,
    pub plan_levels: usize,
    pub potential: FreeTimeOptions,
    pub controls: StepControls,
    /// Allowed excess of the limit defect over the worst member defect.
    pub slack: f64,
}

impl Default for ClosednessOptions {
    fn default() -> Self {
        Self {
            horizon: 50.0,
            samples: 1024,
            plan_levels: 4,
            potential: FreeTimeOptions::default(),
            controls: StepControls::default(),
            slack: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosednessMember {
    pub energy: f64,
    pub certificate: GeodesicCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosednessReport {
    pub members: Vec<ClosednessMember>,
    pub limit_energy: f64,
    pub limit: GeodesicCertificate,
    pub max_member_defect: f64,
    /// `|h_k - h|` along the sequence.
    pub energy_gaps: Vec<f64>,
    pub passes: bool,
}

fn certify_datum(system: &MassSystem, x0: &[f64], v0: &[f64], opts: &ClosednessOptions) -> Result<(f64, GeodesicCertificate)> {
    let times = uniform_times(0.0, opts.horizon, opts.samples.max(2));
    let tr = propagate_sampled(system, x0, v0, &times[1..], &opts.controls)?;
    if !(tr.energy >= 0.0) {
        return Err(invalid(format!("datum has negative energy {}", tr.energy)));
    }
    let cert = certify_geodesic_ray(system, tr.energy, &tr, &WindowPlan::Dyadic { levels: opts.plan_levels }, &opts.potential)?;
    Ok((tr.energy, cert))
}

/// Certifies each member of a convergent family of initial data, then the
/// limit datum, and compares their worst window defects.
pub fn closedness_experiment(
    system: &MassSystem,
    members: &[(Vec<f64>, Vec<f64>)],
    limit: (&[f64], &[f64]),
    opts: &ClosednessOptions,
) -> Result<ClosednessReport> {
    if members.is_empty() {
        return Err(invalid("closedness needs at least one member"));
    }
    let rows: Vec<ClosednessMember> = members
        .par_iter()
        .map(|(x, v)| certify_datum(system, x, v, opts).map(|(energy, certificate)| ClosednessMember { energy, certificate }))
        .collect::<Result<_>>()?;
    if let Some((k, m)) = rows.iter().enumerate().find(|(_, m)| m.certificate.verdict != Verdict::Certified) {
        return Err(invalid(format!("member {k} (h = {}) is {:?}", m.energy, m.certificate.verdict)));
    }
    let (limit_energy, limit_cert) = certify_datum(system, limit.0, limit.1, opts)?;
    let max_member_defect = rows.iter().map(|m| m.certificate.max_defect).fold(f64::NEG_INFINITY, f64::max);
    let passes = limit_cert.verdict == Verdict::Certified && limit_cert.max_defect <= max_member_defect + opts.slack;
    Ok(ClosednessReport {
        energy_gaps: rows.iter().map(|m| (m.energy - limit_energy).abs()).collect(),
        members: rows,
        limit_energy,
        limit: limit_cert,
        max_member_defect,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> MassSystem {
        MassSystem::equal_masses(2, 2).unwrap()
    }

    fn small_field(h: f64) -> BusemannField {
        let x = [-0.5, 0.0, 0.5, 0.0];
        BusemannField::new(&two(), h, &x, &x, &FieldOptions { levels: 3, potential: FreeTimeOptions::fixed_grid(64) }).unwrap()
    }

    #[test]
    fn base_point_is_zero_at_every_level() {
        let f = small_field(0.0);
        for n in 0..f.levels() {
            assert_eq!(f.eval(&[0.0; 4], n).unwrap(), 0.0);
        }
    }

    #[test]
    fn horizon_points_double() {
        let f = small_field(0.5);
        let s = two();
        let a = s.mass_norm(f.horizon_point(0)).unwrap();
        let b = s.mass_norm(f.horizon_point(2)).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!((a - (10.0 * 0.5f64.sqrt() + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_is_rejected() {
        let s = two();
        assert!(BusemannField::new(&s, 0.0, &[0.0; 4], &[0.0; 4], &FieldOptions::default()).is_err());
    }

    #[test]
    fn constant_function_is_a_strict_subsolution() {
        let s = two();
        let slice = SliceGrid {
            origin: vec![-0.5, 0.0, 0.5, 0.0],
            e1: vec![-0.5, 0.0, 0.5, 0.0],
            e2: vec![0.0, -0.5, 0.0, 0.5],
            range1: (0.0, 1.0),
            range2: (-0.5, 0.5),
            n1: 3,
            n2: 3,
        };
        let audit = hj_subsolution_audit(&s, 0.3, |_| Ok(7.0), &slice, &HjOptions::default()).unwrap();
        for (cell, (_, _, x)) in audit.cells.iter().zip(slice.cells()) {
            let expect = -s.potential_energy(&x).unwrap() - 0.3;
            assert!((cell.residual.unwrap() - expect).abs() < 1e-12);
        }
        assert!(audit.passes);
    }

    #[test]
    fn collision_cells_are_masked() {
        let s = two();
        let slice = SliceGrid {
            origin: vec![0.0; 4],
            e1: vec![-0.5, 0.0, 0.5, 0.0],
            e2: vec![0.0, -0.5, 0.0, 0.5],
            range1: (-0.1, 0.1),
            range2: (-0.1, 0.1),
            n1: 1,
            n2: 1,
        };
        let audit = hj_subsolution_audit(&s, 0.0, |_| Ok(0.0), &slice, &HjOptions::default()).unwrap();
        assert!(audit.cells[0].masked);
        assert!(!audit.passes);
    }

    #[test]
    fn sphere_directions_are_deterministic() {
        let s = two();
        assert_eq!(sphere_directions(&s, 12, 3), sphere_directions(&s, 12, 3));
        assert_eq!(sphere_directions(&s, 12, 3).len(), 12);
    }
}
