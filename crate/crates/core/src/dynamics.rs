//! Forward propagation of Newton's equations `m_i ẍ_i = ∇_{x_i} U`.
//!
//! The default integrator is Gragg–Bulirsch–Stoer extrapolation of the
//! smoothed modified midpoint rule with step-size control. Alongside the
//! state it integrates the Lagrangian `L = ½‖v‖² + U`, so the action of any
//! window of a trajectory is a difference of two recorded numbers.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::MassSystem;
use crate::path::DiscretePath;

/// Collision stop: `min r_ij < COLLISION_STOP · (initial min r_ij)`.
pub const COLLISION_STOP: f64 = 1e-8;
/// Overflow guard on `‖x‖` and `‖v‖`.
pub const BLOW_UP: f64 = 1e12;

const EXTRAPOLATION_COLUMNS: usize = 6;

/// `h = ½‖v‖² - U(x)`.
pub fn energy(system: &MassSystem, x: &[f64], v: &[f64]) -> Result<f64> {
    system.check_shape(v)?;
    let u = system.potential_energy(x)?;
    Ok(0.5 * system.mass_inner_unchecked(v, v) - u)
}

/// `L = ½‖v‖² + U(x)`.
pub fn lagrangian(system: &MassSystem, x: &[f64], v: &[f64]) -> Result<f64> {
    system.check_shape(v)?;
    let u = system.potential_energy(x)?;
    Ok(0.5 * system.mass_inner_unchecked(v, v) + u)
}

/// Membership in `{x ∉ Δ : U(x) ≥ -h}`.
pub fn hill_region_contains(system: &MassSystem, h: f64, x: &[f64]) -> bool {
    match system.potential_energy(x) {
        Ok(u) => u >= -h,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adaptive extrapolation scheme, order 12.
    Extrapolation,
    /// Fixed-step fourth-order Yoshida composition of leapfrog.
    Symplectic { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControls {
    pub rtol: f64,
    pub atol: f64,
    /// First trial step; chosen from the closest encounter when `None`.
    pub initial_step: Option<f64>,
    pub max_step: Option<f64>,
    pub max_steps: usize,
    pub method: Method,
}

impl Default for StepControls {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-12,
            initial_step: None,
            max_step: None,
            max_steps: 5_000_000,
            method: Method::Extrapolation,
        }
    }
}

impl StepControls {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, ..Self::default() }
    }

    pub fn symplectic(step: f64) -> Self {
        Self { method: Method::Symplectic { step }, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    HorizonReached,
    CollisionDetected,
    BlowUp,
    /// Step budget exhausted or step size underflowed.
    StepLimit,
}

/// Sampled solution of Newton's equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub system: MassSystem,
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    /// Cumulative `∫ L dt` from the first node.
    pub action: Vec<f64>,
    /// Energy of the initial datum.
    pub energy: f64,
    pub termination: Termination,
}

impl Trajectory {
    /// Builds a trajectory from externally produced samples. The action
    /// channel is filled by the trapezoid rule.
    pub fn from_samples(
        system: &MassSystem,
        times: Vec<f64>,
        positions: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if times.is_empty() || positions.len() != times.len() || velocities.len() != times.len() {
            return Err(invalid("samples need equal, non-zero lengths"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("sample times must be strictly increasing"));
        }
        let mut lag = Vec::with_capacity(times.len());
        for (x, v) in positions.iter().zip(&velocities) {
            lag.push(lagrangian(system, x, v)?);
        }
        let mut action = vec![0.0; times.len()];
        for k in 1..times.len() {
            action[k] = action[k - 1] + 0.5 * (times[k] - times[k - 1]) * (lag[k] + lag[k - 1]);
        }
        let energy = energy(system, &positions[0], &velocities[0])?;
        Ok(Self {
            system: system.clone(),
            times,
            positions,
            velocities,
            action,
            energy,
            termination: Termination::HorizonReached,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn node_energy(&self, k: usize) -> f64 {
        let x = &self.positions[k];
        let v = &self.velocities[k];
        0.5 * self.system.mass_inner_unchecked(v, v) - self.system.potential_unchecked(x)
    }

    /// `max_k |h(t_k) - h(0)|`.
    pub fn max_energy_drift(&self) -> f64 {
        (0..self.len()).map(|k| (self.node_energy(k) - self.energy).abs()).fold(0.0, f64::max)
    }

    /// `A_h` of the restriction to nodes `a..=b`.
    pub fn action_between(&self, a: usize, b: usize, h: f64) -> f64 {
        self.action[b] - self.action[a] + h * (self.times[b] - self.times[a])
    }

    /// Largest node index with time `<= t`.
    pub fn index_at_or_before(&self, t: f64) -> usize {
        match self.times.partition_point(|s| *s <= t) {
            0 => 0,
            k => k - 1,
        }
    }

    /// Index of the node closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = self.index_at_or_before(t);
        if k + 1 < self.len() && (self.times[k + 1] - t).abs() < (t - self.times[k]).abs() {
            k + 1
        } else {
            k
        }
    }

    /// Positions on nodes `a..=b` as a path.
    pub fn path_between(&self, a: usize, b: usize) -> Result<DiscretePath> {
        if a > b || b >= self.len() {
            return Err(invalid(format!("node range {a}..={b} outside trajectory")));
        }
        DiscretePath::new(self.times[a..=b].to_vec(), self.positions[a..=b].to_vec())
    }

    /// One row per node: `t`, positions, velocities, instantaneous energy.
    pub fn write_columns<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.system.len();
        let d = self.system.dimension();
        let mut header = String::from("# t");
        for kind in ["x", "v"] {
            for k in 0..n {
                header.push_str(&format!(" {kind}{}_{}", k / d, k % d));
            }
        }
        header.push_str(" energy");
        writeln!(out, "{header}")?;
        for k in 0..self.len() {
            write!(out, "{:.16e}", self.times[k])?;
            for v in self.positions[k].iter().chain(&self.velocities[k]) {
                write!(out, " {v:.16e}")?;
            }
            writeln!(out, " {:.16e}", self.node_energy(k))?;
        }
        Ok(())
    }
}

/// Integrates from `(x0, v0)` over `[0, horizon]`, recording every accepted
/// step.
pub fn propagate(
    system: &MassSystem,
    x0: &[f64],
    v0: &[f64],
    horizon: f64,
    controls: &StepControls,
) -> Result<Trajectory> {
    Integrator::new(system, x0, v0, controls)?.run(horizon, None)
}

/// Integrates and records the state exactly at `sample_times`, which must be
/// increasing and positive. The initial datum is always the first node.
pub fn propagate_sampled(
    system: &MassSystem,
    x0: &[f64],
    v0: &[f64],
    sample_times: &[f64],
    controls: &StepControls,
) -> Result<Trajectory> {
    if sample_times.is_empty() || sample_times.windows(2).any(|w| !(w[1] > w[0])) || !(sample_times[0] > 0.0) {
        return Err(invalid("sample times must be positive and strictly increasing"));
    }
    let horizon = *sample_times.last().unwrap();
    Integrator::new(system, x0, v0, controls)?.run(horizon, Some(sample_times))
}

struct Integrator<'a> {
    system: &'a MassSystem,
    controls: StepControls,
    n: usize,
    /// `1/m` per flat coordinate.
    inv_mass: Vec<f64>,
    r0: f64,
    traj: Trajectory,
    // scratch
    f: Vec<f64>,
    z0: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl<'a> Integrator<'a> {
    fn new(system: &'a MassSystem, x0: &[f64], v0: &[f64], controls: &StepControls) -> Result<Self> {
        system.check_finite(v0)?;
        let h = energy(system, x0, v0)?;
        if !(controls.rtol > 0.0 && controls.atol > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if let Method::Symplectic { step } = controls.method {
            if !(step > 0.0 && step.is_finite()) {
                return Err(invalid("symplectic step must be positive"));
            }
        }
        let n = system.len();
        let inv_mass = (0..n).map(|k| 1.0 / system.mass_of_coord(k)).collect();
        let r0 = system.min_max_unchecked(x0).0;
        let traj = Trajectory {
            system: system.clone(),
            times: vec![0.0],
            positions: vec![x0.to_vec()],
            velocities: vec![v0.to_vec()],
            action: vec![0.0],
            energy: h,
            termination: Termination::HorizonReached,
        };
        let width = 2 * n + 1;
        Ok(Self {
            system,
            controls: *controls,
            n,
            inv_mass,
            r0,
            traj,
            f: vec![0.0; width],
            z0: vec![0.0; width],
            z1: vec![0.0; width],
            z2: vec![0.0; width],
        })
    }

    /// `y = (x, v, ∫L)`, `y' = (v, M⁻¹∇U, L)`.
    fn rhs(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n;
        out[..n].copy_from_slice(&y[n..2 * n]);
        let acc = &mut out[n..2 * n];
        acc.iter_mut().for_each(|a| *a = 0.0);
        self.system.add_potential_gradient(&y[..n], 1.0, acc);
        for (a, w) in acc.iter_mut().zip(&self.inv_mass) {
            *a *= w;
        }
        let v = &y[n..2 * n];
        out[2 * n] = 0.5 * self.system.mass_inner_unchecked(v, v) + self.system.potential_unchecked(&y[..n]);
    }

    /// Smoothed modified midpoint rule over `big_h` with `steps` substeps.
    fn midpoint(&mut self, y: &[f64], big_h: f64, steps: usize, out: &mut [f64]) {
        let h = big_h / steps as f64;
        let mut f = std::mem::take(&mut self.f);
        let mut z0 = std::mem::take(&mut self.z0);
        let mut z1 = std::mem::take(&mut self.z1);
        let mut z2 = std::mem::take(&mut self.z2);
        self.rhs(y, &mut f);
        z0.copy_from_slice(y);
        for i in 0..y.len() {
            z1[i] = y[i] + h * f[i];
        }
        for _ in 1..steps {
            self.rhs(&z1, &mut f);
            for i in 0..y.len() {
                z2[i] = z0[i] + 2.0 * h * f[i];
            }
            std::mem::swap(&mut z0, &mut z1);
            std::mem::swap(&mut z1, &mut z2);
        }
        self.rhs(&z1, &mut f);
        for i in 0..y.len() {
            out[i] = 0.5 * (z1[i] + z0[i] + h * f[i]);
        }
        self.f = f;
        self.z0 = z0;
        self.z1 = z1;
        self.z2 = z2;
    }

    /// One extrapolated step; returns the new state and its scaled error.
    fn gbs_step(&mut self, y: &[f64], h: f64, table: &mut Vec<Vec<f64>>, prev: &mut Vec<Vec<f64>>) -> f64 {
        let k = EXTRAPOLATION_COLUMNS;
        let width = y.len();
        for j in 0..k {
            let nj = 2 * (j + 1);
            let mut row0 = std::mem::take(&mut table[0]);
            self.midpoint(y, h, nj, &mut row0);
            table[0] = row0;
            for i in 1..=j {
                let ratio = (nj as f64 / (2 * (j + 1 - i)) as f64).powi(2) - 1.0;
                for q in 0..width {
                    let a = table[i - 1][q];
                    table[i][q] = a + (a - prev[i - 1][q]) / ratio;
                }
            }
            if j + 1 < k {
                for i in 0..=j {
                    prev[i].copy_from_slice(&table[i]);
                }
            }
        }
        let best = &table[k - 1];
        let second = &table[k - 2];
        let n2 = 2 * self.n;
        let mut err = 0.0;
        for q in 0..n2 {
            let sc = self.controls.atol + self.controls.rtol * y[q].abs().max(best[q].abs());
            let e = (best[q] - second[q]) / sc;
            err += e * e;
        }
        (err / n2 as f64).sqrt()
    }

    fn status(&self, y: &[f64]) -> Option<Termination> {
        let n = self.n;
        let x = &y[..n];
        let v = &y[n..2 * n];
        if y.iter().any(|c| !c.is_finite()) {
            return Some(Termination::CollisionDetected);
        }
        if self.system.mass_norm_unchecked(x) > BLOW_UP || self.system.mass_norm_unchecked(v) > BLOW_UP {
            return Some(Termination::BlowUp);
        }
        if self.system.min_max_unchecked(x).0 < COLLISION_STOP * self.r0 {
            return Some(Termination::CollisionDetected);
        }
        None
    }

    /// The step size fell below time resolution. Near an encounter this is
    /// the 1/r stiffening of an imminent collision.
    fn step_collapse(&self, y: &[f64]) -> Termination {
        if self.system.min_max_unchecked(&y[..self.n]).0 < 1e-4 * self.r0 {
            Termination::CollisionDetected
        } else {
            Termination::StepLimit
        }
    }

    fn record(&mut self, t: f64, y: &[f64]) {
        let n = self.n;
        self.traj.times.push(t);
        self.traj.positions.push(y[..n].to_vec());
        self.traj.velocities.push(y[n..2 * n].to_vec());
        self.traj.action.push(y[2 * n]);
    }

    fn initial_step(&self, horizon: f64) -> f64 {
        if let Some(h) = self.controls.initial_step {
            return h.min(horizon);
        }
        let tau = (self.r0.powi(3) / self.system.total_mass()).sqrt();
        let v = self.system.mass_norm_unchecked(&self.traj.velocities[0]);
        let cross = if v > 0.0 { self.r0 * self.system.total_mass().sqrt() / v } else { f64::INFINITY };
        (0.05 * tau.min(cross)).min(horizon)
    }

    fn run(mut self, horizon: f64, samples: Option<&[f64]>) -> Result<Trajectory> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon must be positive and finite"));
        }
        let n = self.n;
        let mut y = Vec::with_capacity(2 * n + 1);
        y.extend_from_slice(&self.traj.positions[0]);
        y.extend_from_slice(&self.traj.velocities[0]);
        y.push(0.0);
        let result = match self.controls.method {
            Method::Extrapolation => self.run_gbs(&mut y, horizon, samples),
            Method::Symplectic { step } => self.run_symplectic(&mut y, horizon, step, samples),
        };
        self.traj.termination = result;
        Ok(self.traj)
    }

    fn run_gbs(&mut self, y: &mut Vec<f64>, horizon: f64, samples: Option<&[f64]>) -> Termination {
        let k = EXTRAPOLATION_COLUMNS;
        let width = y.len();
        let mut table = vec![vec![0.0; width]; k];
        let mut prev = vec![vec![0.0; width]; k];
        let max_step = self.controls.max_step.unwrap_or(horizon);
        let mut h = self.initial_step(horizon);
        let mut t = 0.0;
        let mut next_sample = 0usize;
        let mut steps = 0usize;
        while t < horizon {
            let target = match samples {
                Some(s) => s[next_sample],
                None => horizon,
            };
            let mut hh = h.min(max_step);
            let landing = t + hh >= target * (1.0 - 1e-15);
            if landing {
                hh = target - t;
            }
            if hh <= 4.0 * f64::EPSILON * t.abs().max(1.0) {
                return self.step_collapse(y);
            }
            let err = self.gbs_step(y, hh, &mut table, &mut prev);
            let fac = if err.is_finite() {
                (0.94 * (0.65 / err.max(1e-300)).powf(1.0 / (2 * k - 1) as f64)).clamp(0.2, 4.0)
            } else {
                0.2
            };
            if err.is_finite() && err <= 1.0 {
                y.copy_from_slice(&table[k - 1]);
                t = if landing { target } else { t + hh };
                steps += 1;
                if let Some(status) = self.status(y) {
                    self.record(t, y);
                    return status;
                }
                match samples {
                    None => self.record(t, y),
                    Some(s) if landing => {
                        self.record(t, y);
                        next_sample += 1;
                        if next_sample == s.len() {
                            return Termination::HorizonReached;
                        }
                    }
                    Some(_) => {}
                }
                if steps >= self.controls.max_steps {
                    return Termination::StepLimit;
                }
                // a shortened landing step says nothing about the natural step
                if !landing {
                    h = hh * fac;
                } else {
                    h = h.max(hh * fac);
                }
            } else {
                h = hh * fac;
            }
        }
        Termination::HorizonReached
    }

    fn accel(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|a| *a = 0.0);
        self.system.add_potential_gradient(x, 1.0, out);
        for (a, w) in out.iter_mut().zip(&self.inv_mass) {
            *a *= w;
        }
    }

    fn lag(&self, y: &[f64]) -> f64 {
        let n = self.n;
        let v = &y[n..2 * n];
        0.5 * self.system.mass_inner_unchecked(v, v) + self.system.potential_unchecked(&y[..n])
    }

    fn run_symplectic(&mut self, y: &mut [f64], horizon: f64, step: f64, samples: Option<&[f64]>) -> Termination {
        let n = self.n;
        let cbrt2 = 2f64.cbrt();
        let w1 = 1.0 / (2.0 - cbrt2);
        let w0 = -cbrt2 * w1;
        let c = [w1 / 2.0, (w0 + w1) / 2.0, (w0 + w1) / 2.0, w1 / 2.0];
        let dcoef = [w1, w0, w1];
        let mut a = vec![0.0; n];
        let mut t = 0.0;
        let mut next_sample = 0usize;
        let mut steps = 0usize;
        let mut lag_prev = self.lag(y);
        while t < horizon {
            let target = match samples {
                Some(s) => s[next_sample],
                None => horizon,
            };
            let mut hh = step;
            let landing = t + hh >= target * (1.0 - 1e-15);
            if landing {
                hh = target - t;
            }
            if hh <= 0.0 {
                return Termination::StepLimit;
            }
            for s in 0..4 {
                for i in 0..n {
                    y[i] += c[s] * hh * y[n + i];
                }
                if s < 3 {
                    self.accel(&y[..n], &mut a);
                    for i in 0..n {
                        y[n + i] += dcoef[s] * hh * a[i];
                    }
                }
            }
            let lag_now = self.lag(y);
            y[2 * n] += 0.5 * hh * (lag_prev + lag_now);
            lag_prev = lag_now;
            t = if landing { target } else { t + hh };
            steps += 1;
            if let Some(status) = self.status(y) {
                self.record(t, y);
                return status;
            }
            match samples {
                None => self.record(t, y),
                Some(s) if landing => {
                    self.record(t, y);
                    next_sample += 1;
                    if next_sample == s.len() {
                        return Termination::HorizonReached;
                    }
                }
                Some(_) => {}
            }
            if steps >= self.controls.max_steps {
                return Termination::StepLimit;
            }
        }
        Termination::HorizonReached
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn two() -> MassSystem {
        MassSystem::equal_masses(2, 2).unwrap()
    }

    fn circular() -> (Vec<f64>, Vec<f64>) {
        let w = 0.5f64.sqrt();
        (vec![-0.5, 0.0, 0.5, 0.0], vec![0.0, -w, 0.0, w])
    }

    #[test]
    fn energy_examples() {
        let s = two();
        let x = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(energy(&s, &x, &[0.0; 4]).unwrap(), -1.0);
        assert_eq!(energy(&s, &x, &[1.0, 0.0, 0.0, 0.0]).unwrap() + 1.0, 0.5);
        assert_eq!(energy(&s, &x, &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn hill_region_examples() {
        let s = two();
        let x = [0.0, 0.0, 1.0, 0.0];
        assert!(hill_region_contains(&s, 0.0, &x));
        assert!(!hill_region_contains(&s, -2.0, &x));
        assert!(hill_region_contains(&s, -1.0, &x));
        assert!(!hill_region_contains(&s, 5.0, &[0.0; 4]));
    }

    #[test]
    fn circular_orbit_closes_after_one_period() {
        let s = two();
        let (x0, v0) = circular();
        // ω² = (m₁+m₂)/d³ = 2
        let period = 2.0 * PI / 2f64.sqrt();
        let tr = propagate_sampled(&s, &x0, &v0, &[period], &StepControls::default()).unwrap();
        assert_eq!(tr.termination, Termination::HorizonReached);
        let xe = tr.positions.last().unwrap();
        assert!(s.mass_distance(xe, &x0).unwrap() < 1e-6);
        // constant L = ½‖v‖² + U = 0.5 + 1 over one period
        assert_relative_eq!(*tr.action.last().unwrap(), 1.5 * period, max_relative = 1e-9);
    }

    #[test]
    fn radial_fall_collides() {
        let s = two();
        let tr = propagate(&s, &[0.0, 0.0, 1.0, 0.0], &[0.0; 4], 10.0, &StepControls::default()).unwrap();
        assert_eq!(tr.termination, Termination::CollisionDetected);
        // radial free fall from rest: t_c = (π/2)·√(r³/(2(m₁+m₂))) = π/4
        assert!((tr.horizon() - PI / 4.0).abs() < 1e-3, "collision at {}", tr.horizon());
    }

    #[test]
    fn rejects_collision_start_and_bad_input() {
        let s = two();
        assert!(propagate(&s, &[0.0; 4], &[0.0; 4], 1.0, &StepControls::default()).is_err());
        let (x0, mut v0) = circular();
        v0[0] = f64::NAN;
        assert!(propagate(&s, &x0, &v0, 1.0, &StepControls::default()).is_err());
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let s = MassSystem::new(vec![1.0, 0.5, 0.8], 2).unwrap();
        let x0 = vec![0.0, 0.0, 1.3, 0.2, -0.4, 1.1];
        let v0 = vec![0.1, -0.2, 0.0, 0.5, -0.3, 0.0];
        let ctl = StepControls::default();
        let fwd = propagate_sampled(&s, &x0, &v0, &[3.0], &ctl).unwrap();
        let xt = fwd.positions.last().unwrap();
        let vt: Vec<f64> = fwd.velocities.last().unwrap().iter().map(|v| -v).collect();
        let back = propagate_sampled(&s, xt, &vt, &[3.0], &ctl).unwrap();
        let xb = back.positions.last().unwrap();
        let vb = back.velocities.last().unwrap();
        assert!(s.mass_distance(xb, &x0).unwrap() < 1e-6);
        let vneg: Vec<f64> = v0.iter().map(|v| -v).collect();
        assert!(s.mass_distance(vb, &vneg).unwrap() < 1e-6);
    }

    #[test]
    fn kepler_scaling() {
        let s = MassSystem::new(vec![1.0, 0.5, 0.8], 2).unwrap();
        let x0 = vec![0.0, 0.0, 1.3, 0.2, -0.4, 1.1];
        let v0 = vec![0.1, -0.2, 0.0, 0.5, -0.3, 0.0];
        let lambda: f64 = 2.5;
        let ctl = StepControls::default();
        let base = propagate_sampled(&s, &x0, &v0, &[1.0], &ctl).unwrap();
        // y(t) = λ x(λ^{-3/2} t) has y(0) = λ x0, y'(0) = λ^{-1/2} v0
        let xs: Vec<f64> = x0.iter().map(|v| lambda * v).collect();
        let vs: Vec<f64> = v0.iter().map(|v| v / lambda.sqrt()).collect();
        let scaled = propagate_sampled(&s, &xs, &vs, &[lambda.powf(1.5)], &ctl).unwrap();
        let expect: Vec<f64> = base.positions[1].iter().map(|v| lambda * v).collect();
        let err = s.mass_distance(&scaled.positions[1], &expect).unwrap() / s.mass_norm(&expect).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn momentum_is_conserved() {
        let s = MassSystem::new(vec![1.0, 0.5, 0.8], 2).unwrap();
        let x0 = vec![0.0, 0.0, 1.3, 0.2, -0.4, 1.1];
        let v0 = vec![0.1, -0.2, 0.0, 0.5, -0.3, 0.0];
        let tr = propagate(&s, &x0, &v0, 5.0, &StepControls::default()).unwrap();
        let p0 = s.linear_momentum(&v0).unwrap();
        for v in &tr.velocities {
            let p = s.linear_momentum(v).unwrap();
            for (a, b) in p.iter().zip(&p0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symplectic_mode_bounds_energy_error() {
        let s = two();
        let (x0, v0) = circular();
        let period = 2.0 * PI / 2f64.sqrt();
        let tr = propagate(&s, &x0, &v0, 50.0 * period, &StepControls::symplectic(period / 200.0)).unwrap();
        assert_eq!(tr.termination, Termination::HorizonReached);
        assert!(tr.max_energy_drift() < 1e-6, "{}", tr.max_energy_drift());
    }

    #[test]
    fn sampled_output_lands_on_requested_times() {
        let s = two();
        let (x0, v0) = circular();
        let times = [0.1, 0.25, 1.0, 4.0];
        let tr = propagate_sampled(&s, &x0, &v0, &times, &StepControls::default()).unwrap();
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(&tr.times[1..], &times);
    }

    #[test]
    fn columns_have_one_row_per_node() {
        let s = two();
        let (x0, v0) = circular();
        let tr = propagate_sampled(&s, &x0, &v0, &[0.5, 1.0], &StepControls::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_columns(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split_whitespace().count(), 1 + 8 + 1);
    }
}
