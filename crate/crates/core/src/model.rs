//! Mass systems, configurations and the Newtonian potential.
//!
//! Configurations and velocities are flat `N·d` arrays with one contiguous
//! block of `d` coordinates per body. Every vector-valued routine in the
//! crate uses this layout, so minimizer variables and ODE states share it.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative factor of the collision threshold `1e-12·(1 + ‖x‖)`.
pub const COLLISION_EPS: f64 = 1e-12;

/// Point masses in `ℝ^d` with gravitational constant fixed to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassSystem {
    masses: Vec<f64>,
    dimension: usize,
}

impl MassSystem {
    pub fn new(masses: Vec<f64>, dimension: usize) -> Result<Self> {
        if masses.len() < 2 {
            return Err(invalid(format!("need at least two bodies, got {}", masses.len())));
        }
        if dimension < 2 {
            return Err(invalid(format!("ambient dimension must be >= 2, got {dimension}")));
        }
        if let Some((i, m)) = masses.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m > 0.0)) {
            return Err(invalid(format!("mass {i} must be finite and positive, got {m}")));
        }
        Ok(Self { masses, dimension })
    }

    pub fn equal_masses(bodies: usize, dimension: usize) -> Result<Self> {
        Self::new(vec![1.0; bodies], dimension)
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn bodies(&self) -> usize {
        self.masses.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Length `N·d` of a flat configuration.
    pub fn len(&self) -> usize {
        self.masses.len() * self.dimension
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Mass of the body owning flat coordinate `k`.
    #[inline]
    pub fn mass_of_coord(&self, k: usize) -> f64 {
        self.masses[k / self.dimension]
    }

    pub fn check_shape(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Dimension { expected: self.len(), got: x.len() });
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self, x: &[f64]) -> Result<()> {
        self.check_shape(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        Ok(())
    }

    /// `⟨x, y⟩ = Σ m_i (x_i, y_i)`.
    pub fn mass_inner(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_shape(x)?;
        self.check_shape(y)?;
        Ok(self.mass_inner_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn mass_inner_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dimension;
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let a = &x[i * d..(i + 1) * d];
                let b = &y[i * d..(i + 1) * d];
                m * a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>()
            })
            .sum()
    }

    /// Moment of inertia `I(x) = ⟨x, x⟩`.
    pub fn moment_of_inertia(&self, x: &[f64]) -> Result<f64> {
        self.mass_inner(x, x)
    }

    /// `‖x‖ = I(x)^{1/2}`.
    pub fn mass_norm(&self, x: &[f64]) -> Result<f64> {
        Ok(self.moment_of_inertia(x)?.sqrt())
    }

    #[inline]
    pub(crate) fn mass_norm_unchecked(&self, x: &[f64]) -> f64 {
        self.mass_inner_unchecked(x, x).sqrt()
    }

    /// Mass norm of `x - y`.
    pub fn mass_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_shape(x)?;
        self.check_shape(y)?;
        Ok(self.mass_distance_unchecked(x, y))
    }

    /// Shapes are not checked.
    pub fn mass_distance_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dimension;
        let mut acc = 0.0;
        for (k, (a, b)) in x.iter().zip(y).enumerate() {
            acc += self.masses[k / d] * (a - b) * (a - b);
        }
        acc.sqrt()
    }

    /// Dual norm on covectors, `‖p‖_* = (Σ m_i^{-1} |p_i|²)^{1/2}`.
    pub fn dual_norm(&self, p: &[f64]) -> Result<f64> {
        self.check_shape(p)?;
        let d = self.dimension;
        Ok(p.iter().enumerate().map(|(k, v)| v * v / self.masses[k / d]).sum::<f64>().sqrt())
    }

    /// Separations below this are treated as collisions.
    pub fn collision_threshold(&self, x: &[f64]) -> f64 {
        COLLISION_EPS * (1.0 + self.mass_norm_unchecked(x))
    }

    #[inline]
    pub(crate) fn pair_distance(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let d = self.dimension;
        let a = &x[i * d..(i + 1) * d];
        let b = &x[j * d..(j + 1) * d];
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    }

    /// Closest pair `(i, j, r_ij)` with `i < j`.
    pub fn closest_pair(&self, x: &[f64]) -> Result<(usize, usize, f64)> {
        self.check_shape(x)?;
        Ok(self.closest_pair_unchecked(x))
    }

    pub(crate) fn closest_pair_unchecked(&self, x: &[f64]) -> (usize, usize, f64) {
        let n = self.bodies();
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                let r = self.pair_distance(x, i, j);
                if r < best.2 {
                    best = (i, j, r);
                }
            }
        }
        best
    }

    /// `(r, R)`: minimum and maximum mutual distance.
    pub fn min_max_separation(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_shape(x)?;
        Ok(self.min_max_unchecked(x))
    }

    /// Shapes are not checked.
    pub fn min_max_unchecked(&self, x: &[f64]) -> (f64, f64) {
        let n = self.bodies();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let r = self.pair_distance(x, i, j);
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        (lo, hi)
    }

    /// Mutual distances in pair order `(0,1), (0,2), …, (N-2,N-1)`.
    pub fn pair_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let n = self.bodies();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.pair_distance(x, i, j));
            }
        }
        Ok(out)
    }

    pub fn pair_labels(&self) -> Vec<(usize, usize)> {
        let n = self.bodies();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    }

    fn collision_check(&self, x: &[f64]) -> Result<()> {
        let (i, j, r) = self.closest_pair_unchecked(x);
        if r < self.collision_threshold(x) {
            return Err(Error::CollisionSingularity { i, j, separation: r });
        }
        Ok(())
    }

    pub fn in_collision_set(&self, x: &[f64]) -> Result<bool> {
        self.check_shape(x)?;
        Ok(self.collision_check(x).is_err())
    }

    /// `U(x) = Σ_{i<j} m_i m_j / r_ij`, positive convention.
    pub fn potential_energy(&self, x: &[f64]) -> Result<f64> {
        self.check_finite(x)?;
        self.collision_check(x)?;
        Ok(self.potential_unchecked(x))
    }

    /// No shape or collision checks; exact coincidences give `+∞`.
    #[inline]
    pub(crate) fn potential_unchecked(&self, x: &[f64]) -> f64 {
        let n = self.bodies();
        let mut u = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                u += self.masses[i] * self.masses[j] / self.pair_distance(x, i, j);
            }
        }
        u
    }

    /// `∇U(x)`; block `i` is Newton's force on body `i`.
    pub fn potential_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_finite(x)?;
        self.collision_check(x)?;
        let mut g = vec![0.0; x.len()];
        self.add_potential_gradient(x, 1.0, &mut g);
        Ok(g)
    }

    /// `out += scale · ∇U(x)`, no checks.
    #[inline]
    pub(crate) fn add_potential_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.bodies();
        let d = self.dimension;
        let mut diff = [0.0f64; 8];
        for i in 0..n {
            for j in i + 1..n {
                let mut r2 = 0.0;
                for a in 0..d {
                    let v = x[j * d + a] - x[i * d + a];
                    if a < 8 {
                        diff[a] = v;
                    }
                    r2 += v * v;
                }
                let r = r2.sqrt();
                let c = scale * self.masses[i] * self.masses[j] / (r2 * r);
                for a in 0..d {
                    let v = if a < 8 { diff[a] } else { x[j * d + a] - x[i * d + a] };
                    out[i * d + a] += c * v;
                    out[j * d + a] -= c * v;
                }
            }
        }
    }

    /// One sweep over pairs: returns `(U(x), min r_ij)` and, when `out` is
    /// given, adds `scale · ∇U(x)` to it. No checks.
    #[inline]
    pub(crate) fn potential_sweep(&self, x: &[f64], scale: f64, mut out: Option<&mut [f64]>) -> (f64, f64) {
        let n = self.bodies();
        let d = self.dimension;
        let mut u = 0.0;
        let mut rmin = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let mut r2 = 0.0;
                for a in 0..d {
                    let v = x[j * d + a] - x[i * d + a];
                    r2 += v * v;
                }
                let r = r2.sqrt();
                rmin = rmin.min(r);
                let mm = self.masses[i] * self.masses[j];
                u += mm / r;
                if let Some(g) = out.as_deref_mut() {
                    let c = scale * mm / (r2 * r);
                    for a in 0..d {
                        let v = x[j * d + a] - x[i * d + a];
                        g[i * d + a] += c * v;
                        g[j * d + a] -= c * v;
                    }
                }
            }
        }
        (u, rmin)
    }

    /// Mass-weighted center of the bodies, one `d`-vector.
    pub fn center_of_mass(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let d = self.dimension;
        let mut c = vec![0.0; d];
        for (i, m) in self.masses.iter().enumerate() {
            for a in 0..d {
                c[a] += m * x[i * d + a];
            }
        }
        let total = self.total_mass();
        c.iter_mut().for_each(|v| *v /= total);
        Ok(c)
    }

    /// `Σ m_i v_i`.
    pub fn linear_momentum(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.center_of_mass(v)?;
        let total = self.total_mass();
        p.iter_mut().for_each(|c| *c *= total);
        Ok(p)
    }

    /// Time scale of the closest encounters at `x`: `ℓ^{3/2} / M^{1/2}`
    /// with `ℓ = Σ m_i m_j / U(x)`. Zero on the collision set.
    pub fn dynamical_time(&self, x: &[f64]) -> f64 {
        let u = self.potential_unchecked(x);
        if !u.is_finite() || u <= 0.0 {
            return 0.0;
        }
        let n = self.bodies();
        let mut pair_mass = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                pair_mass += self.masses[i] * self.masses[j];
            }
        }
        let ell = pair_mass / u;
        (ell * ell * ell / self.total_mass()).sqrt()
    }
}

macro_rules! flat_state {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Flat ", $what, " vector with one `d`-block per body.")]
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(system: &MassSystem) -> Self {
                Self(vec![0.0; system.len()])
            }

            /// Builds from per-body vectors, checking them against `system`.
            pub fn from_bodies(system: &MassSystem, bodies: &[Vec<f64>]) -> Result<Self> {
                if bodies.len() != system.bodies() {
                    return Err(Error::Dimension { expected: system.bodies(), got: bodies.len() });
                }
                let mut flat = Vec::with_capacity(system.len());
                for b in bodies {
                    if b.len() != system.dimension() {
                        return Err(Error::Dimension { expected: system.dimension(), got: b.len() });
                    }
                    flat.extend_from_slice(b);
                }
                let out = Self(flat);
                system.check_finite(&out)?;
                Ok(out)
            }

            pub fn body(&self, system: &MassSystem, i: usize) -> &[f64] {
                let d = system.dimension();
                &self.0[i * d..(i + 1) * d]
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

flat_state!(Configuration, "position");
flat_state!(VelocityState, "velocity");

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_unit() -> MassSystem {
        MassSystem::equal_masses(2, 2).unwrap()
    }

    fn equilateral() -> Vec<f64> {
        let h = 3f64.sqrt() / 2.0;
        vec![0.0, 0.0, 1.0, 0.0, 0.5, h]
    }

    #[test]
    fn rejects_bad_systems() {
        assert!(MassSystem::new(vec![1.0], 2).is_err());
        assert!(MassSystem::new(vec![1.0, 0.0], 2).is_err());
        assert!(MassSystem::new(vec![1.0, -1.0], 2).is_err());
        assert!(MassSystem::new(vec![1.0, 1.0], 1).is_err());
        assert!(MassSystem::new(vec![1.0, f64::NAN], 3).is_err());
    }

    #[test]
    fn mass_inner_examples() {
        let s = two_unit();
        let x = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(s.mass_inner(&x, &x).unwrap(), 2.0);
        assert_eq!(s.mass_inner(&x, &[0.0; 4]).unwrap(), 0.0);
        assert!(matches!(s.mass_inner(&x, &[0.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mass_inner_matches_direct_sum() {
        let s = MassSystem::new(vec![1.0, 2.0, 3.0], 2).unwrap();
        let x = [0.3, -1.2, 2.5, 0.7, -0.4, 1.9];
        let y = [1.1, 0.2, -0.6, 3.3, 0.8, -2.0];
        // body-by-body oracle
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += [1.0, 2.0, 3.0][i] * (x[2 * i] * y[2 * i] + x[2 * i + 1] * y[2 * i + 1]);
        }
        assert_relative_eq!(s.mass_inner(&x, &y).unwrap(), oracle, max_relative = 1e-15);
    }

    #[test]
    fn potential_examples() {
        let s = two_unit();
        assert_eq!(s.potential_energy(&[0.0, 0.0, 1.0, 0.0]).unwrap(), 1.0);
        let s3 = MassSystem::equal_masses(3, 2).unwrap();
        assert_relative_eq!(s3.potential_energy(&equilateral()).unwrap(), 3.0, max_relative = 1e-15);
        assert!(matches!(
            s.potential_energy(&[0.5, 0.5, 0.5, 0.5]),
            Err(Error::CollisionSingularity { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn force_on_symmetric_pair() {
        let s = two_unit();
        let g = s.potential_gradient(&[-0.5, 0.0, 0.5, 0.0]).unwrap();
        // body 1 is pulled toward body 2 with magnitude 1
        assert_relative_eq!(g[0], 1.0, max_relative = 1e-15);
        assert_eq!(g[1], 0.0);
        assert_relative_eq!(g[2], -1.0, max_relative = 1e-15);
        assert!(s.potential_gradient(&[0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn inertia_examples() {
        let s = two_unit();
        assert_relative_eq!(s.moment_of_inertia(&[-0.5, 0.0, 0.5, 0.0]).unwrap(), 0.5);
        assert_eq!(s.moment_of_inertia(&[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn separations() {
        let s3 = MassSystem::equal_masses(3, 2).unwrap();
        let (lo, hi) = s3.min_max_separation(&equilateral()).unwrap();
        assert_relative_eq!(lo, 1.0, max_relative = 1e-15);
        assert_relative_eq!(hi, 1.0, max_relative = 1e-15);
        let (lo, hi) = s3.min_max_separation(&[0.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!((lo, hi), (1.0, 3.0));
    }

    #[test]
    fn dual_norm_inverts_mass_weights() {
        let s = MassSystem::new(vec![2.0, 0.5], 2).unwrap();
        assert_relative_eq!(s.dual_norm(&[2.0, 0.0, 0.0, 1.0]).unwrap(), 2.0, max_relative = 1e-15);
    }

    fn config_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n * d)
    }

    fn well_separated(s: &MassSystem, x: &[f64]) -> bool {
        s.min_max_separation(x).unwrap().0 > 0.05
    }

    fn rotate2(x: &[f64], angle: f64, shift: (f64, f64)) -> Vec<f64> {
        let (c, sn) = (angle.cos(), angle.sin());
        x.chunks(2).flat_map(|p| [c * p[0] - sn * p[1] + shift.0, sn * p[0] + c * p[1] + shift.1]).collect()
    }

    proptest! {
        #[test]
        fn inner_is_symmetric_positive(x in config_strategy(3, 2), y in config_strategy(3, 2)) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            let xy = s.mass_inner(&x, &y).unwrap();
            prop_assert!((xy - s.mass_inner(&y, &x).unwrap()).abs() <= 1e-14 * (1.0 + xy.abs()));
            if x.iter().any(|v| *v != 0.0) {
                prop_assert!(s.mass_inner(&x, &x).unwrap() > 0.0);
            }
        }

        #[test]
        fn potential_is_isometry_invariant(x in config_strategy(3, 2), angle in 0.0f64..6.3, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            prop_assume!(well_separated(&s, &x));
            let u = s.potential_energy(&x).unwrap();
            let ur = s.potential_energy(&rotate2(&x, angle, (dx, dy))).unwrap();
            prop_assert!((u - ur).abs() <= 1e-12 * u);
        }

        #[test]
        fn potential_homogeneity(x in config_strategy(3, 2), lambda in 0.1f64..10.0) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            prop_assume!(well_separated(&s, &x));
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let u = s.potential_energy(&x).unwrap();
            prop_assert!((s.potential_energy(&scaled).unwrap() - u / lambda).abs() <= 1e-12 * u / lambda);
            let g = s.potential_gradient(&x).unwrap();
            let gs = s.potential_gradient(&scaled).unwrap();
            for (a, b) in g.iter().zip(&gs) {
                prop_assert!((b - a / (lambda * lambda)).abs() <= 1e-11 * (1.0 + a.abs()) / (lambda * lambda));
            }
            let i = s.moment_of_inertia(&x).unwrap();
            prop_assert!((s.moment_of_inertia(&scaled).unwrap() - lambda * lambda * i).abs() <= 1e-12 * lambda * lambda * (1.0 + i));
        }

        #[test]
        fn gradient_matches_central_differences(x in config_strategy(3, 2)) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            prop_assume!(well_separated(&s, &x));
            let g = s.potential_gradient(&x).unwrap();
            let step = 1e-6;
            let mut fd = vec![0.0; x.len()];
            for k in 0..x.len() {
                let mut p = x.clone();
                let mut m = x.clone();
                p[k] += step;
                m[k] -= step;
                fd[k] = (s.potential_energy(&p).unwrap() - s.potential_energy(&m).unwrap()) / (2.0 * step);
            }
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-6 * norm, "rel err {}", err / norm);
            // translation invariance: forces sum to zero
            for a in 0..2 {
                let total: f64 = (0..3).map(|i| g[2 * i + a]).sum();
                prop_assert!(total.abs() <= 1e-10 * norm);
            }
        }

        #[test]
        fn min_max_matches_pair_scan(x in config_strategy(4, 3)) {
            let s = MassSystem::equal_masses(4, 3).unwrap();
            let d = s.pair_distances(&x).unwrap();
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(s.min_max_separation(&x).unwrap(), (lo, hi));
        }
    }
}
