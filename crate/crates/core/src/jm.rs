//! Jacobi–Maupertuis length and geodesic-ray certificates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{free_time_potential, FreeTimeOptions};
use crate::dynamics::Trajectory;
use crate::error::{invalid, Result};
use crate::model::MassSystem;
use crate::path::DiscretePath;

fn check_nodes(system: &MassSystem, path: &DiscretePath) -> Result<()> {
    path.check_system(system)?;
    for x in path.nodes() {
        system.potential_energy(x)?;
    }
    Ok(())
}

/// Length of `path` in the metric `2(h + U) g_m`, with `U` taken at segment
/// midpoints. Depends only on the nodes, not on the times.
pub fn jm_length(system: &MassSystem, h: f64, path: &DiscretePath) -> Result<f64> {
    check_nodes(system, path)?;
    let mut total = 0.0;
    for w in path.nodes().windows(2) {
        let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let conformal = h + system.potential_unchecked(&mid);
        if !(conformal > 0.0) {
            return Err(invalid(format!("h + U = {conformal:e} is not positive on the path")));
        }
        total += (2.0 * conformal).sqrt() * system.mass_distance_unchecked(&w[0], &w[1]);
    }
    Ok(total)
}

/// Time-averaged L² size of `½‖γ̇‖² - U - h` over the segments.
pub fn energy_residual(system: &MassSystem, h: f64, path: &DiscretePath) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(invalid(format!("energy must be nonnegative, got {h}")));
    }
    check_nodes(system, path)?;
    if path.segments() == 0 {
        return Ok(0.0);
    }
    let t = path.times();
    let mut acc = 0.0;
    for (k, w) in path.nodes().windows(2).enumerate() {
        let dt = t[k + 1] - t[k];
        let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let speed = system.mass_distance_unchecked(&w[0], &w[1]) / dt;
        let r = 0.5 * speed * speed - system.potential_unchecked(&mid) - h;
        acc += dt * r * r;
    }
    Ok((acc / path.duration()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPlan {
    /// `[0,T], [T/2,T], [T/4,T/2], …` with this many halvings.
    Dyadic { levels: usize },
    Explicit(Vec<(f64, f64)>),
}

impl Default for WindowPlan {
    fn default() -> Self {
        WindowPlan::Dyadic { levels: 4 }
    }
}

impl WindowPlan {
    pub fn windows(&self, horizon: f64) -> Vec<(f64, f64)> {
        match self {
            WindowPlan::Dyadic { levels } => {
                let mut out = vec![(0.0, horizon)];
                let mut b = horizon;
                for _ in 0..*levels {
                    out.push((b / 2.0, b));
                    b /= 2.0;
                }
                out
            }
            WindowPlan::Explicit(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Refuted,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub a: f64,
    pub b: f64,
    /// `A_h` of the restriction.
    pub action: f64,
    /// `φ_h(γ(a), γ(b))`.
    pub potential: f64,
    pub defect: f64,
    pub tolerance: f64,
    pub potential_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicCertificate {
    pub h: f64,
    pub windows: Vec<WindowRow>,
    pub verdict: Verdict,
    pub max_defect: f64,
    /// Smallest `defect / (1 + |A_h|)`; should never be far below zero.
    pub min_relative_defect: f64,
}

/// Per-window tolerance `max(1e-4 |A_h|, 1e-6)`.
pub fn certificate_tolerance(action: f64) -> f64 {
    (1e-4 * action.abs()).max(1e-6)
}

/// Compares the action of each window of `trajectory` with the free-time
/// potential between its endpoints. Windows are snapped to recorded nodes.
pub fn certify_geodesic_ray(
    system: &MassSystem,
    h: f64,
    trajectory: &Trajectory,
    plan: &WindowPlan,
    opts: &FreeTimeOptions,
) -> Result<GeodesicCertificate> {
    if !(h >= 0.0) {
        return Err(invalid(format!("certificates need h >= 0, got {h}")));
    }
    if trajectory.len() < 2 {
        return Err(invalid("trajectory has a single node"));
    }
    let horizon = trajectory.horizon();
    let t0 = trajectory.times[0];
    let mut idx = Vec::new();
    for (a, b) in plan.windows(horizon - t0) {
        let (a, b) = (a + t0, b + t0);
        if !(a >= t0 && b <= horizon * (1.0 + 1e-12) && a < b) {
            return Err(invalid(format!("window [{a}, {b}] outside [{t0}, {horizon}]")));
        }
        let (ia, ib) = (trajectory.nearest_index(a), trajectory.nearest_index(b));
        if ia >= ib {
            return Err(invalid(format!("window [{a}, {b}] contains no segment")));
        }
        idx.push((ia, ib));
    }
    let windows: Vec<WindowRow> = idx
        .par_iter()
        .map(|&(ia, ib)| -> Result<WindowRow> {
            let action = trajectory.action_between(ia, ib, h);
            let phi = free_time_potential(system, h, &trajectory.positions[ia], &trajectory.positions[ib], opts)?;
            Ok(WindowRow {
                a: trajectory.times[ia],
                b: trajectory.times[ib],
                action,
                potential: phi.value,
                defect: action - phi.value,
                tolerance: certificate_tolerance(action),
                potential_converged: phi.converged && phi.resolved,
            })
        })
        .collect::<Result<_>>()?;
    let verdict = if windows.iter().all(|w| w.defect <= w.tolerance) {
        Verdict::Certified
    } else if windows.iter().any(|w| w.defect > 10.0 * w.tolerance && w.potential_converged) {
        Verdict::Refuted
    } else {
        Verdict::Inconclusive
    };
    let max_defect = windows.iter().map(|w| w.defect).fold(f64::NEG_INFINITY, f64::max);
    let min_relative_defect = windows.iter().map(|w| w.defect / (1.0 + w.action.abs())).fold(f64::INFINITY, f64::min);
    Ok(GeodesicCertificate { h, windows, verdict, max_defect, min_relative_defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::discrete_action;
    use crate::path::uniform_times;
    use proptest::prelude::*;

    #[test]
    fn single_node_has_zero_length() {
        let s = MassSystem::equal_masses(2, 2).unwrap();
        let p = DiscretePath::new(vec![0.0], vec![vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(jm_length(&s, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn residual_rejects_negative_energy() {
        let s = MassSystem::equal_masses(2, 2).unwrap();
        let p = DiscretePath::new(vec![0.0, 1.0], vec![vec![0.0, 0.0, 1.0, 0.0]; 2]).unwrap();
        assert!(energy_residual(&s, -0.5, &p).is_err());
    }

    #[test]
    fn dyadic_windows() {
        let w = WindowPlan::Dyadic { levels: 2 }.windows(8.0);
        assert_eq!(w, vec![(0.0, 8.0), (4.0, 8.0), (2.0, 4.0)]);
    }

    fn wavy_path(seed: u64) -> DiscretePath {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..17)
            .map(|k| {
                let s = k as f64 / 16.0;
                vec![0.0, 0.0, 1.0 + 2.0 * s + 0.1 * rng.random::<f64>(), 0.3 * (3.0 * s).sin(), -0.5, 1.0 + s]
            })
            .collect();
        DiscretePath::new(uniform_times(0.0, 2.0, 16), nodes).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn length_is_bounded_by_action(seed in 0u64..500, h in 0.0f64..3.0) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            let p = wavy_path(seed);
            prop_assert!(jm_length(&s, h, &p).unwrap() <= discrete_action(&s, &p, h).unwrap() * (1.0 + 1e-14));
        }

        #[test]
        fn length_ignores_parameterization(seed in 0u64..500, warp in 0.1f64..0.9) {
            let s = MassSystem::new(vec![1.0, 2.0, 0.5], 2).unwrap();
            let p = wavy_path(seed);
            // monotone warp of the time axis, same nodes
            let times: Vec<f64> = p.times().iter().map(|t| t + warp * (t * 1.3).sin() * 0.5 + 3.0 * t * t).collect();
            prop_assume!(times.windows(2).all(|w| w[1] > w[0]));
            let q = p.with_times(times).unwrap();
            let (a, b) = (jm_length(&s, 0.7, &p).unwrap(), jm_length(&s, 0.7, &q).unwrap());
            prop_assert!((a - b).abs() <= 1e-8 * a);
        }
    }
}
