//! Two-body orbits against closed-form Kepler solutions.

use nbody_geodesics::dynamics::{energy, propagate, propagate_sampled, StepControls, Termination};
use nbody_geodesics::MassSystem;

fn two() -> MassSystem {
    MassSystem::equal_masses(2, 2).unwrap()
}

#[test]
fn circular_orbit_rotates_rigidly() {
    let s = two();
    let c = 0.5f64.sqrt();
    let x0 = [-0.5, 0.0, 0.5, 0.0];
    let v0 = [0.0, -c, 0.0, c];
    let omega = 2f64.sqrt();
    let times: Vec<f64> = (1..=40).map(|k| k as f64 * 0.7).collect();
    let tr = propagate_sampled(&s, &x0, &v0, &times, &StepControls::default()).unwrap();
    for (t, q) in tr.times.iter().zip(&tr.positions) {
        let (sn, cs) = (omega * t).sin_cos();
        let expected = [-0.5 * cs, -0.5 * sn, 0.5 * cs, 0.5 * sn];
        for (a, b) in q.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "t = {t}: {q:?} vs {expected:?}");
        }
    }
}

#[test]
fn radial_parabolic_escape_follows_two_thirds_law() {
    // relative distance obeys r^{3/2} = 1 + 3t
    let s = two();
    let tr = propagate_sampled(&s, &[-0.5, 0.0, 0.5, 0.0], &[-1.0, 0.0, 1.0, 0.0], &[1.0, 10.0, 100.0, 1000.0], &StepControls::default())
        .unwrap();
    for (t, q) in tr.times.iter().zip(&tr.positions).skip(1) {
        let r = q[2] - q[0];
        let exact = (1.0 + 3.0 * t).powf(2.0 / 3.0);
        assert!((r - exact).abs() <= 1e-9 * exact, "t = {t}: {r} vs {exact}");
    }
    assert_eq!(energy(&s, &tr.positions[0], &tr.velocities[0]).unwrap(), 0.0);
}

#[test]
fn radial_hyperbolic_speed_tends_to_asymptotic_value() {
    // h = 1: relative speed² = 4 + 4/r, so v_rel → 2
    let s = two();
    let w = 2f64.sqrt();
    let tr = propagate(&s, &[-0.5, 0.0, 0.5, 0.0], &[-w, 0.0, w, 0.0], 500.0, &StepControls::default()).unwrap();
    assert_eq!(tr.termination, Termination::HorizonReached);
    let k = tr.len() - 1;
    let r = tr.positions[k][2] - tr.positions[k][0];
    let v = tr.velocities[k][2] - tr.velocities[k][0];
    assert!((v * v - (4.0 + 4.0 / r)).abs() < 1e-9);
    assert!(tr.max_energy_drift() < 1e-10);
}

#[test]
fn head_on_collision_is_detected() {
    let s = two();
    let tr = propagate(&s, &[-0.5, 0.0, 0.5, 0.0], &[0.0; 4], 10.0, &StepControls::default()).unwrap();
    assert_eq!(tr.termination, Termination::CollisionDetected);
    // free fall from rest at r = 1 reaches the collision at t = π/4
    let t = tr.horizon();
    assert!((t - std::f64::consts::FRAC_PI_4).abs() < 1e-3, "{t}");
}
