//! Calibrating rays and Busemann functions of the two-body problem.

use nbody_geodesics::asymptotics::{classify, MotionClass};
use nbody_geodesics::dynamics::Termination;
use nbody_geodesics::weak_kam::{generate_calibrating_ray, BusemannField, FieldOptions, RayOptions};
use nbody_geodesics::MassSystem;

fn two() -> MassSystem {
    MassSystem::equal_masses(2, 2).unwrap()
}

#[test]
fn ray_from_total_collision_is_the_radial_ejection() {
    let s = two();
    let d = [-0.5, 0.0, 0.5, 0.0];
    let field = BusemannField::new(&s, 0.0, &d, &d, &FieldOptions::default()).unwrap();
    let ray = generate_calibrating_ray(&field, &[0.0; 4], 100.0, &RayOptions::default()).unwrap();
    assert!(ray.failure.is_none());
    assert!(ray.start_time > 0.0);
    let tr = &ray.trajectory;
    assert_eq!(tr.termination, Termination::HorizonReached);
    assert!(tr.energy.abs() < 1e-12);
    // ejection from the collision at time -start_time: r^{3/2} = 3t; the
    // clock offset comes from the discrete minimizer
    for (k, tol) in [(0, 1e-4), (tr.len() / 2, 1e-6), (tr.len() - 1, 1e-6)] {
        let q = &tr.positions[k];
        assert!(q[1].abs() < 1e-9 && q[3].abs() < 1e-9);
        let r = q[2] - q[0];
        let exact = (3.0 * (tr.times[k] + ray.start_time)).powf(2.0 / 3.0);
        assert!((r - exact).abs() <= tol * exact, "{r} vs {exact}");
    }
}

#[test]
fn hyperbolic_busemann_function_is_asymptotically_linear() {
    // increments of u along the direction approach √(2h) times the
    // mass-norm displacement
    let s = two();
    let h = 1.0;
    let d = [-0.5, 0.0, 0.5, 0.0];
    let field = BusemannField::new(&s, h, &d, &d, &FieldOptions { levels: 6, ..FieldOptions::default() }).unwrap();
    let level = 5;
    let u = |t: f64| field.eval(&d.map(|v| v * t), level).unwrap();
    let norm = s.mass_norm(&d).unwrap();
    let ratios: Vec<f64> = [1.0, 2.0, 4.0]
        .iter()
        .map(|&t| (u(2.0 * t) - u(t)) / ((2.0 * h).sqrt() * norm * t))
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    assert!(ratios.iter().all(|r| *r > 1.0), "{ratios:?}");
    assert!(ratios[2] < 1.1, "{ratios:?}");
}

#[test]
fn synthetic_positive_energy_ray_is_hyperbolic() {
    let s = two();
    let d = [-0.5, 0.0, 0.5, 0.0];
    let field = BusemannField::new(&s, 1.0, &d, &d, &FieldOptions::default()).unwrap();
    let ray = generate_calibrating_ray(&field, &d, 1000.0, &RayOptions::default()).unwrap();
    let report = classify(&ray.trajectory);
    assert_eq!(report.class, MotionClass::Hyperbolic, "{:?}", report.notes);
    assert!((ray.trajectory.energy - 1.0).abs() < 1e-12);
}
