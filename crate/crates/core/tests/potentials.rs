//! Free-time potentials against exact radial solutions.

use nbody_geodesics::action::{free_time_potential, FreeTimeOptions};
use nbody_geodesics::MassSystem;

fn two() -> MassSystem {
    MassSystem::equal_masses(2, 2).unwrap()
}

fn radial(r: f64) -> Vec<f64> {
    vec![-0.5 * r, 0.0, 0.5 * r, 0.0]
}

#[test]
fn zero_energy_potential_along_radial_escape() {
    // the radial parabolic arc has action ∫ r^{-1/2} dr = 2(√r₂ - √r₁)
    let s = two();
    for (r1, r2) in [(1.0f64, 2.0f64), (0.5, 3.0), (2.0, 2.5)] {
        let p = free_time_potential(&s, 0.0, &radial(r1), &radial(r2), &FreeTimeOptions::default()).unwrap();
        let exact = 2.0 * (r2.sqrt() - r1.sqrt());
        assert!((p.value - exact).abs() <= 1e-5 * exact, "{r1} -> {r2}: {} vs {exact}", p.value);
        // duration of the arc from r^{3/2} = r₁^{3/2} + 3t
        let t = (r2.powf(1.5) - r1.powf(1.5)) / 3.0;
        assert!((p.duration - t).abs() <= 1e-2 * t, "{} vs {t}", p.duration);
    }
}

#[test]
fn ejection_from_total_collision() {
    let s = two();
    let z = [0.0; 4];
    for r in [0.5f64, 1.0, 2.0] {
        let p = free_time_potential(&s, 0.0, &z, &radial(r), &FreeTimeOptions::fixed_grid(128)).unwrap();
        assert!(p.extrapolated);
        let exact = 2.0 * r.sqrt();
        assert!((p.value - exact).abs() <= 1e-5 * exact, "{} vs {exact}", p.value);
    }
}

#[test]
fn positive_energy_radial_potential() {
    // h = 1: φ = ∫ (2(1 + 1/r))^{1/2} d(r/√2) = ∫ (1 + 1/r)^{1/2} dr
    let s = two();
    let f = |r: f64| {
        let q = (r * (r + 1.0)).sqrt();
        q + (r.sqrt() + (r + 1.0).sqrt()).ln()
    };
    let (r1, r2) = (1.0, 3.0);
    let p = free_time_potential(&s, 1.0, &radial(r1), &radial(r2), &FreeTimeOptions::default()).unwrap();
    let exact = f(r2) - f(r1);
    assert!((p.value - exact).abs() <= 1e-5 * exact, "{} vs {exact}", p.value);
}

#[test]
fn point_on_a_minimizer_saturates_the_triangle_inequality() {
    let s = MassSystem::equal_masses(3, 2).unwrap();
    let x = [-0.6, 0.1, 0.5, -0.3, 0.1, 0.7];
    let z = [-0.2, -0.5, 0.9, 0.4, -0.4, 0.8];
    let opts = FreeTimeOptions::default();
    let xz = free_time_potential(&s, 0.5, &x, &z, &opts).unwrap();
    let path = &xz.report.as_ref().unwrap().path;
    let y = path.node(path.segments() / 2).to_vec();
    let xy = free_time_potential(&s, 0.5, &x, &y, &opts).unwrap();
    let yz = free_time_potential(&s, 0.5, &y, &z, &opts).unwrap();
    let slack = xz.value - xy.value - yz.value;
    assert!(slack <= 1e-6 * (1.0 + xz.value), "{slack}");
    assert!(slack >= -1e-4 * xz.value, "{slack}");
}
