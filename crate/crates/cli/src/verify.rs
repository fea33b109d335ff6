//! Consolidated audit: distance axioms, action bounds, separation of
//! minimizers, JM equivalence and the closedness experiment.

use nbody_geodesics::action::{
    discrete_action, fit_bound_from_potentials, fixed_time_minimizer, free_time_potential, triangle_inequality_audit,
    BoundConstants, BoundSample, FreeTimeOptions, MinimizeOptions, MinimizeReport, Triple, BOUND_MARGIN,
};
use nbody_geodesics::dynamics::{propagate_sampled, StepControls, Termination};
use nbody_geodesics::jm::jm_length;
use nbody_geodesics::path::uniform_times;
use nbody_geodesics::weak_kam::{closedness_experiment, ClosednessOptions, ClosednessReport};
use nbody_geodesics::{DiscretePath, Error, MassSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliResult;
use crate::scenario::VerifySpec;

/// Smallest mutual distance in sampled configurations.
pub const CORPUS_SEPARATION: f64 = 0.3;
/// Smallest mutual distance along accepted JM test segments.
pub const JM_SEPARATION: f64 = 0.2;
pub const JM_DURATION: f64 = 0.5;
pub const JM_NODES: usize = 128;
pub const JM_REL_TOL: f64 = 1e-4;
/// Accepted range of the gap ratio under node doubling.
pub const JM_RATIO: (f64, f64) = (3.5, 4.5);

/// Rejection sample with bodies in `[-1, 1]^d` and every mutual distance at
/// least `min_sep`.
pub fn random_configuration(system: &MassSystem, rng: &mut ChaCha8Rng, min_sep: f64) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..system.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        if system.min_max_separation(&x).map(|(r, _)| r >= min_sep).unwrap_or(false) {
            return x;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult<T> {
    pub passed: bool,
    pub details: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyAudit {
    pub h: f64,
    pub worst_slack: f64,
    pub worst_symmetry: f64,
    pub lower_bound_violations: usize,
    pub unconverged_rows: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceAxioms {
    pub triples: usize,
    pub tolerance: f64,
    pub energies: Vec<EnergyAudit>,
    /// Largest `|φ_h(x, x)|` over all triples and energies.
    pub max_self_distance: f64,
    /// Fixed-time samples with `φ(x, y, T) < ‖x - y‖²/(2T)`.
    pub fixed_time_lower_bound_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActionBounds {
    pub constants: BoundConstants,
    pub fitted: BoundConstants,
    pub corrupted: bool,
    pub fit_samples: usize,
    pub fit_violations: usize,
    pub holdout: usize,
    pub holdout_violations: usize,
    /// Largest `φ_h / μ(1.01‖x - y‖)` on the held-out set.
    pub worst_holdout_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarchalSeparation {
    pub ratio: f64,
    pub checked: usize,
    pub unconverged: usize,
    pub violations: usize,
    /// Smallest `min r_ij / endpoint scale` over checked minimizers.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JmSegment {
    pub h: f64,
    pub length: f64,
    pub action: f64,
    pub relative_gap: f64,
    pub gap_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JmEquivalence {
    pub segments: Vec<JmSegment>,
    pub rejected_starts: usize,
    pub nonsolutions: usize,
    pub nonsolution_violations: usize,
}

/// A member that fails its own certificate ends the experiment early.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosednessOutcome {
    Completed(ClosednessReport),
    MemberRejected(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct Suites {
    pub distance_axioms: SuiteResult<DistanceAxioms>,
    pub action_bounds: SuiteResult<ActionBounds>,
    pub marchal: SuiteResult<MarchalSeparation>,
    pub jm_equivalence: SuiteResult<JmEquivalence>,
    pub closedness: SuiteResult<ClosednessOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub bodies: usize,
    pub dimension: usize,
    pub bound_constants: BoundConstants,
    pub suites: Suites,
    pub failing: Vec<String>,
    pub passed: bool,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn potential_options(spec: &VerifySpec, seed: u64) -> FreeTimeOptions {
    let mut o = FreeTimeOptions::fixed_grid(spec.segments);
    o.minimize.seed = seed;
    o
}

fn distance_axioms(system: &MassSystem, spec: &VerifySpec, rng: &mut ChaCha8Rng, seed: u64, fixed_violations: usize) -> CliResult<SuiteResult<DistanceAxioms>> {
    let triples: Vec<Triple> = (0..spec.triples)
        .map(|_| {
            let x = random_configuration(system, rng, CORPUS_SEPARATION);
            let y = random_configuration(system, rng, CORPUS_SEPARATION);
            let z = random_configuration(system, rng, CORPUS_SEPARATION);
            (x, y, z)
        })
        .collect();
    let opts = potential_options(spec, seed);
    let mut energies = Vec::new();
    let mut max_self = 0.0f64;
    for &h in &spec.energies {
        let audit = triangle_inequality_audit(system, h, &triples, &opts)?;
        for (x, _, _) in &triples {
            max_self = max_self.max(free_time_potential(system, h, x, x, &opts)?.value.abs());
        }
        energies.push(EnergyAudit {
            h,
            worst_slack: audit.worst_slack,
            worst_symmetry: audit.worst_symmetry,
            lower_bound_violations: audit.lower_bound_violations,
            unconverged_rows: audit.rows.iter().filter(|r| !r.converged).count(),
            passed: audit.passes(spec.triangle_tol),
        });
    }
    let passed = energies.iter().all(|e| e.passed) && max_self == 0.0 && fixed_violations == 0;
    Ok(SuiteResult {
        passed,
        details: DistanceAxioms {
            triples: spec.triples,
            tolerance: spec.triangle_tol,
            energies,
            max_self_distance: max_self,
            fixed_time_lower_bound_violations: fixed_violations,
        },
    })
}

struct BoundCorpus {
    samples: Vec<BoundSample>,
    reports: Vec<MinimizeReport>,
}

fn bound_corpus(system: &MassSystem, spec: &VerifySpec, rng: &mut ChaCha8Rng, seed: u64) -> CliResult<BoundCorpus> {
    let samples: Vec<BoundSample> = (0..spec.bound_samples)
        .map(|_| {
            let x = random_configuration(system, rng, CORPUS_SEPARATION);
            let y = random_configuration(system, rng, CORPUS_SEPARATION);
            BoundSample { x, y, t: log_uniform(rng, 0.1, 10.0) }
        })
        .collect();
    let mopts = MinimizeOptions { segments: spec.segments, seed, ..MinimizeOptions::default() };
    let reports = samples
        .par_iter()
        .map(|s| fixed_time_minimizer(system, &s.x, &s.y, s.t, &mopts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BoundCorpus { samples, reports })
}

struct Holdout {
    x: Vec<f64>,
    y: Vec<f64>,
    h: f64,
}

fn action_bounds(
    system: &MassSystem,
    spec: &VerifySpec,
    corpus: &BoundCorpus,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> CliResult<(SuiteResult<ActionBounds>, Vec<MinimizeReport>)> {
    let potentials: Vec<f64> = corpus.reports.iter().map(|r| r.action_value).collect();
    let fit = fit_bound_from_potentials(system, spec.h_max, &corpus.samples, potentials.clone())?;
    let constants = match spec.corrupt {
        Some(c) => BoundConstants::new(c.c1, c.c2, spec.h_max),
        None => fit.constants,
    };
    let fit_violations = corpus
        .samples
        .iter()
        .zip(&potentials)
        .filter(|(s, phi)| {
            let l = BOUND_MARGIN * system.mass_distance_unchecked(&s.x, &s.y);
            **phi > constants.fixed_time_bound(l, s.t) * (1.0 + 1e-12)
        })
        .count();
    let holdout: Vec<Holdout> = (0..spec.holdout)
        .map(|_| {
            let x = random_configuration(system, rng, CORPUS_SEPARATION);
            let y = random_configuration(system, rng, CORPUS_SEPARATION);
            Holdout { x, y, h: rng.random_range(0.0..=spec.h_max) }
        })
        .collect();
    let opts = potential_options(spec, seed);
    let results = holdout
        .par_iter()
        .map(|s| free_time_potential(system, s.h, &s.x, &s.y, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut holdout_violations = 0;
    let mut worst = 0.0f64;
    for (s, r) in holdout.iter().zip(&results) {
        let bound = constants.mu(BOUND_MARGIN * system.mass_distance_unchecked(&s.x, &s.y));
        worst = worst.max(r.value / bound);
        if r.value > bound {
            holdout_violations += 1;
        }
    }
    let reports = results.into_iter().filter_map(|r| r.report).collect();
    let passed = fit_violations == 0 && holdout_violations == 0 && constants.c1.is_finite() && constants.c2.is_finite();
    Ok((
        SuiteResult {
            passed,
            details: ActionBounds {
                constants,
                fitted: fit.constants,
                corrupted: spec.corrupt.is_some(),
                fit_samples: corpus.samples.len(),
                fit_violations,
                holdout: spec.holdout,
                holdout_violations,
                worst_holdout_ratio: worst,
            },
        },
        reports,
    ))
}

fn marchal(system: &MassSystem, spec: &VerifySpec, reports: &[&MinimizeReport]) -> SuiteResult<MarchalSeparation> {
    let mut checked = 0;
    let mut unconverged = 0;
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for r in reports {
        if !r.converged {
            unconverged += 1;
            continue;
        }
        checked += 1;
        let scale = system.min_max_unchecked(r.path.start()).1.max(system.min_max_unchecked(r.path.end()).1);
        let ratio = r.min_separation / scale;
        worst = worst.min(ratio);
        if ratio < spec.marchal_ratio {
            violations += 1;
        }
    }
    SuiteResult {
        passed: violations == 0 && checked > 0,
        details: MarchalSeparation { ratio: spec.marchal_ratio, checked, unconverged, violations, worst_ratio: worst },
    }
}

/// Solution segment on `JM_NODES` and `2·JM_NODES` uniform nodes. `None`
/// when the segment comes closer than `JM_SEPARATION` to a collision.
fn jm_segment(system: &MassSystem, h: f64, x: &[f64], v: &[f64], controls: &StepControls) -> CliResult<Option<JmSegment>> {
    let mut gaps = Vec::new();
    let mut last = None;
    for m in [JM_NODES, 2 * JM_NODES] {
        let times = uniform_times(0.0, JM_DURATION, m);
        let tr = propagate_sampled(system, x, v, &times[1..], controls)?;
        if tr.termination != Termination::HorizonReached
            || tr.positions.iter().any(|q| system.min_max_unchecked(q).0 < JM_SEPARATION)
        {
            return Ok(None);
        }
        let path = DiscretePath::new(tr.times.clone(), tr.positions.clone())?;
        let length = jm_length(system, h, &path)?;
        let action = tr.action_between(0, tr.len() - 1, h);
        gaps.push((action - length).abs() / action);
        last = Some((length, action));
    }
    let (length, action) = last.expect("two grids");
    Ok(Some(JmSegment { h, length, action, relative_gap: gaps[0], gap_ratio: gaps[0] / gaps[1] }))
}

fn wavy_path(system: &MassSystem, rng: &mut ChaCha8Rng) -> CliResult<DiscretePath> {
    let x = random_configuration(system, rng, CORPUS_SEPARATION);
    let y = random_configuration(system, rng, CORPUS_SEPARATION);
    let amp: Vec<f64> = (0..system.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
    let m = 64;
    let times = uniform_times(0.0, log_uniform(rng, 0.3, 3.0), m);
    let nodes = (0..=m)
        .map(|k| {
            let s = k as f64 / m as f64;
            let bump = (std::f64::consts::PI * s).sin() * (1.0 + (5.0 * std::f64::consts::PI * s).sin());
            x.iter().zip(&y).zip(&amp).map(|((a, b), c)| a + s * (b - a) + c * bump).collect()
        })
        .collect();
    Ok(DiscretePath::new(times, nodes)?)
}

fn jm_equivalence(system: &MassSystem, spec: &VerifySpec, rng: &mut ChaCha8Rng, controls: &StepControls) -> CliResult<SuiteResult<JmEquivalence>> {
    let mut segments = Vec::new();
    let mut rejected = 0;
    let energies = [0.0, 1.0];
    let mut k = 0;
    while segments.len() < spec.jm_segments {
        let h = energies[k % 2];
        let x = random_configuration(system, rng, CORPUS_SEPARATION);
        let dir: Vec<f64> = (0..system.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let speed = (2.0 * (h + system.potential_energy(&x)?)).sqrt();
        let norm = system.mass_norm(&dir)?;
        let v: Vec<f64> = dir.iter().map(|c| c * speed / norm).collect();
        match jm_segment(system, h, &x, &v, controls)? {
            Some(seg) => {
                segments.push(seg);
                k += 1;
            }
            None => rejected += 1,
        }
    }
    let mut nonsolution_violations = 0;
    for i in 0..spec.jm_nonsolutions {
        let path = wavy_path(system, rng)?;
        let h = energies[i % 2];
        if jm_length(system, h, &path)? >= discrete_action(system, &path, h)? {
            nonsolution_violations += 1;
        }
    }
    let passed = nonsolution_violations == 0
        && segments
            .iter()
            .all(|s| s.relative_gap <= JM_REL_TOL && s.gap_ratio >= JM_RATIO.0 && s.gap_ratio <= JM_RATIO.1);
    Ok(SuiteResult {
        passed,
        details: JmEquivalence { segments, rejected_starts: rejected, nonsolutions: spec.jm_nonsolutions, nonsolution_violations },
    })
}

/// Radial two-body data with energies `1 + 1/k`, converging to `h = 1`.
pub fn radial_family(members: usize) -> (MassSystem, Vec<(Vec<f64>, Vec<f64>)>, (Vec<f64>, Vec<f64>)) {
    let system = MassSystem::equal_masses(2, 2).expect("two bodies in the plane");
    let x0 = vec![-0.5, 0.0, 0.5, 0.0];
    let datum = |h: f64| {
        let s = (1.0 + h).sqrt();
        (x0.clone(), vec![-s, 0.0, s, 0.0])
    };
    let family = (1..=members).map(|k| datum(1.0 + 1.0 / k as f64)).collect();
    (system, family, datum(1.0))
}

fn closedness(spec: &VerifySpec, controls: &StepControls) -> CliResult<SuiteResult<ClosednessOutcome>> {
    let (system, family, limit) = radial_family(spec.closedness_members);
    let opts = ClosednessOptions { controls: *controls, ..ClosednessOptions::default() };
    Ok(match closedness_experiment(&system, &family, (&limit.0, &limit.1), &opts) {
        Ok(report) => SuiteResult { passed: report.passes, details: ClosednessOutcome::Completed(report) },
        Err(Error::InvalidInput(msg)) => SuiteResult { passed: false, details: ClosednessOutcome::MemberRejected(msg) },
        Err(e) => return Err(e.into()),
    })
}

/// Runs every suite from one seeded generator; the draw order is fixed so
/// the report depends only on `seed` and `spec`.
pub fn run(system: &MassSystem, spec: &VerifySpec, seed: u64, controls: &StepControls) -> CliResult<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = bound_corpus(system, spec, &mut rng, seed)?;
    let fixed_violations = corpus
        .samples
        .iter()
        .zip(&corpus.reports)
        .filter(|(s, r)| {
            let d = system.mass_distance_unchecked(&s.x, &s.y);
            r.action_value < d * d / (2.0 * s.t)
        })
        .count();
    let (action_bounds, holdout_reports) = action_bounds(system, spec, &corpus, &mut rng, seed)?;
    let distance_axioms = distance_axioms(system, spec, &mut rng, seed, fixed_violations)?;
    let all_reports: Vec<&MinimizeReport> = corpus.reports.iter().chain(&holdout_reports).collect();
    let marchal = marchal(system, spec, &all_reports);
    let jm_equivalence = jm_equivalence(system, spec, &mut rng, controls)?;
    let closedness = closedness(spec, controls)?;
    let mut failing = Vec::new();
    for (name, ok) in [
        ("distance_axioms", distance_axioms.passed),
        ("action_bounds", action_bounds.passed),
        ("marchal", marchal.passed),
        ("jm_equivalence", jm_equivalence.passed),
        ("closedness", closedness.passed),
    ] {
        if !ok {
            failing.push(name.to_string());
        }
    }
    Ok(VerifyReport {
        seed,
        bodies: system.bodies(),
        dimension: system.dimension(),
        bound_constants: action_bounds.details.constants,
        passed: failing.is_empty(),
        suites: Suites { distance_axioms, action_bounds, marchal, jm_equivalence, closedness },
        failing,
    })
}
