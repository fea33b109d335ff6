//! One function per subcommand. Each validates its block, computes, then
//! writes into the output directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nbody_geodesics::action::{
    boundary_velocities, fixed_time_minimizer, free_time_potential, FreeTimeOptions, GridKind, MinimizeOptions,
    MinimizeReport,
};
use nbody_geodesics::asymptotics::{classify, expansiveness_check, write_exponent_table, AsymptoticReport, ExpansivenessReport, MotionClass};
use nbody_geodesics::dynamics::{energy, propagate, propagate_sampled, StepControls, Termination, Trajectory};
use nbody_geodesics::jm::{certify_geodesic_ray, GeodesicCertificate, Verdict, WindowPlan};
use nbody_geodesics::path::uniform_times;
use nbody_geodesics::weak_kam::{
    busemann_limit, generate_calibrating_ray, BusemannField, CalibrationOptions, FieldOptions, RayOptions,
};
use nbody_geodesics::{DiscretePath, Error, MassSystem};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::scenario::{flatten, Scenario};
use crate::verify;

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub seed: u64,
    pub controls: StepControls,
}

impl RunContext {
    pub fn new(scenario: &Scenario, out: PathBuf, seed: Option<u64>, tol: Option<f64>) -> CliResult<Self> {
        let controls = match tol {
            Some(t) if t > 0.0 && t.is_finite() => StepControls::with_tolerance(t),
            Some(t) => return Err(CliError::Validation(format!("flag `--tol`: must be positive, got {t}"))),
            None => StepControls::default(),
        };
        Ok(Self { out, seed: seed.unwrap_or(scenario.seed), controls })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Io(format!("{}: {e}", self.out.display())))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        self.ensure_dir()?;
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn write_trajectory(&self, name: &str, tr: &Trajectory) -> CliResult<PathBuf> {
        self.ensure_dir()?;
        let path = self.path(name);
        let file = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        tr.write_columns(BufWriter::new(file))?;
        Ok(path)
    }

    fn write_path(&self, name: &str, path: &DiscretePath) -> CliResult<PathBuf> {
        use std::io::Write;
        self.ensure_dir()?;
        let file_path = self.path(name);
        let file = fs::File::create(&file_path).map_err(|e| CliError::Io(format!("{}: {e}", file_path.display())))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# t q...")?;
        for (t, q) in path.times().iter().zip(path.nodes()) {
            write!(out, "{t:.16e}")?;
            for v in q {
                write!(out, " {v:.16e}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(file_path)
    }
}

fn mass_unit(system: &MassSystem, bodies_flat: &[f64]) -> CliResult<Vec<f64>> {
    let norm = system.mass_norm(bodies_flat)?;
    if !(norm > 0.0) {
        return Err(CliError::Validation("direction must be nonzero".into()));
    }
    Ok(bodies_flat.iter().map(|v| v / norm).collect())
}

#[derive(Debug, Serialize)]
struct PropagateSummary<'a> {
    scenario: &'a str,
    energy: f64,
    final_energy: f64,
    max_energy_drift: f64,
    termination: Termination,
    nodes: usize,
    horizon: f64,
}

pub fn cmd_propagate(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.propagate, "propagate")?;
    let (x0, v0) = sc.initial()?;
    let h0 = energy(&sc.system, x0, v0)?;
    let mut controls = ctx.controls;
    if let Some(step) = spec.symplectic_step {
        controls = StepControls { method: nbody_geodesics::dynamics::Method::Symplectic { step }, ..controls };
    }
    let tr = match spec.samples {
        Some(n) => propagate_sampled(&sc.system, x0, v0, &uniform_times(0.0, spec.horizon, n)[1..], &controls)?,
        None => propagate(&sc.system, x0, v0, spec.horizon, &controls)?,
    };
    ctx.write_trajectory("trajectory.txt", &tr)?;
    let last = tr.len() - 1;
    ctx.write_json(
        "summary.json",
        &PropagateSummary {
            scenario: &sc.name,
            energy: h0,
            final_energy: tr.node_energy(last),
            max_energy_drift: tr.max_energy_drift(),
            termination: tr.termination,
            nodes: tr.len(),
            horizon: tr.horizon(),
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FreeTimeRow {
    h: f64,
    value: f64,
    reverse_value: f64,
    symmetry_gap: f64,
    symmetry_ok: bool,
    duration: f64,
    segments: usize,
    converged: bool,
    resolved: bool,
    extrapolated: bool,
    lower_bound_violations: usize,
}

#[derive(Debug, Serialize)]
struct FixedTimeRow {
    duration: f64,
    value: f64,
    lower_bound: f64,
    lower_bound_ok: bool,
    gradient_norm: f64,
    converged: bool,
    min_separation: f64,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct PairRow {
    x: Vec<f64>,
    y: Vec<f64>,
    distance: f64,
    free_time: Vec<FreeTimeRow>,
    fixed_time: Vec<FixedTimeRow>,
}

#[derive(Debug, Serialize)]
struct PotentialReport<'a> {
    scenario: &'a str,
    seed: u64,
    rows: Vec<PairRow>,
    audit_failures: usize,
}

/// Relative tolerance on `|φ_h(x,y) - φ_h(y,x)|`.
pub const SYMMETRY_TOL: f64 = 1e-6;

pub fn cmd_potential(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.potential, "potential")?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = spec
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok((
                flatten(&sc.system, &format!("potential.pairs[{i}].x"), &p.x)?,
                flatten(&sc.system, &format!("potential.pairs[{i}].y"), &p.y)?,
            ))
        })
        .collect::<CliResult<_>>()?;
    let mopts = MinimizeOptions { segments: spec.segments, seed: ctx.seed, ..MinimizeOptions::default() };
    let fopts = FreeTimeOptions { minimize: mopts, ..FreeTimeOptions::default() };
    let mut rows = Vec::new();
    let mut failures = 0;
    for (x, y) in &pairs {
        let distance = sc.system.mass_distance(x, y)?;
        let mut free_time = Vec::new();
        for &h in &spec.energies {
            let a = free_time_potential(&sc.system, h, x, y, &fopts)?;
            let b = free_time_potential(&sc.system, h, y, x, &fopts)?;
            let gap = (a.value - b.value).abs();
            let symmetry_ok = gap <= SYMMETRY_TOL * (1.0 + a.value.abs().max(b.value.abs()));
            failures += usize::from(!symmetry_ok) + a.lower_bound_violations + b.lower_bound_violations;
            free_time.push(FreeTimeRow {
                h,
                value: a.value,
                reverse_value: b.value,
                symmetry_gap: gap,
                symmetry_ok,
                duration: a.duration,
                segments: a.segments,
                converged: a.converged && b.converged,
                resolved: a.resolved && b.resolved,
                extrapolated: a.extrapolated,
                lower_bound_violations: a.lower_bound_violations + b.lower_bound_violations,
            });
        }
        let mut fixed_time = Vec::new();
        for &t in &spec.durations {
            let rep = fixed_time_minimizer(&sc.system, x, y, t, &mopts)?;
            let lower_bound = distance * distance / (2.0 * t);
            let ok = rep.action_value >= lower_bound;
            failures += usize::from(!ok);
            fixed_time.push(FixedTimeRow {
                duration: t,
                value: rep.action_value,
                lower_bound,
                lower_bound_ok: ok,
                gradient_norm: rep.gradient_norm,
                converged: rep.converged,
                min_separation: rep.min_separation,
                iterations: rep.iterations,
            });
        }
        rows.push(PairRow { x: x.clone(), y: y.clone(), distance, free_time, fixed_time });
    }
    ctx.write_json("potential.json", &PotentialReport { scenario: &sc.name, seed: ctx.seed, rows, audit_failures: failures })?;
    if failures > 0 {
        return Err(CliError::Audit(format!("{failures} potential rows failed the symmetry or lower-bound audit")));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MinimizeSummary<'a> {
    scenario: &'a str,
    seed: u64,
    duration: f64,
    action: f64,
    gradient_norm: f64,
    tolerance: f64,
    converged: bool,
    min_separation: f64,
    iterations: usize,
    initial_velocity: Vec<f64>,
    final_velocity: Vec<f64>,
}

pub fn cmd_minimize(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.minimize, "minimize")?;
    let x = flatten(&sc.system, "minimize.x", &spec.x)?;
    let y = flatten(&sc.system, "minimize.y", &spec.y)?;
    let opts = MinimizeOptions {
        segments: spec.segments,
        restarts: spec.restarts,
        grid: if spec.uniform_grid { GridKind::Uniform } else { GridKind::Graded },
        seed: ctx.seed,
        ..MinimizeOptions::default()
    };
    let rep: MinimizeReport = fixed_time_minimizer(&sc.system, &x, &y, spec.duration, &opts)?;
    let (v0, v1) = boundary_velocities(&sc.system, &rep.path)?;
    ctx.write_path("path.txt", &rep.path)?;
    ctx.write_json(
        "minimize.json",
        &MinimizeSummary {
            scenario: &sc.name,
            seed: ctx.seed,
            duration: spec.duration,
            action: rep.action_value,
            gradient_norm: rep.gradient_norm,
            tolerance: rep.tolerance,
            converged: rep.converged,
            min_separation: rep.min_separation,
            iterations: rep.iterations,
            initial_velocity: v0,
            final_velocity: v1,
        },
    )?;
    if !rep.converged {
        return Err(CliError::Convergence(format!(
            "minimizer stopped with gradient norm {:e} above {:e}",
            rep.gradient_norm, rep.tolerance
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassifyOutput<'a> {
    scenario: &'a str,
    report: AsymptoticReport,
    expansiveness: ExpansivenessReport,
}

pub fn cmd_classify(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.classify, "classify")?;
    let (x0, v0) = sc.initial()?;
    let times = uniform_times(0.0, spec.horizon, spec.samples);
    let tr = propagate_sampled(&sc.system, x0, v0, &times[1..], &ctx.controls)?;
    let report = classify(&tr);
    ctx.ensure_dir()?;
    let table = ctx.path("exponents.txt");
    let file = fs::File::create(&table).map_err(|e| CliError::Io(format!("{}: {e}", table.display())))?;
    write_exponent_table(&report.growth_exponents, BufWriter::new(file))?;
    ctx.write_json("classify.json", &ClassifyOutput { scenario: &sc.name, report, expansiveness: expansiveness_check(&tr) })?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct StepSummary {
    radius: f64,
    target: Vec<f64>,
    defect: f64,
    potential: f64,
    duration: f64,
    candidates: usize,
}

#[derive(Debug, Serialize)]
struct RayChecks {
    expected_class: bool,
    certified: bool,
    no_collision: bool,
    calibrated: bool,
}

#[derive(Debug, Serialize)]
struct RayOutput<'a> {
    scenario: &'a str,
    seed: u64,
    energy: f64,
    trajectory_energy: f64,
    direction: Vec<f64>,
    start_time: f64,
    steps: Vec<StepSummary>,
    junction_mismatch: Vec<f64>,
    skeleton_deviation: Vec<f64>,
    failure: Option<String>,
    report: AsymptoticReport,
    expansiveness: ExpansivenessReport,
    certificate: GeodesicCertificate,
    terminal_speed_ratio: f64,
    checks: RayChecks,
}

pub fn cmd_ray(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.ray, "ray")?;
    let x0 = match &spec.start {
        Some(b) => flatten(&sc.system, "ray.start", b)?,
        None => sc.initial()?.0.clone(),
    };
    let direction = match &spec.direction {
        Some(b) => mass_unit(&sc.system, &flatten(&sc.system, "ray.direction", b)?)?,
        None => mass_unit(&sc.system, &x0)?,
    };
    let potential = FreeTimeOptions::fixed_grid(spec.segments);
    let field_opts = FieldOptions { levels: spec.levels, potential };
    let field = BusemannField::new(&sc.system, spec.energy, &direction, &x0, &field_opts)?;
    let opts = RayOptions {
        steps: spec.steps,
        first_radius: spec.first_radius,
        samples: spec.samples,
        calibration: CalibrationOptions { sphere_samples: spec.sphere_samples, seed: ctx.seed, ..CalibrationOptions::default() },
        controls: ctx.controls,
    };
    let ray = generate_calibrating_ray(&field, &x0, spec.horizon, &opts)?;
    let tr = &ray.trajectory;
    let report = classify(tr);
    let expansiveness = expansiveness_check(tr);
    let certificate = certify_geodesic_ray(
        &sc.system,
        spec.energy,
        tr,
        &WindowPlan::Dyadic { levels: spec.window_levels },
        &FreeTimeOptions::default(),
    )?;
    let escape = (2.0 * sc.system.potential_energy(&tr.positions[0])?).sqrt();
    let terminal = sc.system.mass_norm(&tr.velocities[tr.len() - 1])?;
    let expected_class = if spec.energy == 0.0 {
        report.class == MotionClass::Parabolic
    } else {
        matches!(report.class, MotionClass::Hyperbolic | MotionClass::PartiallyHyperbolic)
    };
    let checks = RayChecks {
        expected_class,
        certified: certificate.verdict == Verdict::Certified,
        no_collision: tr.termination == Termination::HorizonReached,
        calibrated: ray.failure.is_none(),
    };
    ctx.write_trajectory("ray.txt", tr)?;
    let failing: Vec<&str> = [
        ("class", checks.expected_class),
        ("certificate", checks.certified),
        ("collision", checks.no_collision),
        ("calibration", checks.calibrated),
    ]
    .iter()
    .filter(|(_, ok)| !ok)
    .map(|(n, _)| *n)
    .collect();
    let out = RayOutput {
        scenario: &sc.name,
        seed: ctx.seed,
        energy: spec.energy,
        trajectory_energy: tr.energy,
        direction,
        start_time: ray.start_time,
        steps: ray
            .steps
            .iter()
            .map(|s| StepSummary {
                radius: s.radius,
                target: s.target.clone(),
                defect: s.defect,
                potential: s.potential,
                duration: s.duration,
                candidates: s.candidates,
            })
            .collect(),
        junction_mismatch: ray.junction_mismatch.clone(),
        skeleton_deviation: ray.skeleton_deviation.clone(),
        failure: ray.failure.clone(),
        report,
        expansiveness,
        certificate,
        terminal_speed_ratio: terminal / escape,
        checks,
    };
    ctx.write_json("ray.json", &out)?;
    if !failing.is_empty() {
        return Err(CliError::Audit(format!("ray checks failed: {}", failing.join(", "))));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BusemannRow {
    x: Vec<f64>,
    value: Option<f64>,
    level: Option<usize>,
    history: Vec<f64>,
    increments: Vec<f64>,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct BusemannOutput<'a> {
    scenario: &'a str,
    energy: f64,
    direction: Vec<f64>,
    horizon_points: Vec<Vec<f64>>,
    cauchy_tol: f64,
    points: Vec<BusemannRow>,
}

pub fn cmd_busemann(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.block(&sc.raw.busemann, "busemann")?;
    let direction = match &spec.direction {
        Some(b) => flatten(&sc.system, "busemann.direction", b)?,
        None => sc.initial()?.0.clone(),
    };
    let points: Vec<Vec<f64>> = spec
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| flatten(&sc.system, &format!("busemann.points[{i}]"), p))
        .collect::<CliResult<_>>()?;
    let field_opts = FieldOptions { levels: spec.levels, potential: FreeTimeOptions::fixed_grid(spec.segments) };
    let field = BusemannField::new(&sc.system, spec.energy, &direction, &direction, &field_opts)?;
    let mut rows = Vec::new();
    let mut unconverged = 0;
    for x in points {
        let row = match busemann_limit(&field, &x, spec.cauchy_tol) {
            Ok(lim) => BusemannRow {
                x,
                value: Some(lim.value),
                level: Some(lim.level),
                history: lim.history,
                increments: lim.increments,
                converged: true,
            },
            Err(Error::NonConvergent { history }) => {
                unconverged += 1;
                let increments = history.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
                BusemannRow { x, value: None, level: None, history, increments, converged: false }
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    ctx.write_json(
        "busemann.json",
        &BusemannOutput {
            scenario: &sc.name,
            energy: spec.energy,
            direction: field.direction().to_vec(),
            horizon_points: (0..field.levels()).map(|n| field.horizon_point(n).to_vec()).collect(),
            cauchy_tol: spec.cauchy_tol,
            points: rows,
        },
    )?;
    if unconverged > 0 {
        return Err(CliError::Convergence(format!("{unconverged} points did not pass the Cauchy test")));
    }
    Ok(())
}

pub fn cmd_verify(sc: &Scenario, ctx: &RunContext) -> CliResult<()> {
    let spec = sc.raw.verify.clone().unwrap_or_default();
    let report = verify::run(&sc.system, &spec, ctx.seed, &ctx.controls)?;
    ctx.write_json("verify.json", &report)?;
    if !report.failing.is_empty() {
        return Err(CliError::Audit(format!("failing suites: {}", report.failing.join(", "))));
    }
    Ok(())
}

/// Loads and validates before dispatching, so nothing is written on a
/// validation error.
pub fn run(command: &str, scenario: &Path, out: PathBuf, seed: Option<u64>, tol: Option<f64>) -> CliResult<()> {
    let sc = Scenario::load(scenario)?;
    let ctx = RunContext::new(&sc, out, seed, tol)?;
    match command {
        "propagate" => cmd_propagate(&sc, &ctx),
        "potential" => cmd_potential(&sc, &ctx),
        "minimize" => cmd_minimize(&sc, &ctx),
        "classify" => cmd_classify(&sc, &ctx),
        "ray" => cmd_ray(&sc, &ctx),
        "busemann" => cmd_busemann(&sc, &ctx),
        "verify" => cmd_verify(&sc, &ctx),
        other => Err(CliError::Validation(format!("unknown command `{other}`"))),
    }
}
