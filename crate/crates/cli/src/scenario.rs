//! TOML scenarios: parsed, then validated into flat configurations before
//! any command runs.

use std::path::Path;

use nbody_geodesics::MassSystem;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Per-body coordinates, `[[x, y], [x, y], …]`.
pub type Bodies = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub masses: Vec<f64>,
    pub dimension: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub positions: Bodies,
    pub velocities: Bodies,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateSpec {
    pub horizon: f64,
    /// Uniform output samples; every accepted step is written when absent.
    pub samples: Option<usize>,
    /// Fixed symplectic step instead of the adaptive scheme.
    pub symplectic_step: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub x: Bodies,
    pub y: Bodies,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub pairs: Vec<PairSpec>,
    #[serde(default = "default_energies")]
    pub energies: Vec<f64>,
    #[serde(default)]
    pub durations: Vec<f64>,
    #[serde(default = "default_segments")]
    pub segments: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeSpec {
    pub x: Bodies,
    pub y: Bodies,
    pub duration: f64,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub uniform_grid: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySpec {
    pub horizon: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaySpec {
    #[serde(default)]
    pub energy: f64,
    #[serde(default = "default_ray_horizon")]
    pub horizon: f64,
    /// Start of the ray; the initial positions when absent.
    pub start: Option<Bodies>,
    /// Direction of the horizon points; the normalized start when absent.
    pub direction: Option<Bodies>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_ray_samples")]
    pub samples: usize,
    pub first_radius: Option<f64>,
    pub sphere_samples: Option<usize>,
    #[serde(default = "default_window_levels")]
    pub window_levels: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusemannSpec {
    #[serde(default)]
    pub energy: f64,
    /// Direction of the horizon points; the initial positions when absent.
    pub direction: Option<Bodies>,
    #[serde(default = "default_busemann_levels")]
    pub levels: usize,
    #[serde(default = "default_cauchy")]
    pub cauchy_tol: f64,
    #[serde(default = "default_segments")]
    pub segments: usize,
    pub points: Vec<Bodies>,
}

/// Replacement bound constants, used to check that the audit notices them.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptConstants {
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "default_triples")]
    pub triples: usize,
    #[serde(default = "default_verify_energies")]
    pub energies: Vec<f64>,
    #[serde(default = "default_triangle_tol")]
    pub triangle_tol: f64,
    #[serde(default = "default_bound_samples")]
    pub bound_samples: usize,
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default = "default_h_max")]
    pub h_max: f64,
    #[serde(default = "default_marchal_ratio")]
    pub marchal_ratio: f64,
    #[serde(default = "default_jm_segments")]
    pub jm_segments: usize,
    #[serde(default = "default_jm_segments")]
    pub jm_nonsolutions: usize,
    #[serde(default = "default_members")]
    pub closedness_members: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    pub corrupt: Option<CorruptConstants>,
}

impl Default for VerifySpec {
    fn default() -> Self {
        toml::from_str("").expect("all verify fields have defaults")
    }
}

fn default_energies() -> Vec<f64> {
    vec![0.0]
}
fn default_segments() -> usize {
    256
}
fn default_restarts() -> usize {
    3
}
fn default_samples() -> usize {
    2000
}
fn default_ray_horizon() -> f64 {
    1000.0
}
fn default_steps() -> usize {
    3
}
fn default_levels() -> usize {
    6
}
fn default_busemann_levels() -> usize {
    8
}
fn default_ray_samples() -> usize {
    2048
}
fn default_window_levels() -> usize {
    4
}
fn default_cauchy() -> f64 {
    5e-3
}
fn default_triples() -> usize {
    100
}
fn default_verify_energies() -> Vec<f64> {
    vec![0.0, 0.5]
}
fn default_triangle_tol() -> f64 {
    1e-5
}
fn default_bound_samples() -> usize {
    200
}
fn default_holdout() -> usize {
    100
}
fn default_h_max() -> f64 {
    1.0
}
fn default_marchal_ratio() -> f64 {
    1e-3
}
fn default_jm_segments() -> usize {
    10
}
fn default_members() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub system: SystemSpec,
    pub initial: Option<InitialSpec>,
    pub propagate: Option<PropagateSpec>,
    pub potential: Option<PotentialSpec>,
    pub minimize: Option<MinimizeSpec>,
    pub classify: Option<ClassifySpec>,
    pub ray: Option<RaySpec>,
    pub busemann: Option<BusemannSpec>,
    pub verify: Option<VerifySpec>,
}

/// Validated scenario. Configurations are flat `N·d` vectors.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub system: MassSystem,
    pub initial: Option<(Vec<f64>, Vec<f64>)>,
    pub raw: RawScenario,
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("field `{field}`: {msg}"))
}

/// Flattens per-body coordinates after checking counts and finiteness.
pub fn flatten(system: &MassSystem, field: &str, bodies: &Bodies) -> CliResult<Vec<f64>> {
    if bodies.len() != system.bodies() {
        return Err(bad(field, format!("expected {} bodies, got {}", system.bodies(), bodies.len())));
    }
    let mut out = Vec::with_capacity(system.len());
    for (i, b) in bodies.iter().enumerate() {
        if b.len() != system.dimension() {
            return Err(bad(&format!("{field}[{i}]"), format!("expected {} coordinates, got {}", system.dimension(), b.len())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(bad(&format!("{field}[{i}]"), "non-finite coordinate"));
        }
        out.extend(b);
    }
    Ok(out)
}

fn positive(field: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> CliResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be nonnegative and finite, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> CliResult<()> {
    if v >= min {
        Ok(())
    } else {
        Err(bad(field, format!("must be at least {min}, got {v}")))
    }
}

impl Scenario {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(msg) => CliError::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        Self::validate(raw)
    }

    fn validate(raw: RawScenario) -> CliResult<Self> {
        for (i, m) in raw.system.masses.iter().enumerate() {
            positive(&format!("system.masses[{i}]"), *m)?;
        }
        let system = MassSystem::new(raw.system.masses.clone(), raw.system.dimension).map_err(|e| bad("system", e))?;
        let initial = match &raw.initial {
            Some(init) => {
                let x = flatten(&system, "initial.positions", &init.positions)?;
                let v = flatten(&system, "initial.velocities", &init.velocities)?;
                Some((x, v))
            }
            None => None,
        };
        if let Some(p) = &raw.propagate {
            positive("propagate.horizon", p.horizon)?;
            if let Some(n) = p.samples {
                at_least("propagate.samples", n, 1)?;
            }
            if let Some(h) = p.symplectic_step {
                positive("propagate.symplectic_step", h)?;
            }
        }
        if let Some(p) = &raw.potential {
            if p.pairs.is_empty() {
                return Err(bad("potential.pairs", "at least one pair is required"));
            }
            for (i, pair) in p.pairs.iter().enumerate() {
                flatten(&system, &format!("potential.pairs[{i}].x"), &pair.x)?;
                flatten(&system, &format!("potential.pairs[{i}].y"), &pair.y)?;
            }
            for (i, h) in p.energies.iter().enumerate() {
                nonnegative(&format!("potential.energies[{i}]"), *h)?;
            }
            for (i, t) in p.durations.iter().enumerate() {
                positive(&format!("potential.durations[{i}]"), *t)?;
            }
            at_least("potential.segments", p.segments, 2)?;
        }
        if let Some(m) = &raw.minimize {
            flatten(&system, "minimize.x", &m.x)?;
            flatten(&system, "minimize.y", &m.y)?;
            positive("minimize.duration", m.duration)?;
            at_least("minimize.segments", m.segments, 2)?;
        }
        if let Some(c) = &raw.classify {
            positive("classify.horizon", c.horizon)?;
            at_least("classify.samples", c.samples, 32)?;
        }
        if let Some(r) = &raw.ray {
            nonnegative("ray.energy", r.energy)?;
            positive("ray.horizon", r.horizon)?;
            if let Some(s) = &r.start {
                flatten(&system, "ray.start", s)?;
            } else if initial.is_none() {
                return Err(bad("ray.start", "required without an [initial] block"));
            }
            if let Some(d) = &r.direction {
                flatten(&system, "ray.direction", d)?;
            }
            at_least("ray.steps", r.steps, 1)?;
            at_least("ray.levels", r.levels, 1)?;
            at_least("ray.segments", r.segments, 2)?;
            at_least("ray.samples", r.samples, 32)?;
            if let Some(v) = r.first_radius {
                positive("ray.first_radius", v)?;
            }
        }
        if let Some(b) = &raw.busemann {
            nonnegative("busemann.energy", b.energy)?;
            if let Some(d) = &b.direction {
                flatten(&system, "busemann.direction", d)?;
            } else if initial.is_none() {
                return Err(bad("busemann.direction", "required without an [initial] block"));
            }
            at_least("busemann.levels", b.levels, 2)?;
            positive("busemann.cauchy_tol", b.cauchy_tol)?;
            at_least("busemann.segments", b.segments, 2)?;
            if b.points.is_empty() {
                return Err(bad("busemann.points", "at least one point is required"));
            }
            for (i, p) in b.points.iter().enumerate() {
                flatten(&system, &format!("busemann.points[{i}]"), p)?;
            }
        }
        if let Some(v) = &raw.verify {
            at_least("verify.triples", v.triples, 1)?;
            for (i, h) in v.energies.iter().enumerate() {
                nonnegative(&format!("verify.energies[{i}]"), *h)?;
            }
            positive("verify.triangle_tol", v.triangle_tol)?;
            at_least("verify.bound_samples", v.bound_samples, 1)?;
            at_least("verify.holdout", v.holdout, 1)?;
            nonnegative("verify.h_max", v.h_max)?;
            positive("verify.marchal_ratio", v.marchal_ratio)?;
            at_least("verify.jm_segments", v.jm_segments, 1)?;
            at_least("verify.closedness_members", v.closedness_members, 1)?;
            at_least("verify.segments", v.segments, 2)?;
            if let Some(c) = v.corrupt {
                positive("verify.corrupt.c1", c.c1)?;
                positive("verify.corrupt.c2", c.c2)?;
            }
        }
        Ok(Self {
            name: raw.name.clone().unwrap_or_else(|| "scenario".into()),
            seed: raw.seed.unwrap_or(0),
            system,
            initial,
            raw,
        })
    }

    pub fn initial(&self) -> CliResult<&(Vec<f64>, Vec<f64>)> {
        self.initial.as_ref().ok_or_else(|| bad("initial", "this command needs initial positions and velocities"))
    }

    pub fn block<'a, T>(&self, block: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        block.as_ref().ok_or_else(|| bad(name, "block is missing"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[system]\nmasses = [1.0, 1.0]\ndimension = 2\n";

    #[test]
    fn minimal_scenario_parses_with_seed_zero() {
        let s = Scenario::parse(BASE).unwrap();
        assert_eq!(s.seed, 0);
        assert!(s.initial.is_none());
    }

    #[test]
    fn nonpositive_mass_names_the_field() {
        let err = Scenario::parse("[system]\nmasses = [1.0, -2.0]\ndimension = 2\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("system.masses[1]"), "{err}");
    }

    #[test]
    fn wrong_body_width_names_the_body() {
        let text = format!("{BASE}[initial]\npositions = [[0.0, 0.0], [1.0, 0.0, 2.0]]\nvelocities = [[0.0, 0.0], [0.0, 0.0]]\n");
        let err = Scenario::parse(&text).unwrap_err();
        assert!(err.to_string().contains("initial.positions[1]"), "{err}");
    }

    #[test]
    fn unknown_keys_report_a_line() {
        let err = Scenario::parse(&format!("{BASE}[propagate]\nhorizon = 1.0\nhorizn = 2.0\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizn") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn verify_defaults() {
        let v = VerifySpec::default();
        assert_eq!(v.triples, 100);
        assert_eq!(v.energies, vec![0.0, 0.5]);
        assert!(v.corrupt.is_none());
    }
}
