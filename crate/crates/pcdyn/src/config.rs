//! Scenario files.
//!
//! A scenario is a TOML document. Everything except the particle list has a
//! default; command-line flags override file values after parsing.
//!
//! ```toml
//! models = ["darwin", "rr_reduced"]
//! epsilons = [0.1, 0.03, 0.01]
//! t_end = 1.0
//!
//! [[particles]]
//! charge = 1.0
//! mass = 1.0
//! position = [0.5, 0.0, 0.0]
//! velocity = [0.0, 0.2, 0.0]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use pcdyn_core::forces::Model;
use pcdyn_core::integrate::{CollisionGuard, Method, StepperConfig};
use pcdyn_core::manifold::Regularization;
use pcdyn_core::{FormFactor, ParticleSystem, PhaseState, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Models selectable from a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Coulomb,
    Darwin,
    RrReduced,
    ThirdOrder,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Coulomb => "coulomb",
            ModelKind::Darwin => "darwin",
            ModelKind::RrReduced => "rr_reduced",
            ModelKind::ThirdOrder => "third_order",
        }
    }

    /// The second-order model behind this kind, if any.
    pub fn second_order(self) -> Option<Model> {
        match self {
            ModelKind::Coulomb => Some(Model::Coulomb),
            ModelKind::Darwin => Some(Model::Darwin),
            ModelKind::RrReduced => Some(Model::RrReduced),
            ModelKind::ThirdOrder => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coulomb" => Ok(ModelKind::Coulomb),
            "darwin" => Ok(ModelKind::Darwin),
            "rr_reduced" | "rr-reduced" => Ok(ModelKind::RrReduced),
            "third_order" | "third-order" => Ok(ModelKind::ThirdOrder),
            other => Err(format!("unknown model `{other}` (expected coulomb, darwin, rr_reduced or third_order)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub charge: f64,
    /// Effective inertial mass `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    /// Effective mass `m*` of the quartic kinetic term; defaults to `mass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star_mass: Option<f64>,
    /// Bare mass; the electromagnetic mass of `[form_factor]` is added.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bare_mass: Option<f64>,
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
}

/// Random initial data drawn from the scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    #[serde(default = "default_charge_range")]
    pub charge_range: [f64; 2],
    #[serde(default = "default_mass_range")]
    pub mass_range: [f64; 2],
    /// Half-width of the cube positions are drawn from.
    #[serde(default = "default_box")]
    pub box_half_width: f64,
    #[serde(default = "default_speed")]
    pub max_speed: f64,
    /// Minimum pair separation of accepted draws.
    #[serde(default = "default_min_sep")]
    pub min_separation: f64,
    /// Draw charge signs at random instead of all positive.
    #[serde(default)]
    pub mixed_signs: bool,
}

fn default_charge_range() -> [f64; 2] {
    [0.5, 1.5]
}
fn default_mass_range() -> [f64; 2] {
    [0.5, 2.0]
}
fn default_box() -> f64 {
    1.0
}
fn default_speed() -> f64 {
    0.3
}
fn default_min_sep() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormFactorSpec {
    pub radius: f64,
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
}

fn default_sharpness() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepperSpec {
    pub method: MethodSpec,
    /// Fixed step (RK4) or initial step (RK45, `0` = automatic).
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub kappa: f64,
    pub record_every: usize,
}

impl Default for StepperSpec {
    fn default() -> Self {
        let d = StepperConfig::default();
        StepperSpec {
            method: MethodSpec::Rk45,
            step: d.step,
            rtol: d.rtol,
            atol: d.atol,
            max_steps: d.max_steps,
            kappa: d.kappa,
            record_every: d.record_every,
        }
    }
}

impl StepperSpec {
    pub fn to_config(&self) -> StepperConfig {
        StepperConfig {
            method: match self.method {
                MethodSpec::Rk4 => Method::Rk4,
                MethodSpec::Rk45 => Method::Rk45,
            },
            step: self.step,
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
            kappa: self.kappa,
            record_every: self.record_every,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_radius: Option<f64>,
}

/// Band constants; missing ones are derived from the initial data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThirdOrderMode {
    /// Runaway-free solution through backward integration and shooting.
    OnManifold,
    /// Plain forward integration from `manifold_init + y_offset`.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThirdOrderSpec {
    pub mode: ThirdOrderMode,
    pub refine_steps: usize,
    pub y_offset: [f64; 3],
    /// Forward runs stop as runaway once `|y|` exceeds this.
    pub runaway_threshold: f64,
    pub shooting_tolerance: f64,
    pub shooting_iterations: usize,
}

impl Default for ThirdOrderSpec {
    fn default() -> Self {
        ThirdOrderSpec {
            mode: ThirdOrderMode::OnManifold,
            refine_steps: 1,
            y_offset: [0.0; 3],
            runaway_threshold: 1e6,
            shooting_tolerance: 1e-10,
            shooting_iterations: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Uniform resampling points for comparisons.
    pub samples: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("pcdyn-out"), samples: 201 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub particles: Vec<ParticleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form_factor: Option<FormFactorSpec>,
    #[serde(default)]
    pub stepper: StepperSpec,
    #[serde(default)]
    pub guard: GuardSpec,
    #[serde(default)]
    pub regularization: RegularizationSpec,
    #[serde(default)]
    pub third_order: ThirdOrderSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seed() -> u64 {
    0
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Darwin]
}

/// Configuration problems; the message names the offending field.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

/// Values from command-line flags that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the ε list when non-empty.
    pub epsilons: Vec<f64>,
    /// Replaces the model list when non-empty.
    pub models: Vec<ModelKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub system: ParticleSystem,
    pub initial: PhaseState,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario configs always serialize")
    }

    pub fn apply(&mut self, o: &Overrides) {
        match o.epsilons.as_slice() {
            [] => {}
            [one] => {
                self.epsilon = Some(*one);
                self.epsilons.clear();
            }
            many => {
                self.epsilon = None;
                self.epsilons = many.to_vec();
            }
        }
        if !o.models.is_empty() {
            self.models = o.models.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if let Some(tol) = o.tol {
            self.stepper.rtol = tol;
            self.stepper.atol = 1e-2 * tol;
        }
    }

    /// The ε values to run, in ascending order. A single `epsilon` wins over
    /// an `epsilons` list only when the list is empty.
    pub fn epsilon_list(&self) -> Vec<f64> {
        let mut v = if self.epsilons.is_empty() { self.epsilon.into_iter().collect() } else { self.epsilons.clone() };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    fn validate_numbers(&self) -> Result<(), ConfigError> {
        let eps = self.epsilon_list();
        if eps.is_empty() {
            return Err(invalid("epsilon", "set `epsilon` or a non-empty `epsilons` list"));
        }
        for (i, e) in eps.iter().enumerate() {
            if !(*e > 0.0 && *e <= 1.0) {
                let field = if self.epsilons.is_empty() { "epsilon".to_string() } else { format!("epsilons[{i}]") };
                return Err(invalid(field, format!("{e} is outside (0, 1]")));
            }
        }
        if self.models.is_empty() {
            return Err(invalid("models", "at least one model is required"));
        }
        if !(self.t_end.is_finite() && self.t_start.is_finite() && self.t_end > self.t_start) {
            return Err(invalid("t_end", "must be finite and greater than t_start"));
        }
        if self.stepper.method == MethodSpec::Rk4 && !(self.stepper.step > 0.0) {
            return Err(invalid("stepper.step", "RK4 needs a positive step"));
        }
        for (name, v) in [
            ("stepper.rtol", self.stepper.rtol),
            ("stepper.atol", self.stepper.atol),
            ("stepper.kappa", self.stepper.kappa),
        ] {
            if !(v > 0.0) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.stepper.record_every == 0 {
            return Err(invalid("stepper.record_every", "must be positive"));
        }
        if self.output.samples < 2 {
            return Err(invalid("output.samples", "need at least 2"));
        }
        Ok(())
    }

    fn particle_specs(&self) -> Result<Vec<ParticleSpec>, ConfigError> {
        match (&self.generate, self.particles.is_empty()) {
            (Some(_), false) => Err(invalid("generate", "give either [[particles]] or [generate], not both")),
            (None, true) => Err(invalid("particles", "no particles given")),
            (None, false) => Ok(self.particles.clone()),
            (Some(g), true) => generate(g, self.seed),
        }
    }

    /// Validates everything and builds the particle system and initial state.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        self.validate_numbers()?;
        let specs = self.particle_specs()?;
        let n = specs.len();
        let mut charges = Vec::with_capacity(n);
        let mut masses = Vec::with_capacity(n);
        let mut stars = Vec::with_capacity(n);
        let mut bares = Vec::with_capacity(n);
        let uses_bare = specs.iter().any(|p| p.bare_mass.is_some());
        for (i, p) in specs.iter().enumerate() {
            let field = |f: &str| format!("particles[{i}].{f}");
            if !p.charge.is_finite() {
                return Err(invalid(field("charge"), "must be finite"));
            }
            if p.position.iter().chain(&p.velocity).any(|x| !x.is_finite()) {
                return Err(invalid(field("position"), "position and velocity must be finite"));
            }
            match (p.mass, p.bare_mass, uses_bare) {
                (Some(_), Some(_), _) => return Err(invalid(field("mass"), "give either mass or bare_mass")),
                (Some(_), None, true) | (None, Some(_), false) => {
                    return Err(invalid(field("mass"), "all particles must use mass, or all bare_mass"))
                }
                (None, None, _) => return Err(invalid(field("mass"), "missing mass (or bare_mass)")),
                (Some(m), None, false) => {
                    if !(m > 0.0) {
                        return Err(invalid(field("mass"), "must be positive"));
                    }
                    let ms = p.star_mass.unwrap_or(m);
                    if !(ms > 0.0) {
                        return Err(invalid(field("star_mass"), "must be positive"));
                    }
                    masses.push(m);
                    stars.push(ms);
                }
                (None, Some(b), true) => {
                    if p.star_mass.is_some() {
                        return Err(invalid(field("star_mass"), "derived from bare_mass; do not set it"));
                    }
                    bares.push(b);
                }
            }
            charges.push(p.charge);
        }
        let system = if uses_bare {
            let ff =
                self.form_factor.as_ref().ok_or_else(|| invalid("form_factor", "bare masses need [form_factor]"))?;
            let ff = FormFactor::with_sharpness(ff.radius, ff.sharpness)
                .map_err(|e| invalid("form_factor", e.to_string()))?;
            let me = ff.electromagnetic_mass().map_err(|e| invalid("form_factor", e.to_string()))?;
            ParticleSystem::from_bare(charges, bares, me)
        } else {
            ParticleSystem::from_effective(charges, masses, stars)
        }
        .map_err(|e| invalid("particles", e.to_string()))?;
        for a in 0..n {
            for b in 0..a {
                if specs[a].position == specs[b].position {
                    return Err(invalid(format!("particles[{a}].position"), format!("coincides with particles[{b}]")));
                }
            }
        }
        let initial = PhaseState::new(
            self.t_start,
            specs.iter().map(|p| Vec3::from_array(p.position)).collect(),
            specs.iter().map(|p| Vec3::from_array(p.velocity)).collect(),
        )
        .map_err(|e| invalid("particles", e.to_string()))?;
        if self.models.contains(&ModelKind::ThirdOrder) {
            if n < 2 {
                return Err(invalid("models", "third_order needs at least two particles"));
            }
            if let Some(i) = system.charges().iter().position(|e| *e == 0.0) {
                return Err(invalid(format!("particles[{i}].charge"), "third_order needs nonzero charges"));
            }
        }
        self.regularization(&initial)?;
        Ok(Scenario { config: self.clone(), system, initial })
    }

    pub fn regularization(&self, initial: &PhaseState) -> Result<Regularization, ConfigError> {
        let r = &self.regularization;
        if r.velocity_scale.is_none() && r.inner_scale.is_none() && r.outer_scale.is_none() && initial.n() < 2 {
            return Ok(Regularization::unbounded());
        }
        let auto = Regularization::from_state(initial).map_err(|e| invalid("particles", e.to_string()))?;
        Regularization::new(
            r.velocity_scale.unwrap_or(auto.velocity_scale()),
            r.inner_scale.unwrap_or(auto.inner_scale()),
            r.outer_scale.unwrap_or(auto.outer_scale()),
        )
        .map_err(|e| invalid("regularization", e.to_string()))
    }

    pub fn guard(&self, reg: &Regularization) -> Result<CollisionGuard, ConfigError> {
        let auto = CollisionGuard::from_regularization(reg);
        let min = self.guard.min_separation.unwrap_or(auto.min_separation);
        let esc = self.guard.escape_radius.unwrap_or(auto.escape_radius);
        if min == 0.0 && esc == f64::INFINITY {
            return Ok(CollisionGuard::none());
        }
        CollisionGuard::new(min, esc).map_err(|e| invalid("guard", e.to_string()))
    }
}

fn generate(g: &GeneratorSpec, seed: u64) -> Result<Vec<ParticleSpec>, ConfigError> {
    if g.count == 0 {
        return Err(invalid("generate.count", "must be positive"));
    }
    let ordered = |r: [f64; 2], name: &str| {
        if r[0] > 0.0 && r[1] >= r[0] {
            Ok(())
        } else {
            Err(invalid(format!("generate.{name}"), "need 0 < lo ≤ hi"))
        }
    };
    ordered(g.charge_range, "charge_range")?;
    ordered(g.mass_range, "mass_range")?;
    if !(g.box_half_width > 0.0 && g.max_speed >= 0.0 && g.min_separation >= 0.0) {
        return Err(invalid("generate", "box_half_width must be positive, speeds and separations non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<ParticleSpec> = Vec::with_capacity(g.count);
    let mut attempts = 0;
    while out.len() < g.count {
        attempts += 1;
        if attempts > 10_000 * g.count {
            return Err(invalid("generate.min_separation", "could not place particles; enlarge the box"));
        }
        let w = g.box_half_width;
        let pos = [rng.gen_range(-w..=w), rng.gen_range(-w..=w), rng.gen_range(-w..=w)];
        let p = Vec3::from_array(pos);
        if out.iter().any(|q| (Vec3::from_array(q.position) - p).norm() < g.min_separation) {
            continue;
        }
        let mut charge = rng.gen_range(g.charge_range[0]..=g.charge_range[1]);
        if g.mixed_signs && rng.gen_bool(0.5) {
            charge = -charge;
        }
        let mass = rng.gen_range(g.mass_range[0]..=g.mass_range[1]);
        // Uniform direction, speed up to max_speed.
        let dir = loop {
            let v = Vec3::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let speed = g.max_speed * rng.gen::<f64>();
        out.push(ParticleSpec {
            charge,
            mass: Some(mass),
            star_mass: None,
            bare_mass: None,
            position: pos,
            velocity: (dir * speed).to_array(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAIR: &str = r#"
epsilon = 0.01
t_end = 1.0
models = ["darwin"]

[[particles]]
charge = 1.0
mass = 1.0
position = [0.5, 0.0, 0.0]
velocity = [0.0, 0.2, 0.0]

[[particles]]
charge = -1.0
mass = 2.0
star_mass = 1.8
position = [-0.5, 0.0, 0.0]
velocity = [0.0, -0.1, 0.0]
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = ScenarioConfig::from_toml_str(PAIR, "pair.toml").unwrap();
        let sc = cfg.build().unwrap();
        assert_eq!(sc.system.n(), 2);
        assert_eq!(sc.system.star_masses(), &[1.0, 1.8]);
        assert_eq!(cfg.epsilon_list(), vec![0.01]);
        assert_eq!(cfg.stepper.rtol, 1e-8);
    }

    #[test]
    fn round_trip() {
        let cfg = ScenarioConfig::from_toml_str(PAIR, "pair.toml").unwrap();
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string(), "again").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_field_is_reported_with_location() {
        let text = PAIR.replace("t_end = 1.0", "t_end = 1.0\nt_ned = 2.0");
        let err = ScenarioConfig::from_toml_str(&text, "bad.toml").unwrap_err().to_string();
        assert!(err.contains("t_ned") && err.contains("bad.toml"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn coincident_particles_are_rejected() {
        let text = PAIR.replace("position = [-0.5, 0.0, 0.0]", "position = [0.5, 0.0, 0.0]");
        let err = ScenarioConfig::from_toml_str(&text, "x").unwrap().build().unwrap_err().to_string();
        assert!(err.starts_with("particles[1].position"), "{err}");
    }

    #[test]
    fn epsilon_range_is_checked() {
        let text = PAIR.replace("epsilon = 0.01", "epsilons = [0.1, 1.5, 0.01]");
        let err = ScenarioConfig::from_toml_str(&text, "x").unwrap().build().unwrap_err().to_string();
        assert!(err.contains("1.5"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg =
            ScenarioConfig::from_toml_str(&PAIR.replace("epsilon = 0.01", "epsilons = [0.1, 0.01]"), "x").unwrap();
        cfg.apply(&Overrides {
            epsilons: vec![0.2],
            models: vec![ModelKind::Coulomb],
            tol: Some(1e-9),
            ..Default::default()
        });
        assert_eq!(cfg.epsilon_list(), vec![0.2]);
        assert_eq!(cfg.models, vec![ModelKind::Coulomb]);
        assert_eq!(cfg.stepper.rtol, 1e-9);
        assert!((cfg.stepper.atol - 1e-11).abs() < 1e-25);
    }

    #[test]
    fn generated_particles_are_seeded() {
        let text = "epsilon = 0.1\nt_end = 1.0\n[generate]\ncount = 4\nmixed_signs = true\n";
        let mut cfg = ScenarioConfig::from_toml_str(text, "gen").unwrap();
        let a = cfg.build().unwrap();
        let b = cfg.build().unwrap();
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.system.charges(), b.system.charges());
        cfg.seed = 1;
        let c = cfg.build().unwrap();
        assert_ne!(a.initial, c.initial);
        assert!(c.initial.min_separation().unwrap().2 >= 0.3);
    }

    #[test]
    fn bare_masses_need_a_form_factor() {
        let text =
            PAIR.replace("mass = 1.0", "bare_mass = 1.0").replace("mass = 2.0\nstar_mass = 1.8", "bare_mass = 2.0");
        let err = ScenarioConfig::from_toml_str(&text, "x").unwrap().build().unwrap_err().to_string();
        assert!(err.starts_with("form_factor"), "{err}");
        let with_ff = format!("{text}\n[form_factor]\nradius = 1.0\n");
        let sc = ScenarioConfig::from_toml_str(&with_ff, "x").unwrap().build().unwrap();
        assert!(sc.system.em_mass().unwrap() > 0.0);
        assert!(sc.system.masses()[0] > 1.0);
    }

    #[test]
    fn model_names_parse() {
        for m in [ModelKind::Coulomb, ModelKind::Darwin, ModelKind::RrReduced, ModelKind::ThirdOrder] {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        assert!("newton".parse::<ModelKind>().is_err());
    }
}
