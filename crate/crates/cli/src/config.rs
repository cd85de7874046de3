//! TOML experiment configuration and the registry of shipped operator instances.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Deserialize;
use yosida::estimates::{ConvergenceOptions, McConfig};
use yosida::{
    AdditiveNoise, Constants, Diffusion, DiscretePLaplacian, Drift, GelfandTriple, LinearDrift,
    MultiplicativeScalar, OperatorPair, Profile, ResolventOptions, ScalarPower, Scheme,
    SolverOptions, VNormKind,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown {role} instance `{name}`\n{listing}")]
    UnknownInstance {
        role: Role,
        name: String,
        listing: String,
    },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Drift,
    Diffusion,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Drift => "drift",
            Role::Diffusion => "diffusion",
        })
    }
}

pub struct Instance {
    pub name: &'static str,
    pub role: Role,
    /// `(key, description)` of each accepted parameter.
    pub params: &'static [(&'static str, &'static str)],
    pub summary: &'static str,
}

pub const INSTANCES: &[Instance] = &[
    Instance {
        name: "LinearDrift",
        role: Role::Drift,
        params: &[("a", "real, A(x) = a*x")],
        summary: "linear drift",
    },
    Instance {
        name: "ScalarPower",
        role: Role::Drift,
        params: &[],
        summary: "component-wise |x_i|^(p-2) x_i, p taken from [triple]",
    },
    Instance {
        name: "DiscretePLaplacian",
        role: Role::Drift,
        params: &[],
        summary: "finite-difference p-Laplacian, requires a dirichlet-grid triple",
    },
    Instance {
        name: "MultiplicativeScalar",
        role: Role::Diffusion,
        params: &[
            ("sigma", "real"),
            (
                "modes",
                "integer >= 1, coordinate i is driven by mode i mod modes",
            ),
        ],
        summary: "B(x) = sigma * x spread over the noise modes",
    },
    Instance {
        name: "AdditiveNoise",
        role: Role::Diffusion,
        params: &[
            ("scale", "real, B = scale * [I; 0]"),
            ("modes", "integer >= 1"),
            ("matrix", "array of dim rows, used instead of scale"),
        ],
        summary: "state-independent noise",
    },
];

/// Names and parameter schemas of the shipped instances.
pub fn list_instances() -> String {
    let mut out = String::new();
    for role in [Role::Drift, Role::Diffusion] {
        let _ = writeln!(out, "{role} instances:");
        for inst in INSTANCES.iter().filter(|i| i.role == role) {
            let _ = writeln!(out, "  {}  ({})", inst.name, inst.summary);
            for (key, desc) in inst.params {
                let _ = writeln!(out, "      {key}: {desc}");
            }
        }
    }
    out
}

fn listing(role: Role) -> String {
    let names: Vec<&str> = INSTANCES
        .iter()
        .filter(|i| i.role == role)
        .map(|i| i.name)
        .collect();
    format!("available {role} instances: {}", names.join(", "))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleSpec {
    pub kind: String,
    pub dim: usize,
    pub p: f64,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct InstanceSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Constant(f64),
    Affine { intercept: f64, slope: f64 },
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Constant(0.0)
    }
}

impl From<ProfileSpec> for Profile {
    fn from(p: ProfileSpec) -> Profile {
        match p {
            ProfileSpec::Constant(c) => Profile::Constant(c),
            ProfileSpec::Affine { intercept, slope } => Profile::Affine { intercept, slope },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    pub growth: f64,
    #[serde(default)]
    pub f: ProfileSpec,
    #[serde(default)]
    pub g: ProfileSpec,
    pub p: Option<f64>,
}

fn default_scheme() -> String {
    "explicit-em".into()
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub horizon: f64,
    pub dt: f64,
    pub lambdas: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub x0: Vec<f64>,
    pub x0_alt: Option<Vec<f64>>,
    /// Samples of the assumption checks.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub target_ratio: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesSpec {
    pub resolvent: f64,
    pub resolvent_max_iter: usize,
    pub picard: f64,
    pub picard_max_iter: usize,
    pub dual_iterations: usize,
    pub dual_points: usize,
}

impl Default for TolerancesSpec {
    fn default() -> Self {
        let solver = SolverOptions::default();
        let conv = ConvergenceOptions::default();
        TolerancesSpec {
            resolvent: solver.resolvent.rel_tol,
            resolvent_max_iter: solver.resolvent.max_iter,
            picard: solver.picard_tol,
            picard_max_iter: solver.picard_max_iter,
            dual_iterations: conv.dual_iterations,
            dual_points: conv.dual_points,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub triple: TripleSpec,
    pub drift: InstanceSpec,
    pub diffusion: InstanceSpec,
    pub constants: ConstantsSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub tolerances: TolerancesSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// A validated config with its operators built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub triple: GelfandTriple,
    pub pair: OperatorPair,
    pub scheme: Scheme,
    pub steps: usize,
    /// Raw config text, hashed into the manifest.
    pub source: String,
}

pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Experiment, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text)?;
    build(config, text.to_string())
}

fn build(config: ExperimentConfig, source: String) -> Result<Experiment, ConfigError> {
    let triple = build_triple(&config.triple)?;
    let n = triple.dim();
    let drift = build_drift(&config.drift, &triple)?;
    let diffusion = build_diffusion(&config.diffusion, n)?;

    let c = &config.constants;
    if let Some(p) = c.p {
        if p != triple.p() {
            return Err(invalid(format!(
                "constants.p = {p} does not match triple.p = {}",
                triple.p()
            )));
        }
    }
    let run = &config.run;
    if !(run.horizon > 0.0 && run.horizon.is_finite()) {
        return Err(invalid(format!(
            "run.horizon must be positive, got {}",
            run.horizon
        )));
    }
    let constants = Constants {
        c1: c.c1,
        c2: c.c2,
        p: triple.p(),
        growth: c.growth,
        f: c.f.into(),
        g: c.g.into(),
        horizon: run.horizon,
    };
    let pair = OperatorPair::new(drift, diffusion, constants)
        .map_err(|e| invalid(format!("[constants]: {e}")))?;

    if !(run.dt > 0.0 && run.dt.is_finite()) {
        return Err(invalid(format!("run.dt must be positive, got {}", run.dt)));
    }
    let ratio = run.horizon / run.dt;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
        return Err(invalid(format!(
            "run.horizon / run.dt must be a positive integer, got {ratio}"
        )));
    }
    if run.lambdas.is_empty() {
        return Err(invalid("run.lambdas must not be empty"));
    }
    if let Some(l) = run.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(invalid(format!("run.lambdas must be positive, got {l}")));
    }
    if run.lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("run.lambdas must be strictly decreasing"));
    }
    if run.paths == 0 {
        return Err(invalid("run.paths must be at least 1"));
    }
    if run.samples == 0 {
        return Err(invalid("run.samples must be at least 1"));
    }
    if run.x0.len() != n {
        return Err(invalid(format!(
            "run.x0 has {} entries, triple.dim is {n}",
            run.x0.len()
        )));
    }
    if let Some(alt) = &run.x0_alt {
        if alt.len() != n {
            return Err(invalid(format!(
                "run.x0_alt has {} entries, triple.dim is {n}",
                alt.len()
            )));
        }
    }
    if run
        .x0
        .iter()
        .chain(run.x0_alt.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(invalid("initial states must be finite"));
    }
    if let Some(r) = run.target_ratio {
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid(format!(
                "run.target_ratio must be positive, got {r}"
            )));
        }
    }
    let scheme = Scheme::parse(&run.scheme).ok_or_else(|| {
        invalid(format!(
            "run.scheme `{}` is not one of explicit-em, picard-em, implicit-reference",
            run.scheme
        ))
    })?;
    let tol = &config.tolerances;
    if !(tol.resolvent > 0.0 && tol.picard > 0.0) {
        return Err(invalid("tolerances must be positive"));
    }
    if tol.resolvent_max_iter == 0 || tol.picard_max_iter == 0 || tol.dual_points == 0 {
        return Err(invalid("iteration limits must be at least 1"));
    }
    Ok(Experiment {
        triple,
        pair,
        scheme,
        steps: steps as usize,
        source,
        config,
    })
}

fn build_triple(spec: &TripleSpec) -> Result<GelfandTriple, ConfigError> {
    let err = |e: yosida::Error| invalid(format!("[triple]: {e}"));
    if spec.dim == 0 {
        return Err(invalid("triple.dim must be at least 1"));
    }
    match spec.kind.as_str() {
        "euclidean" => match &spec.weights {
            None => GelfandTriple::euclidean(spec.dim, spec.p).map_err(err),
            Some(w) if w.len() == spec.dim => {
                GelfandTriple::new(w.clone(), VNormKind::PlainLp { p: spec.p }).map_err(err)
            }
            Some(w) => Err(invalid(format!(
                "triple.weights has {} entries, triple.dim is {}",
                w.len(),
                spec.dim
            ))),
        },
        "dirichlet-grid" => {
            if spec.weights.is_some() {
                return Err(invalid("triple.weights is not accepted by dirichlet-grid"));
            }
            GelfandTriple::dirichlet_grid(spec.dim, spec.p).map_err(err)
        }
        other => Err(invalid(format!(
            "triple.kind `{other}` is not one of euclidean, dirichlet-grid"
        ))),
    }
}

struct Params<'a> {
    section: Role,
    table: &'a toml::Table,
}

impl Params<'_> {
    fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.table.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(invalid(format!("unknown key `{}.{k}`", self.section))),
            None => Ok(()),
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(*v)),
            Some(toml::Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(invalid(format!(
                "`{}.{key}` must be a number",
                self.section
            ))),
        }
    }

    fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.f64(key)?
            .ok_or_else(|| invalid(format!("missing key `{}.{key}`", self.section)))
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 1 => Ok(Some(*v as usize)),
            Some(_) => Err(invalid(format!(
                "`{}.{key}` must be a positive integer",
                self.section
            ))),
        }
    }
}

fn build_drift(spec: &InstanceSpec, triple: &GelfandTriple) -> Result<Arc<dyn Drift>, ConfigError> {
    let params = Params {
        section: Role::Drift,
        table: &spec.params,
    };
    let dim = triple.dim();
    match spec.kind.as_str() {
        "LinearDrift" => {
            params.check_keys(&["a"])?;
            Ok(Arc::new(LinearDrift {
                dim,
                a: params.require_f64("a")?,
            }))
        }
        "ScalarPower" => {
            params.check_keys(&[])?;
            Ok(Arc::new(ScalarPower { dim, p: triple.p() }))
        }
        "DiscretePLaplacian" => {
            params.check_keys(&[])?;
            let op = DiscretePLaplacian::on(triple)
                .map_err(|e| invalid(format!("[drift] DiscretePLaplacian: {e}")))?;
            Ok(Arc::new(op))
        }
        other => Err(ConfigError::UnknownInstance {
            role: Role::Drift,
            name: other.to_string(),
            listing: listing(Role::Drift),
        }),
    }
}

fn build_diffusion(spec: &InstanceSpec, dim: usize) -> Result<Arc<dyn Diffusion>, ConfigError> {
    let params = Params {
        section: Role::Diffusion,
        table: &spec.params,
    };
    match spec.kind.as_str() {
        "MultiplicativeScalar" => {
            params.check_keys(&["sigma", "modes"])?;
            Ok(Arc::new(MultiplicativeScalar {
                dim,
                sigma: params.require_f64("sigma")?,
                modes: params.usize("modes")?.unwrap_or(1),
            }))
        }
        "AdditiveNoise" => {
            params.check_keys(&["scale", "modes", "matrix"])?;
            if let Some(value) = spec.params.get("matrix") {
                if params.f64("scale")?.is_some() || params.usize("modes")?.is_some() {
                    return Err(invalid(
                        "`diffusion.matrix` excludes `diffusion.scale` and `diffusion.modes`",
                    ));
                }
                return Ok(Arc::new(AdditiveNoise::new(parse_matrix(value, dim)?)));
            }
            let scale = params.require_f64("scale")?;
            if !scale.is_finite() {
                return Err(invalid("`diffusion.scale` must be finite"));
            }
            let modes = params.usize("modes")?.unwrap_or(dim);
            Ok(Arc::new(AdditiveNoise::scaled_identity(dim, modes, scale)))
        }
        other => Err(ConfigError::UnknownInstance {
            role: Role::Diffusion,
            name: other.to_string(),
            listing: listing(Role::Diffusion),
        }),
    }
}

fn parse_matrix(value: &toml::Value, dim: usize) -> Result<DMatrix<f64>, ConfigError> {
    let bad = || invalid("`diffusion.matrix` must be an array of equal-length numeric rows");
    let rows = value.as_array().ok_or_else(bad)?;
    if rows.len() != dim {
        return Err(invalid(format!(
            "`diffusion.matrix` has {} rows, triple.dim is {dim}",
            rows.len()
        )));
    }
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for row in rows {
        let row = row.as_array().ok_or_else(bad)?;
        let vals = row
            .iter()
            .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(bad)?;
        data.push(vals);
    }
    let modes = data[0].len();
    if modes == 0 || data.iter().any(|r| r.len() != modes) {
        return Err(bad());
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("`diffusion.matrix` entries must be finite"));
    }
    Ok(DMatrix::from_fn(dim, modes, |i, j| data[i][j]))
}

impl Experiment {
    pub fn solver_options(&self) -> SolverOptions {
        let tol = &self.config.tolerances;
        SolverOptions {
            resolvent: ResolventOptions {
                rel_tol: tol.resolvent,
                max_iter: tol.resolvent_max_iter,
            },
            picard_tol: tol.picard,
            picard_max_iter: tol.picard_max_iter,
        }
    }

    /// Monte Carlo settings. The implicit reference is not a regularized
    /// scheme, so it falls back to explicit EM for the λ-dependent checks.
    pub fn mc_config(&self, jobs: usize) -> McConfig {
        let run = &self.config.run;
        let mut cfg = McConfig::new(run.dt, run.paths, run.seed, run.x0.clone());
        cfg.scheme = match self.scheme {
            Scheme::ImplicitReference => Scheme::ExplicitEm,
            s => s,
        };
        cfg.solver = self.solver_options();
        cfg.jobs = jobs;
        cfg
    }

    pub fn convergence_options(&self) -> ConvergenceOptions {
        ConvergenceOptions {
            dual_iterations: self.config.tolerances.dual_iterations,
            dual_points: self.config.tolerances.dual_points,
            target_ratio: self.config.run.target_ratio,
        }
    }
}
