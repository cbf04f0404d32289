//! JSON-configured verification experiments with CSV and JSON reports.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`. Generated
//! Hamiltonians use stream 0; sample points use the stream of the experiment
//! kind (see [`ExperimentKind::stream`]). Points are drawn sequentially and
//! evaluated in parallel, and rows are emitted in sample order, so a fixed
//! config and seed give byte-identical output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Rotation3, Unit};
use num_bigint::BigInt;
use num_complex::Complex;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::affine::{HamiltonianSpec, Monomial, PhasePoint, SymplecticStructure};
use crate::composition::{compose_quadratic_closed, CompositionProblem};
use crate::error::{Error, Result};
use crate::midpoint::{cayley_map_quadratic, genfun_of_linear_map, infinitesimal_order, log_spaced, orbit, rk4_orbit, MidpointMap, OrderReference};
use crate::moyal::{gaussian_phase_product, star_product, ExactCoefficient, HbarSeries, PlanckParameter, PolynomialSymbol};
use crate::numerics::SolverConfig;
use crate::sphere::{
    pair_to_tangent, geodesic_distance, sphere_infinitesimal_order, spherical_vertices_from_midpoints, tangent_to_pair,
    pullback_defect, Rotated, SphereCompositionProblem, SphereHamiltonian, SphereMidpointMap, SpherePoint,
    SphericalTriangle, Vec3,
};

pub const CSV_HEADER: &str = "experiment,sample,inputs,metric,value";

/// Problems that stop an experiment before any row is produced.
#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(#[from] Error),
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpaceConfig {
    Affine { n: usize },
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Log-log slope of `Φ_{εH}` against the Hamiltonian flow.
    Flow,
    /// Symplecticity defect (affine) or area preservation and rotational
    /// equivariance (sphere).
    CheckSymplectic,
    /// `Φ_H = Φ_{H2} ∘ Φ_{H1}` for the composed `H`, over consecutive pairs.
    Compose,
    /// Gaussian phase against the composed quadratic, plus exact star-product
    /// identities.
    MoyalVerify,
    /// Pair/tangent identification on the sphere.
    SphereIdentify,
    /// Iterates `Φ_{εH}` and records the energy.
    Orbit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Flow => "flow",
            ExperimentKind::CheckSymplectic => "check-symplectic",
            ExperimentKind::Compose => "compose",
            ExperimentKind::MoyalVerify => "moyal-verify",
            ExperimentKind::SphereIdentify => "sphere-identify",
            ExperimentKind::Orbit => "orbit",
        }
    }

    /// PRNG stream used for sample points.
    pub fn stream(self) -> u64 {
        match self {
            ExperimentKind::Flow => 1,
            ExperimentKind::CheckSymplectic => 2,
            ExperimentKind::Compose => 3,
            ExperimentKind::MoyalVerify => 4,
            ExperimentKind::SphereIdentify => 5,
            ExperimentKind::Orbit => 6,
        }
    }
}

/// Optional experiment parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Overrides the threshold of the primary metric.
    pub threshold: Option<f64>,
    /// Tolerated fraction of failed evaluations (default 0).
    pub max_failure_fraction: Option<f64>,
    /// Orbit step (default 0.01) or the largest `ε` of a flow fit (default 0.1).
    pub epsilon: Option<f64>,
    /// Orbit length (default 10⁴).
    pub steps: Option<usize>,
    /// Orbit start (default `(2, 0)` for `n = 1`).
    pub start: Option<Vec<f64>>,
    /// Radius of the sampling ball (default 1).
    pub radius: Option<f64>,
    /// Planck constant for `moyal-verify` (default 1).
    pub hbar: Option<f64>,
    /// Finite-difference step of the sphere checks (default 1e-4).
    pub fd_step: Option<f64>,
    /// Random triangles for the reconstruction check of sphere `compose`
    /// (default 100).
    pub triangles: Option<usize>,
    /// Leading pairs of `sphere-identify` that also get the pullback check
    /// (default 50).
    pub pullback_pairs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceConfig,
    /// Hamiltonian specs, sphere Hamiltonians, or generator entries
    /// (`random_polynomial`, `random_quadratic`), depending on the space.
    #[serde(default)]
    pub hamiltonians: Vec<Value>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub experiment: ExperimentKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub params: Params,
}

fn default_samples() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> std::result::Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Seeded generators accepted in the `hamiltonians` list of affine configs.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Generator {
    /// `count` polynomials with 1 to `max_terms` monomials of total degree
    /// 1 to `max_degree` and coefficients uniform in `[−scale, scale]`.
    RandomPolynomial {
        count: usize,
        #[serde(default = "default_degree")]
        max_degree: u32,
        #[serde(default = "default_terms")]
        max_terms: usize,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// `count` centered quadratics with `‖S‖₂` uniform in `[norm/10, norm]`.
    RandomQuadratic {
        count: usize,
        #[serde(default = "unit")]
        norm: f64,
    },
}

fn default_degree() -> u32 {
    4
}

fn default_terms() -> usize {
    6
}

fn unit() -> f64 {
    1.0
}

/// Random polynomial in `dim` variables; see the `random_polynomial`
/// generator.
pub fn random_polynomial(rng: &mut impl Rng, dim: usize, max_degree: u32, max_terms: usize, scale: f64) -> HamiltonianSpec {
    let nterms = rng.random_range(1..=max_terms.max(1));
    let terms = (0..nterms)
        .map(|_| {
            let mut exp = vec![0u32; dim];
            for _ in 0..rng.random_range(1..=max_degree.max(1)) {
                exp[rng.random_range(0..dim)] += 1;
            }
            Monomial {
                exp,
                coef: rng.random_range(-scale..=scale),
            }
        })
        .collect();
    HamiltonianSpec::Polynomial { terms }
}

/// Random symmetric `d × d` matrix with spectral norm uniform in
/// `[norm/10, norm]`.
pub fn random_symmetric(rng: &mut impl Rng, d: usize, norm: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let s = (&a + a.transpose()) * 0.5;
    let current = s.clone().symmetric_eigen().eigenvalues.amax();
    let target = rng.random_range(0.1 * norm..=norm);
    if current == 0.0 {
        DMatrix::identity(d, d) * target
    } else {
        s * (target / current)
    }
}

/// Uniform point in the ball of the given radius.
pub fn sample_ball(rng: &mut impl Rng, d: usize, radius: f64) -> PhasePoint {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            return v * radius;
        }
    }
}

/// Uniform point on the unit sphere.
pub fn sample_sphere(rng: &mut impl Rng) -> SpherePoint {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return SpherePoint::new(v).expect("non-zero vector");
        }
    }
}

/// Result of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Value(f64),
    Failed(&'static str),
}

impl From<Result<f64>> for Outcome {
    fn from(r: Result<f64>) -> Self {
        match r {
            Ok(v) if v.is_finite() => Outcome::Value(v),
            Ok(_) => Outcome::Failed(Error::NonFiniteValue("metric").tag()),
            Err(e) => Outcome::Failed(e.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub sample: usize,
    pub inputs: Vec<f64>,
    pub metric: &'static str,
    pub value: Outcome,
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let inputs: Vec<String> = self.inputs.iter().map(|v| float(*v)).collect();
        let value = match self.value {
            Outcome::Value(v) => float(v),
            Outcome::Failed(tag) => format!("failed:{tag}"),
        };
        format!("{},{},{},{},{}", self.experiment, self.sample, inputs.join(";"), self.metric, value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst value: the maximum for `at_most`, the minimum for `at_least`.
    pub value: Option<f64>,
    pub rule: Rule,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: &'static str,
    pub seed: u64,
    pub samples: usize,
    /// Statistics of the primary metric over successful evaluations.
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub threshold: f64,
    pub pass: bool,
    pub evaluations: usize,
    pub failures: usize,
    pub checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub details: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

impl Report {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes the CSV to `path` and the summary next to it with a `.json`
    /// extension; returns the summary path.
    pub fn write(&self, path: &Path) -> std::result::Result<PathBuf, ExperimentError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| ExperimentError::Io { path, source }
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(path, self.csv()).map_err(io(path))?;
        let json_path = path.with_extension("json");
        std::fs::write(&json_path, self.summary_json()).map_err(io(&json_path))?;
        Ok(json_path)
    }
}

/// A metric compared against a threshold.
struct Check {
    metric: &'static str,
    rule: Rule,
    threshold: f64,
    /// Precomputed worst value; `None` aggregates the rows of `metric`.
    value: Option<f64>,
}

fn check(metric: &'static str, rule: Rule, threshold: f64) -> Check {
    Check {
        metric,
        rule,
        threshold,
        value: None,
    }
}

/// What an experiment runner hands back.
struct Outcomes {
    rows: Vec<ReportRow>,
    checks: Vec<Check>,
    /// Pass/fail conditions beyond the metric thresholds.
    conditions: Vec<(&'static str, bool)>,
    /// Overrides the primary statistics (orbit reports `|ΔH|`).
    primary: Option<Vec<f64>>,
    details: Map<String, Value>,
}

impl Outcomes {
    fn new(rows: Vec<ReportRow>, checks: Vec<Check>) -> Self {
        Outcomes {
            rows,
            checks,
            conditions: Vec::new(),
            primary: None,
            details: Map::new(),
        }
    }
}

/// Affine or sphere Hamiltonians, after expanding generators.
enum Hamiltonians {
    Affine(SymplecticStructure, Vec<HamiltonianSpec>),
    Sphere(Vec<SphereHamiltonian>),
}

fn resolve_hamiltonians(cfg: &ExperimentConfig) -> std::result::Result<Hamiltonians, ExperimentError> {
    match cfg.space {
        SpaceConfig::Affine { n } => {
            if n == 0 {
                return Err(invalid("space.n must be positive"));
            }
            let space = SymplecticStructure::standard(n);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0);
            let mut out = Vec::new();
            for (i, v) in cfg.hamiltonians.iter().enumerate() {
                let is_generator = matches!(
                    v.get("type").and_then(Value::as_str),
                    Some("random_polynomial" | "random_quadratic")
                );
                if is_generator {
                    let g: Generator =
                        serde_json::from_value(v.clone()).map_err(|e| invalid(format!("hamiltonians[{i}]: {e}")))?;
                    match g {
                        Generator::RandomPolynomial {
                            count,
                            max_degree,
                            max_terms,
                            scale,
                        } => out.extend((0..count).map(|_| random_polynomial(&mut rng, 2 * n, max_degree, max_terms, scale))),
                        Generator::RandomQuadratic { count, norm } => {
                            for _ in 0..count {
                                out.push(HamiltonianSpec::centered_quadratic(random_symmetric(&mut rng, 2 * n, norm))?);
                            }
                        }
                    }
                } else {
                    let h: HamiltonianSpec =
                        serde_json::from_value(v.clone()).map_err(|e| invalid(format!("hamiltonians[{i}]: {e}")))?;
                    if let Some(d) = h.dim() {
                        if d != 2 * n {
                            return Err(invalid(format!(
                                "hamiltonians[{i}]: dimension {d} does not match space.n = {n}"
                            )));
                        }
                    }
                    out.push(h);
                }
            }
            Ok(Hamiltonians::Affine(space, out))
        }
        SpaceConfig::Sphere => cfg
            .hamiltonians
            .iter()
            .enumerate()
            .map(|(i, v)| serde_json::from_value(v.clone()).map_err(|e| invalid(format!("hamiltonians[{i}]: {e}"))))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Hamiltonians::Sphere),
    }
}

/// Runs the experiment on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<Report, ExperimentError> {
    cfg.solver.validate().map_err(|e| invalid(format!("solver: {e}")))?;
    if let Some(f) = cfg.params.max_failure_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid("params.max_failure_fraction must lie in [0, 1]"));
        }
    }
    let hams = resolve_hamiltonians(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.experiment.stream());
    let mut out = match (cfg.experiment, &hams) {
        (ExperimentKind::Flow, Hamiltonians::Affine(space, hs)) => affine_flow(cfg, space, hs, &mut rng)?,
        (ExperimentKind::Flow, Hamiltonians::Sphere(hs)) => sphere_flow_order(cfg, hs, &mut rng)?,
        (ExperimentKind::CheckSymplectic, Hamiltonians::Affine(space, hs)) => affine_symplectic(cfg, space, hs, &mut rng)?,
        (ExperimentKind::CheckSymplectic, Hamiltonians::Sphere(hs)) => sphere_area(cfg, hs, &mut rng)?,
        (ExperimentKind::Compose, Hamiltonians::Affine(space, hs)) => affine_compose(cfg, space, hs, &mut rng)?,
        (ExperimentKind::Compose, Hamiltonians::Sphere(hs)) => sphere_compose(cfg, hs, &mut rng)?,
        (ExperimentKind::MoyalVerify, Hamiltonians::Affine(space, hs)) => moyal_verify(cfg, space, hs, &mut rng)?,
        (ExperimentKind::SphereIdentify, Hamiltonians::Sphere(_)) => sphere_identify(cfg, &mut rng)?,
        (ExperimentKind::Orbit, Hamiltonians::Affine(space, hs)) => affine_orbit(cfg, space, hs)?,
        (kind, _) => {
            return Err(invalid(format!(
                "experiment {} is not available for space {:?}",
                kind.name(),
                cfg.space
            )))
        }
    };
    if let (Some(t), Some(first)) = (cfg.params.threshold, out.checks.first_mut()) {
        first.threshold = t;
    }
    Ok(summarize(cfg, out))
}

/// Runs the experiment on a dedicated pool of at most `threads` threads.
pub fn run_with_threads(cfg: &ExperimentConfig, threads: Option<usize>) -> std::result::Result<Report, ExperimentError> {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?
            .install(|| run_experiment(cfg)),
        None => run_experiment(cfg),
    }
}

fn summarize(cfg: &ExperimentConfig, out: Outcomes) -> Report {
    let values = |metric: &str| -> Vec<f64> {
        out.rows
            .iter()
            .filter(|r| r.metric == metric)
            .filter_map(|r| match r.value {
                Outcome::Value(v) => Some(v),
                Outcome::Failed(_) => None,
            })
            .collect()
    };
    let checks: Vec<CheckResult> = out
        .checks
        .iter()
        .map(|c| {
            let v = values(c.metric);
            let worst = match (c.value, c.rule) {
                (Some(w), _) => Some(w),
                (None, Rule::AtMost) => v.iter().copied().reduce(f64::max),
                (None, Rule::AtLeast) => v.iter().copied().reduce(f64::min),
            };
            let pass = match (c.rule, worst) {
                (Rule::AtMost, Some(w)) => w <= c.threshold,
                (Rule::AtLeast, Some(w)) => w >= c.threshold,
                (_, None) => false,
            };
            CheckResult {
                name: c.metric.to_string(),
                value: worst,
                rule: c.rule,
                threshold: c.threshold,
                pass,
            }
        })
        .chain(out.conditions.iter().map(|&(name, pass)| CheckResult {
            name: name.to_string(),
            value: None,
            rule: Rule::AtLeast,
            threshold: 1.0,
            pass,
        }))
        .collect();

    let primary_metric = out.checks.first().map(|c| c.metric);
    let primary = out
        .primary
        .clone()
        .unwrap_or_else(|| primary_metric.map(values).unwrap_or_default());
    let (evaluations, failures) = match primary_metric {
        Some(m) if out.primary.is_none() => {
            let rows: Vec<&ReportRow> = out.rows.iter().filter(|r| r.metric == m).collect();
            let failed = rows.iter().filter(|r| matches!(r.value, Outcome::Failed(_))).count();
            (rows.len(), failed)
        }
        _ => (primary.len(), 0),
    };
    let allowed = cfg.params.max_failure_fraction.unwrap_or(0.0) * evaluations as f64;
    let pass = checks.iter().all(|c| c.pass) && failures as f64 <= allowed;
    let max = primary.iter().copied().reduce(f64::max);
    let mean = (!primary.is_empty()).then(|| primary.iter().sum::<f64>() / primary.len() as f64);
    let threshold = out.checks.first().map_or(f64::NAN, |c| c.threshold);
    Report {
        rows: out.rows,
        summary: Summary {
            experiment: cfg.experiment.name(),
            seed: cfg.seed,
            samples: cfg.samples,
            max,
            mean,
            threshold,
            pass,
            evaluations,
            failures,
            checks,
            details: out.details,
        },
    }
}

/// Evaluates `f` on every job in parallel, keeping job order.
fn par_rows<J: Sync>(jobs: &[J], f: impl Fn(&J) -> Vec<ReportRow> + Sync + Send) -> Vec<ReportRow> {
    jobs.par_iter().map(f).collect::<Vec<_>>().into_iter().flatten().collect()
}

fn label(kind: ExperimentKind, unit: usize) -> String {
    format!("{}[{unit}]", kind.name())
}

fn row(experiment: &str, sample: usize, inputs: Vec<f64>, metric: &'static str, value: impl Into<Outcome>) -> ReportRow {
    ReportRow {
        experiment: experiment.to_string(),
        sample,
        inputs,
        metric,
        value: value.into(),
    }
}

fn require(hs: &[impl Sized], what: &str, ok: bool) -> std::result::Result<(), ExperimentError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("hamiltonians: {what} (got {})", hs.len())))
    }
}

/// `(unit, sample, point)` jobs over units, drawing points in order.
fn affine_jobs(cfg: &ExperimentConfig, units: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, PhasePoint)> {
    let radius = cfg.params.radius.unwrap_or(1.0);
    (0..units)
        .flat_map(|u| (0..cfg.samples).map(move |j| (u, j)))
        .map(|(u, j)| (u, j, sample_ball(rng, d, radius)))
        .collect()
}

fn inputs(p: &DVector<f64>) -> Vec<f64> {
    p.iter().copied().collect()
}

fn affine_flow(
    cfg: &ExperimentConfig,
    space: &SymplecticStructure,
    hs: &[HamiltonianSpec],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "flow needs at least one Hamiltonian", !hs.is_empty())?;
    let eps = log_spaced(cfg.params.epsilon.unwrap_or(0.1), cfg.params.epsilon.unwrap_or(0.1) / 10.0, 6);
    let jobs = affine_jobs(cfg, hs.len(), space.dim(), rng);
    let rows = par_rows(&jobs, |(u, j, p)| {
        let fit = infinitesimal_order(space, &hs[*u], &cfg.solver, p, &eps, OrderReference::Flow);
        vec![row(&label(cfg.experiment, *u), *j, inputs(p), "order_slope", fit.map(|f| f.slope))]
    });
    Ok(Outcomes::new(rows, vec![check("order_slope", Rule::AtLeast, 2.0)]))
}

fn sphere_flow_order(
    cfg: &ExperimentConfig,
    hs: &[SphereHamiltonian],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "flow needs at least one Hamiltonian", !hs.is_empty())?;
    let hi = cfg.params.epsilon.unwrap_or(0.1);
    let eps = log_spaced(hi, hi / 10.0, 6);
    let jobs = sphere_jobs(cfg, hs.len(), rng);
    let rows = par_rows(&jobs, |(u, j, p)| {
        let fit = sphere_infinitesimal_order(&hs[*u], &cfg.solver, p, &eps);
        vec![row(&label(cfg.experiment, *u), *j, p.v().as_slice().to_vec(), "order_slope", fit.map(|f| f.slope))]
    });
    Ok(Outcomes::new(rows, vec![check("order_slope", Rule::AtLeast, 2.0)]))
}

fn affine_symplectic(
    cfg: &ExperimentConfig,
    space: &SymplecticStructure,
    hs: &[HamiltonianSpec],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "check-symplectic needs at least one Hamiltonian", !hs.is_empty())?;
    let jobs = affine_jobs(cfg, hs.len(), space.dim(), rng);
    let rows = par_rows(&jobs, |(u, j, p)| {
        let h = &hs[*u];
        let id = label(cfg.experiment, *u);
        let map = match MidpointMap::new(space.clone(), h, cfg.solver) {
            Ok(m) => m,
            Err(e) => return vec![row(&id, *j, inputs(p), "symplecticity_defect", Err(e))],
        };
        let mut out = vec![row(&id, *j, inputs(p), "symplecticity_defect", map.symplecticity_defect(p))];
        if h.is_quadratic() {
            let change = map.phi_forward(p).map(|(q, _)| (h.eval(&q) - h.eval(p)).abs());
            out.push(row(&id, *j, inputs(p), "energy_change", change));
        }
        if let Some(s) = centered_matrix(h) {
            let gap = cayley_map_quadratic(space, s)
                .and_then(|phi| Ok((map.phi_forward(p)?.0 - phi * p).amax()));
            out.push(row(&id, *j, inputs(p), "cayley_gap", gap));
            let round_trip = cayley_map_quadratic(space, s)
                .and_then(|phi| genfun_of_linear_map(space, &phi))
                .map(|back| (back - s).amax());
            out.push(row(&id, *j, inputs(p), "genfun_round_trip", round_trip));
        }
        out
    });
    let mut checks = vec![check("symplecticity_defect", Rule::AtMost, 1e-6)];
    if hs.iter().any(HamiltonianSpec::is_quadratic) {
        checks.push(check("energy_change", Rule::AtMost, 1e-10));
    }
    if hs.iter().any(|h| centered_matrix(h).is_some()) {
        checks.push(check("cayley_gap", Rule::AtMost, 1e-10));
        checks.push(check("genfun_round_trip", Rule::AtMost, 1e-10));
    }
    Ok(Outcomes::new(rows, checks))
}

fn sphere_jobs(cfg: &ExperimentConfig, units: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, SpherePoint)> {
    (0..units)
        .flat_map(|u| (0..cfg.samples).map(move |j| (u, j)))
        .map(|(u, j)| (u, j, sample_sphere(rng)))
        .collect()
}

fn sphere_area(
    cfg: &ExperimentConfig,
    hs: &[SphereHamiltonian],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "check-symplectic needs at least one Hamiltonian", !hs.is_empty())?;
    let h_step = cfg.params.fd_step.unwrap_or(1e-4);
    let jobs: Vec<(usize, usize, SpherePoint, Vec3, f64)> = sphere_jobs(cfg, hs.len(), rng)
        .into_iter()
        .map(|(u, j, p)| (u, j, p, sample_sphere(rng).v(), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let rows = par_rows(&jobs, |(u, j, p, axis, angle)| {
        let id = label(cfg.experiment, *u);
        let ins = p.v().as_slice().to_vec();
        let map = SphereMidpointMap { h: &hs[*u], cfg: cfg.solver };
        let det = map.jacobian_determinant(p, h_step).map(|d| (d - 1.0).abs());
        let o = *Rotation3::from_axis_angle(&Unit::new_unchecked(*axis), *angle).matrix();
        let equivariance = (|| {
            let (q, _) = map.phi_forward(p)?;
            let rotated = SphereMidpointMap { h: Rotated { inner: &hs[*u], rotation: o }, cfg: cfg.solver };
            let (q_rot, _) = rotated.phi_forward(&SpherePoint::new(o * p.v())?)?;
            Ok((q_rot.v() - o * q.v()).norm())
        })();
        vec![
            row(&id, *j, ins.clone(), "area_det_error", det),
            row(&id, *j, ins, "equivariance", equivariance),
        ]
    });
    Ok(Outcomes::new(
        rows,
        vec![
            check("area_det_error", Rule::AtMost, 1e-6),
            check("equivariance", Rule::AtMost, 1e-9),
        ],
    ))
}

/// `S` of `H = ½ xᵀ S x`.
fn centered_matrix(h: &HamiltonianSpec) -> Option<&DMatrix<f64>> {
    match h {
        HamiltonianSpec::Quadratic { s, b, c } if *c == 0.0 && b.iter().all(|v| *v == 0.0) => Some(s),
        _ => None,
    }
}

fn closed_form_pair(a: &HamiltonianSpec, b: &HamiltonianSpec) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    Some((centered_matrix(a)?.clone(), centered_matrix(b)?.clone()))
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::from(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

fn affine_compose(
    cfg: &ExperimentConfig,
    space: &SymplecticStructure,
    hs: &[HamiltonianSpec],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "compose needs a non-empty even number of Hamiltonians", !hs.is_empty() && hs.len().is_multiple_of(2))?;
    let pairs: Vec<(&HamiltonianSpec, &HamiltonianSpec)> = hs.chunks(2).map(|c| (&c[0], &c[1])).collect();
    let mut closed = Vec::with_capacity(pairs.len());
    for (a, b) in &pairs {
        closed.push(match closed_form_pair(a, b) {
            Some((s1, s2)) => Some(compose_quadratic_closed(space, &s1, &s2)?),
            None => None,
        });
    }
    let jobs = affine_jobs(cfg, pairs.len(), space.dim(), rng);
    let rows = par_rows(&jobs, |(u, j, p)| {
        let id = label(cfg.experiment, *u);
        let (h1, h2) = pairs[*u];
        let problem = match CompositionProblem::new(space.clone(), h1, h2, cfg.solver) {
            Ok(pr) => pr,
            Err(e) => return vec![row(&id, *j, inputs(p), "composition_residual", Err(e))],
        };
        let mut out = vec![row(&id, *j, inputs(p), "composition_residual", problem.composition_residual(p))];
        if let Some(c) = &closed[*u] {
            let gap = problem
                .compose_genfun_numeric(p)
                .map(|v| (v.value - c.eval(p)).abs());
            out.push(row(&id, *j, inputs(p), "closed_form_gap", gap));
        }
        out
    });
    let all_quadratic = hs.iter().all(HamiltonianSpec::is_quadratic);
    let mut checks = vec![check(
        "composition_residual",
        Rule::AtMost,
        if all_quadratic { 1e-8 } else { 1e-6 },
    )];
    let mut outcomes = Outcomes::new(rows, Vec::new());
    if closed.iter().any(Option::is_some) {
        checks.push(check("closed_form_gap", Rule::AtMost, 1e-8));
        let mats: Vec<Value> = closed
            .iter()
            .map(|c| match c {
                Some(HamiltonianSpec::Quadratic { s, .. }) => matrix_json(s),
                _ => Value::Null,
            })
            .collect();
        outcomes.details.insert("closed_form_S".into(), Value::from(mats));
    }
    outcomes.checks = checks;
    Ok(outcomes)
}

fn sphere_compose(
    cfg: &ExperimentConfig,
    hs: &[SphereHamiltonian],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "compose needs a non-empty even number of Hamiltonians", !hs.is_empty() && hs.len().is_multiple_of(2))?;
    let npairs = hs.len() / 2;
    let jobs = sphere_jobs(cfg, npairs, rng);
    let triangles: Vec<SphericalTriangle> = (0..cfg.params.triangles.unwrap_or(100))
        .map(|_| SphericalTriangle {
            p: sample_sphere(rng),
            q: sample_sphere(rng),
            r: sample_sphere(rng),
        })
        .collect();
    let mut rows = par_rows(&jobs, |(u, j, p)| {
        let residual = SphereCompositionProblem::new(&hs[2 * u], &hs[2 * u + 1], cfg.solver)
            .and_then(|pr| pr.composition_residual(p));
        vec![row(&label(cfg.experiment, *u), *j, p.v().as_slice().to_vec(), "composition_residual", residual)]
    });
    let indexed: Vec<(usize, SphericalTriangle)> = triangles.into_iter().enumerate().collect();
    rows.extend(par_rows(&indexed, |(j, t)| {
        let err = (|| {
            let m = t.midpoints()?;
            let back = spherical_vertices_from_midpoints(&m.x1, &m.x2, &m.x)?.midpoints()?;
            Ok([(back.x1, m.x1), (back.x2, m.x2), (back.x, m.x)]
                .iter()
                .map(|(a, b)| (a.v() - b.v()).norm())
                .fold(0.0, f64::max))
        })();
        let ins = [t.p, t.q, t.r].iter().flat_map(|v| v.v().as_slice().to_vec()).collect();
        vec![row("compose[reconstruction]", *j, ins, "reconstruction", err)]
    }));
    Ok(Outcomes::new(
        rows,
        vec![
            check("composition_residual", Rule::AtMost, 1e-5),
            check("reconstruction", Rule::AtMost, 1e-10),
        ],
    ))
}

/// Random symbol in `nvars` variables with small integer coefficients and
/// total degree at most `max_degree`.
pub fn random_exact_symbol(rng: &mut impl Rng, nvars: usize, max_degree: u32) -> PolynomialSymbol<ExactCoefficient> {
    let nterms = rng.random_range(1..=4);
    let terms: Vec<(Vec<u32>, ExactCoefficient)> = (0..nterms)
        .map(|_| {
            let mut exp = vec![0u32; nvars];
            for _ in 0..rng.random_range(0..=max_degree) {
                exp[rng.random_range(0..nvars)] += 1;
            }
            let re = BigRational::new(BigInt::from(rng.random_range(-5i64..=5)), BigInt::from(rng.random_range(1i64..=3)));
            let im = BigRational::new(BigInt::from(rng.random_range(-5i64..=5)), BigInt::from(rng.random_range(1i64..=3)));
            (exp, Complex::new(re, im))
        })
        .collect();
    PolynomialSymbol::from_terms(nvars, terms).expect("even arity")
}

/// Unit, canonical commutator and associativity of the exact star product on
/// `trials` random symbols of degree at most 3.
pub fn star_identities_hold(rng: &mut impl Rng, nvars: usize, trials: usize) -> Result<bool> {
    let n = nvars / 2;
    let one = PolynomialSymbol::constant(nvars, ExactCoefficient::new(BigRational::one(), BigRational::zero()));
    // exact for all products of degree ≤ 9
    let full = 9;
    let mut ok = true;
    for k in 0..n {
        let q = PolynomialSymbol::<ExactCoefficient>::coordinate(nvars, k);
        let p = PolynomialSymbol::<ExactCoefficient>::coordinate(nvars, n + k);
        let comm = star_product(&q, &p, full)?.sub(&star_product(&p, &q, full)?);
        // iħ: order 1, constant i
        let expected = PolynomialSymbol::constant(nvars, ExactCoefficient::new(BigRational::zero(), BigRational::one()));
        ok &= comm.max_order() == Some(1) && comm.order(0).is_zero() && comm.order(1) == expected;
    }
    for _ in 0..trials {
        let f = random_exact_symbol(rng, nvars, 3);
        let g = random_exact_symbol(rng, nvars, 3);
        let h = random_exact_symbol(rng, nvars, 3);
        let f_series = HbarSeries::from_symbol(f.clone());
        ok &= star_product(&one, &f, full)? == f_series && star_product(&f, &one, full)? == f_series;
        let left = star_product(&f, &g, full)?.star(&HbarSeries::from_symbol(h.clone()), full)?;
        let right = f_series.star(&star_product(&g, &h, full)?, full)?;
        ok &= left.sub(&right).max_order().is_none();
    }
    Ok(ok)
}

fn moyal_verify(
    cfg: &ExperimentConfig,
    space: &SymplecticStructure,
    hs: &[HamiltonianSpec],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "moyal-verify needs a non-empty even number of Hamiltonians", !hs.is_empty() && hs.len().is_multiple_of(2))?;
    let hbar = PlanckParameter::new(cfg.params.hbar.unwrap_or(1.0))?;
    let mut pairs = Vec::new();
    for (i, c) in hs.chunks(2).enumerate() {
        let (s1, s2) = closed_form_pair(&c[0], &c[1])
            .ok_or_else(|| invalid(format!("hamiltonians[{}..{}]: moyal-verify needs quadratics with b = 0 and c = 0", 2 * i, 2 * i + 2)))?;
        let closed = compose_quadratic_closed(space, &s1, &s2);
        pairs.push((s1, s2, closed));
    }
    let jobs = affine_jobs(cfg, pairs.len(), space.dim(), rng);
    let identities = star_identities_hold(rng, space.dim(), 5)?;
    let rows = par_rows(&jobs, |(u, j, x)| {
        let (s1, s2, closed) = &pairs[*u];
        let gap = closed.clone().and_then(|c| {
            let g = gaussian_phase_product(space, s1, s2, x, hbar)?;
            Ok((g.phase - c.eval(x)).abs())
        });
        vec![row(&label(cfg.experiment, *u), *j, inputs(x), "phase_gap", gap)]
    });
    let mut out = Outcomes::new(rows, vec![check("phase_gap", Rule::AtMost, 1e-8)]);
    out.conditions.push(("star_identities", identities));
    Ok(out)
}

fn sphere_identify(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> std::result::Result<Outcomes, ExperimentError> {
    let h_step = cfg.params.fd_step.unwrap_or(1e-4);
    let pullback_pairs = cfg.params.pullback_pairs.unwrap_or(50);
    let jobs: Vec<(usize, SpherePoint, SpherePoint)> =
        (0..cfg.samples).map(|j| (j, sample_sphere(rng), sample_sphere(rng))).collect();
    let rows = par_rows(&jobs, |(j, p, q)| {
        let id = cfg.experiment.name();
        let ins: Vec<f64> = p.v().iter().chain(q.v().iter()).copied().collect();
        let t = pair_to_tangent(p, q);
        let length = t.clone().and_then(|t| {
            let len = t.u.norm();
            if len >= 2.0 {
                return Err(Error::TangentTooLong { length: len });
            }
            Ok((len - 2.0 * (geodesic_distance(p, q) / 2.0).sin()).abs())
        });
        let round_trip = t.and_then(|t| {
            let (p2, q2) = tangent_to_pair(&t.base, &t.u)?;
            Ok((p2.v() - p.v()).norm().max((q2.v() - q.v()).norm()))
        });
        let mut out = vec![
            row(id, *j, ins.clone(), "length_law", length),
            row(id, *j, ins.clone(), "round_trip", round_trip),
        ];
        if *j < pullback_pairs {
            out.push(row(id, *j, ins, "pullback_defect", pullback_defect(p, q, h_step)));
        }
        out
    });
    Ok(Outcomes::new(
        rows,
        vec![
            check("length_law", Rule::AtMost, 1e-10),
            check("round_trip", Rule::AtMost, 1e-12),
            check("pullback_defect", Rule::AtMost, 1e-5),
        ],
    ))
}

fn affine_orbit(
    cfg: &ExperimentConfig,
    space: &SymplecticStructure,
    hs: &[HamiltonianSpec],
) -> std::result::Result<Outcomes, ExperimentError> {
    require(hs, "orbit needs exactly one Hamiltonian", hs.len() == 1)?;
    let h = &hs[0];
    let eps = cfg.params.epsilon.unwrap_or(0.01);
    let steps = cfg.params.steps.unwrap_or(10_000);
    let start = match &cfg.params.start {
        Some(s) if s.len() == space.dim() => DVector::from_column_slice(s),
        Some(s) => return Err(invalid(format!("params.start: expected {} values, got {}", space.dim(), s.len()))),
        None if space.n() == 1 => DVector::from_column_slice(&[2.0, 0.0]),
        None => return Err(invalid("params.start is required when space.n > 1")),
    };
    let traj = orbit(space, h, eps, &start, steps, &cfg.solver)?;
    let contrast = rk4_orbit(space, h, eps, &start, steps)?;
    let rows: Vec<ReportRow> = traj
        .states
        .iter()
        .zip(&traj.energies)
        .enumerate()
        .map(|(k, (x, e))| row("orbit", k, inputs(x), "H", Ok(*e)))
        .collect();
    let e0 = traj.energies[0];
    let drift: Vec<f64> = traj.energies.iter().map(|e| (e - e0).abs()).collect();
    let len = traj.energies.len();
    let half = len / 2;
    let first = traj.max_energy_error(0..half.max(1));
    let second = traj.max_energy_error(half..len);
    let max_dh = first.max(second);
    let ratio = if second == 0.0 { 0.0 } else { second / first };

    let mut out = Outcomes::new(
        rows,
        vec![
            Check {
                value: Some(max_dh),
                ..check("max_abs_dH", Rule::AtMost, 1e-4)
            },
            Check {
                value: Some(ratio),
                ..check("second_to_first_half_ratio", Rule::AtMost, 1.5)
            },
        ],
    );
    out.primary = Some(drift);
    out.conditions.push(("complete", traj.truncated.is_none()));
    let d = &mut out.details;
    d.insert("max_abs_dH".into(), json!(max_dh));
    d.insert("first_half_max_abs_dH".into(), json!(first));
    d.insert("second_half_max_abs_dH".into(), json!(second));
    d.insert("rk4_max_abs_dH".into(), json!(contrast.max_energy_error(0..contrast.energies.len())));
    d.insert("epsilon".into(), json!(eps));
    d.insert("steps".into(), json!(steps));
    d.insert(
        "truncated".into(),
        match &traj.truncated {
            Some((k, e)) => json!({"step": k, "error": e.tag()}),
            None => Value::Null,
        },
    );
    Ok(out)
}
