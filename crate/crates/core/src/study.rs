//! The ε-sweep: for each ε, simulate a truth path and its observations, run
//! the full and the homogenized filter on the same observations, record
//! `d(π^{ε,x}_T, π^0_T)`, then fit `log(mean distance)` against `log ε`.
//!
//! Streams are keyed by `(ε index, replication, role)` with roles
//! [`ROLE_TRUTH`], [`ROLE_OBS`], [`ROLE_FULL`], [`ROLE_HOMOG`] and
//! [`ROLE_FLOOR`]; the bootstrap uses its own key.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::HomogenizedModel;
use crate::catalog::CatalogModel;
use crate::error::{Error, Result};
use crate::filtering::{run_full_filter_streaming, run_homogenized_filter_streaming, FilterConfig};
use crate::measures::{default_basis, marginal_x, metric_d, EmpiricalMeasure, TestFunctionBasis, DEFAULT_BASIS_SIZE};
use crate::model::{default_substeps, simulate_multiscale, simulate_observations, MultiscaleModel, ObservationPath};
use crate::rng::{derive_seed, derived_stream, stream, Stream};

pub const ROLE_TRUTH: u64 = 0;
pub const ROLE_OBS: u64 = 1;
pub const ROLE_FULL: u64 = 2;
pub const ROLE_HOMOG: u64 = 3;
/// Second full filter, for the particle-noise floor.
pub const ROLE_FLOOR: u64 = 4;
const BOOTSTRAP_KEY: u64 = 0xb007_5742;

/// Abort when more than this fraction of replications fail at one ε.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

fn default_basis_size() -> usize {
    DEFAULT_BASIS_SIZE
}

fn default_bootstrap() -> usize {
    1000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Strictly decreasing, in `(0, 1]`, at least three.
    pub epsilons: Vec<f64>,
    pub replications: usize,
    pub horizon: f64,
    pub filter: FilterConfig,
    #[serde(default = "default_basis_size")]
    pub basis_size: usize,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    /// Also compare two independent full filters per replication.
    #[serde(default = "yes")]
    pub noise_floor: bool,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.len() < 3 {
            return Err(Error::invalid("study.epsilons", "need at least three values for a slope fit"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::invalid("study.epsilons", "values must lie in (0, 1]"));
        }
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid("study.epsilons", "must be strictly decreasing"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("study.replications", "must be at least 1"));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("study.horizon", "must be finite and nonnegative"));
        }
        if self.basis_size == 0 {
            return Err(Error::invalid("study.basis_size", "must be at least 1"));
        }
        self.filter.validate()
    }
}

/// A model family indexed by ε, with its ε-independent homogenized limit.
pub trait ModelFamily: Sync {
    fn full_model(&self, epsilon: f64) -> Result<MultiscaleModel>;
    fn homogenized(&self) -> Result<HomogenizedModel>;
    fn sample_initial(&self, noise: &mut Stream) -> (Vec<f64>, Vec<f64>);
    fn sample_initial_slow(&self, noise: &mut Stream) -> Vec<f64> {
        self.sample_initial(noise).0
    }
    fn describe(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

impl ModelFamily for CatalogModel {
    fn full_model(&self, epsilon: f64) -> Result<MultiscaleModel> {
        self.build(epsilon)
    }

    fn homogenized(&self) -> Result<HomogenizedModel> {
        self.analytic_homogenized()
    }

    fn sample_initial(&self, noise: &mut Stream) -> (Vec<f64>, Vec<f64>) {
        CatalogModel::sample_initial(self, noise)
    }

    fn sample_initial_slow(&self, noise: &mut Stream) -> Vec<f64> {
        CatalogModel::sample_initial_slow(self, noise)
    }

    fn describe(&self) -> Vec<(String, String)> {
        describe_catalog(self, "analytic")
    }
}

fn describe_catalog(model: &CatalogModel, homogenized: &str) -> Vec<(String, String)> {
    let mut out = vec![("model".to_string(), model.name().to_string())];
    for (k, v) in model.params_table() {
        out.push((format!("model.params.{k}"), v.to_string()));
    }
    let i = &model.initial;
    out.push(("model.initial.x_mean".into(), format!("{:?}", i.x_mean)));
    out.push(("model.initial.x_std".into(), format!("{:?}", i.x_std)));
    if let Some(v) = i.z_mean {
        out.push(("model.initial.z_mean".into(), format!("{v:?}")));
    }
    if let Some(v) = i.z_std {
        out.push(("model.initial.z_std".into(), format!("{v:?}")));
    }
    out.push(("homogenized".into(), homogenized.to_string()));
    out
}

/// A catalog model paired with a homogenized model from elsewhere, typically
/// a reloaded table.
pub struct WithHomogenized {
    pub model: CatalogModel,
    pub homogenized: HomogenizedModel,
    pub label: String,
}

impl ModelFamily for WithHomogenized {
    fn full_model(&self, epsilon: f64) -> Result<MultiscaleModel> {
        self.model.build(epsilon)
    }

    fn homogenized(&self) -> Result<HomogenizedModel> {
        Ok(self.homogenized.clone())
    }

    fn sample_initial(&self, noise: &mut Stream) -> (Vec<f64>, Vec<f64>) {
        self.model.sample_initial(noise)
    }

    fn sample_initial_slow(&self, noise: &mut Stream) -> Vec<f64> {
        self.model.sample_initial_slow(noise)
    }

    fn describe(&self) -> Vec<(String, String)> {
        describe_catalog(&self.model, &self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationOutcome {
    pub distance: f64,
    /// Distance between two independent full filters on the same data.
    pub floor: Option<f64>,
}

/// Produces one distance sample per `(ε index, replication)`.
pub trait DistanceSource: Sync {
    fn sample(&self, eps_index: usize, epsilon: f64, replication: usize) -> Result<ReplicationOutcome>;
    fn describe(&self) -> Vec<(String, String)>;
}

/// One replication: truth, observations, and both filters on the same
/// observation path, compared through the metric on the `x`-marginals at
/// the horizon.
pub fn run_replication<F: ModelFamily + ?Sized>(
    family: &F,
    model: &MultiscaleModel,
    hmodel: &HomogenizedModel,
    cfg: &StudyConfig,
    basis: &TestFunctionBasis,
    eps_index: usize,
    replication: usize,
) -> Result<ReplicationOutcome> {
    let key = |role: u64| derive_seed(cfg.root_seed, &[eps_index as u64, replication as u64, role]);
    let filter = &cfg.filter;
    let substeps = filter.substeps_fast.unwrap_or_else(|| default_substeps(model.epsilon()));

    let mut truth_rng = stream(key(ROLE_TRUTH));
    let (x0, z0) = family.sample_initial(&mut truth_rng);
    let obs = if cfg.horizon == 0.0 {
        ObservationPath::new(vec![0.0], Vec::new())?
    } else {
        let signal = simulate_multiscale(model, &x0, &z0, cfg.horizon, filter.dt, substeps, &mut truth_rng)?;
        simulate_observations(&signal, model, &mut stream(key(ROLE_OBS)))?
    };

    let m = model.dims().slow;
    let run_full = |role| -> Result<EmpiricalMeasure> {
        let ens = run_full_filter_streaming(
            model,
            &obs,
            |n: &mut Stream| family.sample_initial(n),
            filter,
            &mut stream(key(role)),
            |_, _| {},
        )?;
        marginal_x(&ens, m)
    };
    let full = run_full(ROLE_FULL)?;
    let homog = run_homogenized_filter_streaming(
        hmodel,
        &obs,
        |n: &mut Stream| family.sample_initial_slow(n),
        filter,
        &mut stream(key(ROLE_HOMOG)),
        |_, _| {},
    )?;
    let distance = metric_d(&full, &EmpiricalMeasure::from_ensemble(&homog), basis)?;
    let floor = if cfg.noise_floor {
        Some(metric_d(&full, &run_full(ROLE_FLOOR)?, basis)?)
    } else {
        None
    };
    Ok(ReplicationOutcome { distance, floor })
}

/// Filter-against-filter distances for a model family.
pub struct FilterComparison<'a, F: ModelFamily + ?Sized> {
    family: &'a F,
    cfg: &'a StudyConfig,
    models: Vec<MultiscaleModel>,
    hmodel: HomogenizedModel,
    basis: TestFunctionBasis,
}

impl<'a, F: ModelFamily + ?Sized> FilterComparison<'a, F> {
    pub fn new(family: &'a F, cfg: &'a StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let models = cfg
            .epsilons
            .iter()
            .map(|&e| family.full_model(e))
            .collect::<Result<Vec<_>>>()?;
        let hmodel = family.homogenized()?;
        let basis = default_basis(cfg.basis_size, hmodel.dim_slow())?;
        Ok(FilterComparison {
            family,
            cfg,
            models,
            hmodel,
            basis,
        })
    }
}

impl<F: ModelFamily + ?Sized> DistanceSource for FilterComparison<'_, F> {
    fn sample(&self, eps_index: usize, _epsilon: f64, replication: usize) -> Result<ReplicationOutcome> {
        run_replication(
            self.family,
            &self.models[eps_index],
            &self.hmodel,
            self.cfg,
            &self.basis,
            eps_index,
            replication,
        )
    }

    fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![("source".to_string(), "filter-comparison".to_string())];
        out.extend(self.family.describe());
        out.push(("basis".into(), self.basis.tag.clone()));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticLaw {
    /// `coef · ε^exponent`
    Power { coef: f64, exponent: f64 },
    Constant(f64),
}

/// Test hook: returns a prescribed distance, optionally failing every
/// `fail_every`-th replication (replications `fail_every − 1`,
/// `2·fail_every − 1`, …).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDistance {
    pub law: SyntheticLaw,
    pub fail_every: Option<usize>,
}

impl DistanceSource for SyntheticDistance {
    fn sample(&self, _eps_index: usize, epsilon: f64, replication: usize) -> Result<ReplicationOutcome> {
        if let Some(k) = self.fail_every {
            if k > 0 && (replication + 1).is_multiple_of(k) {
                return Err(Error::invalid("synthetic", format!("injected failure at replication {replication}")));
            }
        }
        let distance = match self.law {
            SyntheticLaw::Power { coef, exponent } => coef * epsilon.powf(exponent),
            SyntheticLaw::Constant(c) => c,
        };
        Ok(ReplicationOutcome { distance, floor: None })
    }

    fn describe(&self) -> Vec<(String, String)> {
        let law = match self.law {
            SyntheticLaw::Power { coef, exponent } => format!("power {coef:?} {exponent:?}"),
            SyntheticLaw::Constant(c) => format!("constant {c:?}"),
        };
        let mut out = vec![("source".to_string(), "synthetic".to_string()), ("synthetic.law".into(), law)];
        if let Some(k) = self.fail_every {
            out.push(("synthetic.fail_every".into(), k.to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Weights `(mean / se)²`, the inverse variance of `log(mean)`.
    InverseVariance,
    /// Used when some standard error is zero.
    Equal,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::InverseVariance => "inverse-variance",
            Weighting::Equal => "equal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub mean: f64,
    /// Across-replication standard deviation over `√completed`; 0 with
    /// fewer than two completed replications.
    pub std_error: f64,
    pub completed: usize,
    pub failed: usize,
    pub noise_floor: Option<f64>,
    pub noise_floor_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub epsilon: f64,
    pub replication: usize,
    /// `None` for a failed replication.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Ordered key/value provenance: configuration, seeds, source.
    pub provenance: Vec<(String, String)>,
    pub rows: Vec<EpsilonSummary>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_ci: (f64, f64),
    pub weighting: Weighting,
    pub samples: Vec<ReplicationRecord>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Weighted least squares of `log mean` on `log ε`. Returns slope,
/// intercept and the weighting used; NaN if some mean is not positive.
pub fn fit_loglog(epsilons: &[f64], means: &[f64], std_errors: &[f64]) -> (f64, f64, Weighting) {
    let weighting = if std_errors.iter().all(|s| *s > 0.0 && s.is_finite()) {
        Weighting::InverseVariance
    } else {
        Weighting::Equal
    };
    if means.iter().any(|m| !(*m > 0.0)) || epsilons.len() < 2 {
        return (f64::NAN, f64::NAN, weighting);
    }
    let w: Vec<f64> = match weighting {
        Weighting::InverseVariance => means.iter().zip(std_errors).map(|(m, s)| (m / s).powi(2)).collect(),
        Weighting::Equal => vec![1.0; means.len()],
    };
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let sw: f64 = w.iter().sum();
    let xbar = w.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ybar = w.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for i in 0..xs.len() {
        sxy += w[i] * (xs[i] - xbar) * (ys[i] - ybar);
        sxx += w[i] * (xs[i] - xbar) * (xs[i] - xbar);
    }
    let slope = sxy / sxx;
    (slope, ybar - slope * xbar, weighting)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn bootstrap_ci(epsilons: &[f64], per_eps: &[Vec<f64>], resamples: usize, root_seed: u64) -> (f64, f64) {
    let mut rng = derived_stream(root_seed, &[BOOTSTRAP_KEY]);
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = Vec::new();
    for _ in 0..resamples {
        let mut means = Vec::with_capacity(per_eps.len());
        let mut ses = Vec::with_capacity(per_eps.len());
        for d in per_eps {
            buf.clear();
            buf.extend((0..d.len()).map(|_| d[rng.random_range(0..d.len())]));
            let (m, s) = mean_se(&buf);
            means.push(m);
            ses.push(s);
        }
        let slope = fit_loglog(epsilons, &means, &ses).0;
        if slope.is_finite() {
            slopes.push(slope);
        }
    }
    slopes.sort_by(f64::total_cmp);
    (quantile(&slopes, 0.025), quantile(&slopes, 0.975))
}

fn config_provenance(cfg: &StudyConfig) -> Vec<(String, String)> {
    let eps: Vec<String> = cfg.epsilons.iter().map(|e| format!("{e:?}")).collect();
    vec![
        ("root_seed".into(), cfg.root_seed.to_string()),
        (
            "seed_derivation".into(),
            "splitmix64(root_seed; eps_index, replication, role) truth=0 obs=1 full=2 homog=3 floor=4".into(),
        ),
        ("epsilons".into(), eps.join(" ")),
        ("replications".into(), cfg.replications.to_string()),
        ("horizon".into(), format!("{:?}", cfg.horizon)),
        ("filter.n_particles".into(), cfg.filter.n_particles.to_string()),
        ("filter.dt".into(), format!("{:?}", cfg.filter.dt)),
        ("filter.resample_threshold".into(), format!("{:?}", cfg.filter.resample_threshold)),
        (
            "filter.substeps_fast".into(),
            cfg.filter.substeps_fast.map_or("ceil(1/epsilon)".into(), |s| s.to_string()),
        ),
        ("basis_size".into(), cfg.basis_size.to_string()),
        ("bootstrap_resamples".into(), cfg.bootstrap_resamples.to_string()),
        ("noise_floor".into(), cfg.noise_floor.to_string()),
    ]
}

/// Runs every `(ε, replication)` in parallel and aggregates in a fixed order,
/// so the report depends only on the configuration.
pub fn run_study_with_source<S: DistanceSource + ?Sized>(cfg: &StudyConfig, source: &S) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let m = cfg.replications;
    let tasks: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|e| (0..m).map(move |r| (e, r)))
        .collect();
    let outcomes: Vec<Result<ReplicationOutcome>> = tasks
        .par_iter()
        .map(|&(e, r)| source.sample(e, cfg.epsilons[e], r))
        .collect();

    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    let mut samples = Vec::with_capacity(tasks.len());
    let mut per_eps = Vec::with_capacity(cfg.epsilons.len());
    let mut outcomes = outcomes.into_iter();
    for &epsilon in &cfg.epsilons {
        let mut distances = Vec::with_capacity(m);
        let mut floors = Vec::new();
        let mut failed = 0;
        let mut first_error = None;
        for replication in 0..m {
            let outcome = outcomes.next().expect("one outcome per task");
            let distance = match outcome {
                Ok(o) if o.distance.is_finite() => {
                    distances.push(o.distance);
                    floors.extend(o.floor);
                    Some(o.distance)
                }
                Ok(o) => {
                    failed += 1;
                    first_error.get_or_insert_with(|| format!("non-finite distance {}", o.distance));
                    None
                }
                Err(e) => {
                    failed += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                    None
                }
            };
            samples.push(ReplicationRecord {
                epsilon,
                replication,
                distance,
            });
        }
        if failed as f64 > MAX_FAILURE_FRACTION * m as f64 {
            return Err(Error::TooManyFailures {
                epsilon,
                failed,
                total: m,
                first_error: first_error.unwrap_or_default(),
            });
        }
        let (mean, std_error) = mean_se(&distances);
        let (noise_floor, noise_floor_se) = if floors.is_empty() {
            (None, None)
        } else {
            let (f, s) = mean_se(&floors);
            (Some(f), Some(s))
        };
        rows.push(EpsilonSummary {
            epsilon,
            mean,
            std_error,
            completed: distances.len(),
            failed,
            noise_floor,
            noise_floor_se,
        });
        per_eps.push(distances);
    }

    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let ses: Vec<f64> = rows.iter().map(|r| r.std_error).collect();
    let (slope, intercept, weighting) = fit_loglog(&cfg.epsilons, &means, &ses);
    let slope_ci = bootstrap_ci(&cfg.epsilons, &per_eps, cfg.bootstrap_resamples, cfg.root_seed);

    let mut provenance = config_provenance(cfg);
    provenance.extend(source.describe());
    Ok(ConvergenceReport {
        provenance,
        rows,
        slope,
        intercept,
        slope_ci,
        weighting,
        samples,
    })
}

/// Filter comparison study over a model family.
pub fn run_study<F: ModelFamily + ?Sized>(cfg: &StudyConfig, family: &F) -> Result<ConvergenceReport> {
    let source = FilterComparison::new(family, cfg)?;
    run_study_with_source(cfg, &source)
}

const REPORT_MAGIC: &str = "convergence-report v1";
const TABLE_HEADER: &str = "epsilon mean_distance std_error completed failed noise_floor noise_floor_se";

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:?}"))
}

impl ConvergenceReport {
    /// Consecutive ε pairs (in the configured descending order) where the
    /// mean distance rises by more than `2·√(se_i² + se_j²)`.
    pub fn trend_violations(&self) -> Vec<(usize, usize)> {
        self.rows
            .windows(2)
            .enumerate()
            .filter(|(_, w)| {
                let tol = 2.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
                w[1].mean > w[0].mean + tol
            })
            .map(|(i, _)| (i, i + 1))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_MAGIC}");
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "fit.weighting = {}", self.weighting.as_str());
        let _ = writeln!(s, "fit.slope = {:?}", self.slope);
        let _ = writeln!(s, "fit.intercept = {:?}", self.intercept);
        let _ = writeln!(s, "fit.slope_ci_low = {:?}", self.slope_ci.0);
        let _ = writeln!(s, "fit.slope_ci_high = {:?}", self.slope_ci.1);
        let _ = writeln!(s, "table");
        let _ = writeln!(s, "{TABLE_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:?} {:?} {:?} {} {} {} {}",
                r.epsilon,
                r.mean,
                r.std_error,
                r.completed,
                r.failed,
                opt(r.noise_floor),
                opt(r.noise_floor_se)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,replication,distance\n");
        for r in &self.samples {
            let d = r.distance.map_or("NaN".into(), |d| format!("{d:?}"));
            let _ = writeln!(s, "{:?},{},{}", r.epsilon, r.replication, d);
        }
        s
    }

    /// Inverse of [`to_text`](Self::to_text) and [`to_csv`](Self::to_csv);
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str, csv: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let num = |line: usize, t: &str| -> Result<f64> { t.parse().map_err(|_| perr(line, format!("bad number `{t}`"))) };
        let int = |line: usize, t: &str| -> Result<usize> { t.parse().map_err(|_| perr(line, format!("bad integer `{t}`"))) };

        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l == REPORT_MAGIC => {}
            _ => return Err(perr(1, format!("expected `{REPORT_MAGIC}`"))),
        }
        let mut provenance = Vec::new();
        let mut fit = std::collections::HashMap::new();
        let mut in_table = false;
        for (ln, l) in lines.by_ref() {
            if l == "table" {
                in_table = true;
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| perr(ln, "expected `key = value`".into()))?;
            if let Some(f) = k.strip_prefix("fit.") {
                fit.insert(f.to_string(), (ln, v.to_string()));
            } else {
                provenance.push((k.to_string(), v.to_string()));
            }
        }
        if !in_table {
            return Err(perr(0, "missing table".into()));
        }
        let get = |k: &str| fit.get(k).ok_or_else(|| perr(0, format!("missing fit.{k}")));
        let fnum = |k: &str| -> Result<f64> {
            let (ln, v) = get(k)?;
            num(*ln, v)
        };
        let weighting = match get("weighting")?.1.as_str() {
            "inverse-variance" => Weighting::InverseVariance,
            "equal" => Weighting::Equal,
            other => return Err(perr(get("weighting")?.0, format!("unknown weighting `{other}`"))),
        };
        match lines.next() {
            Some((_, l)) if l == TABLE_HEADER => {}
            other => return Err(perr(other.map_or(0, |o| o.0), "expected table header".into())),
        }
        let mut rows = Vec::new();
        for (ln, l) in lines {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 7 {
                return Err(perr(ln, format!("expected 7 columns, found {}", t.len())));
            }
            let optnum = |t: &str| -> Result<Option<f64>> { if t == "-" { Ok(None) } else { num(ln, t).map(Some) } };
            rows.push(EpsilonSummary {
                epsilon: num(ln, t[0])?,
                mean: num(ln, t[1])?,
                std_error: num(ln, t[2])?,
                completed: int(ln, t[3])?,
                failed: int(ln, t[4])?,
                noise_floor: optnum(t[5])?,
                noise_floor_se: optnum(t[6])?,
            });
        }

        let mut samples = Vec::new();
        let mut csv_lines = csv
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.starts_with('#'));
        match csv_lines.next() {
            Some((_, "epsilon,replication,distance")) => {}
            _ => return Err(perr(1, "expected csv header".into())),
        }
        for (ln, l) in csv_lines {
            let t: Vec<&str> = l.split(',').collect();
            if t.len() != 3 {
                return Err(perr(ln, "expected 3 fields".into()));
            }
            let d = num(ln, t[2])?;
            samples.push(ReplicationRecord {
                epsilon: num(ln, t[0])?,
                replication: int(ln, t[1])?,
                distance: if d.is_nan() { None } else { Some(d) },
            });
        }
        Ok(ConvergenceReport {
            provenance,
            rows,
            slope: fnum("slope")?,
            intercept: fnum("intercept")?,
            slope_ci: (fnum("slope_ci_low")?, fnum("slope_ci_high")?),
            weighting,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Family, InitialLaw, LinearParams};

    fn cfg(m: usize) -> StudyConfig {
        StudyConfig {
            epsilons: vec![0.5, 0.25, 0.125, 0.0625],
            replications: m,
            horizon: 0.2,
            filter: FilterConfig::new(64, 0.01),
            basis_size: 16,
            root_seed: 7,
            bootstrap_resamples: 200,
            noise_floor: true,
        }
    }

    #[test]
    fn power_law_slope_is_exact() {
        let s = SyntheticDistance {
            law: SyntheticLaw::Power { coef: 0.3, exponent: 0.5 },
            fail_every: None,
        };
        let r = run_study_with_source(&cfg(5), &s).unwrap();
        assert!((r.slope - 0.5).abs() < 1e-12, "{}", r.slope);
        assert!((r.intercept - 0.3f64.ln()).abs() < 1e-12);
        assert_eq!(r.weighting, Weighting::Equal);
        assert!((r.slope_ci.0 - 0.5).abs() < 1e-12 && (r.slope_ci.1 - 0.5).abs() < 1e-12);

        let c = SyntheticDistance {
            law: SyntheticLaw::Constant(0.2),
            fail_every: None,
        };
        let r = run_study_with_source(&cfg(5), &c).unwrap();
        assert!(r.slope.abs() < 1e-12);
        assert!(r.trend_violations().is_empty());
    }

    #[test]
    fn weighted_fit_recovers_exact_lines() {
        let eps = [0.5, 0.25, 0.1];
        let means: Vec<f64> = eps.iter().map(|e: &f64| 2.0 * e.powf(0.7)).collect();
        let (slope, intercept, w) = fit_loglog(&eps, &means, &[0.1, 0.01, 0.3]);
        assert_eq!(w, Weighting::InverseVariance);
        assert!((slope - 0.7).abs() < 1e-12);
        assert!((intercept - 2f64.ln()).abs() < 1e-12);
        assert!(fit_loglog(&eps, &[1.0, 0.0, 1.0], &[0.1; 3]).0.is_nan());
    }

    #[test]
    fn failures_are_counted_or_abort() {
        let some = SyntheticDistance {
            law: SyntheticLaw::Constant(0.2),
            fail_every: Some(10),
        };
        let r = run_study_with_source(&cfg(20), &some).unwrap();
        assert!(r.rows.iter().all(|row| row.failed == 2 && row.completed == 18));
        assert_eq!(r.samples.iter().filter(|s| s.distance.is_none()).count(), 8);

        let many = SyntheticDistance {
            law: SyntheticLaw::Constant(0.2),
            fail_every: Some(2),
        };
        match run_study_with_source(&cfg(20), &many) {
            Err(Error::TooManyFailures { failed, total, .. }) => assert_eq!((failed, total), (10, 20)),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        c.epsilons = vec![0.5, 0.25];
        assert!(c.validate().is_err());
        c.epsilons = vec![0.5, 0.5, 0.25];
        assert!(c.validate().is_err());
        c.epsilons = vec![1.5, 0.5, 0.25];
        assert!(c.validate().is_err());
        c.epsilons = vec![1.0, 0.5, 0.25];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn report_round_trips() {
        let s = SyntheticDistance {
            law: SyntheticLaw::Power { coef: 0.1, exponent: 0.5 },
            fail_every: Some(5),
        };
        let mut r = run_study_with_source(&cfg(10), &s).unwrap();
        r.rows[0].noise_floor = Some(0.012345678901234567);
        r.rows[0].noise_floor_se = Some(1e-5);
        let back = ConvergenceReport::parse(&r.to_text(), &r.to_csv()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn single_replication_is_deterministic_and_zero_at_time_zero() {
        let family = CatalogModel::new(Family::Linear(LinearParams::default()), InitialLaw::delta(0.3));
        let mut c = cfg(1);
        c.horizon = 0.0;
        let src = FilterComparison::new(&family, &c).unwrap();
        let o = src.sample(0, 0.5, 0).unwrap();
        assert_eq!(o.distance, 0.0);

        let family = CatalogModel::new(Family::Linear(LinearParams::default()), InitialLaw::default());
        let c = cfg(1);
        let src = FilterComparison::new(&family, &c).unwrap();
        let a = src.sample(2, 0.125, 0).unwrap();
        let b = src.sample(2, 0.125, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.distance > 0.0 && a.distance <= 1.0);
    }
}
