//! Command-line front end.
//!
//! ```text
//! homfilter --config run.toml [--seed U64] [--threads N] [--out DIR] <simulate|homogenize|filter|study>
//! ```
//!
//! Flags override the config file. Every output starts with a `#` manifest
//! block: tool version, subcommand, config path, seed, output file names and
//! the resolved configuration (without the output directory and thread
//! count, which do not influence results).
//!
//! | exit code | meaning                                             |
//! |-----------|-----------------------------------------------------|
//! | 0         | success                                             |
//! | 2         | usage: bad flags, config or parameter values        |
//! | 3         | numerical failure (blow-up, weight collapse, …)     |
//! | 4         | io error                                            |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::averaging::{build_homogenized, HomogenizedModel, StationaryAverager, TabulationGrid};
use crate::catalog::{CatalogModel, InitialLaw};
use crate::error::{Error, Result};
use crate::filtering::{run_full_filter_streaming, run_homogenized_filter_streaming, FilterConfig, StepSummary};
use crate::measures::{default_basis, marginal_x, metric_d, EmpiricalMeasure, DEFAULT_BASIS_SIZE};
use crate::model::{default_substeps, simulate_multiscale, simulate_observations, ObservationPath, SignalPath};
use crate::rng::{derive_seed, stream};
use crate::study::{
    run_study, run_study_with_source, ConvergenceReport, StudyConfig, SyntheticDistance, SyntheticLaw,
    WithHomogenized, ROLE_FULL, ROLE_HOMOG, ROLE_OBS, ROLE_TRUTH,
};
use crate::table::{parse_table, write_table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const SIGNAL_FILE: &str = "signal.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TABLE_FILE: &str = "homogenized.table";
pub const FILTER_FILE: &str = "filter.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const DISTANCES_FILE: &str = "distances.csv";

#[derive(Debug, Parser)]
#[command(name = "homfilter", version, about = "Multiscale filtering: simulation, homogenization, particle filters, ε-sweeps")]
pub struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a signal path and its observations
    Simulate,
    /// Tabulate the homogenized coefficients on a grid
    Homogenize,
    /// Run the full and/or homogenized filter on an observation file
    Filter,
    /// Run the ε-sweep convergence study
    Study,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Homogenize => "homogenize",
            Command::Filter => "filter",
            Command::Study => "study",
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_basis_size() -> usize {
    DEFAULT_BASIS_SIZE
}

fn default_threshold() -> f64 {
    0.5
}

fn default_bootstrap() -> usize {
    1000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub initial: InitialLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub horizon: f64,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps_fast: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Full,
    Homogenized,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default)]
    pub mode: FilterMode,
    /// Observation CSV, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<PathBuf>,
    /// Homogenized table; the analytic averages are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    pub n_particles: usize,
    pub dt: f64,
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps_fast: Option<usize>,
    #[serde(default = "default_basis_size")]
    pub basis_size: usize,
}

impl FilterSection {
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            resample_threshold: self.resample_threshold,
            dt: self.dt,
            substeps_fast: self.substeps_fast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Power,
    Constant,
}

/// Test hook replacing the filters by a prescribed distance law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub law: SyntheticKind,
    pub coef: f64,
    #[serde(default)]
    pub exponent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub epsilons: Vec<f64>,
    pub replications: usize,
    pub horizon: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    #[serde(default = "yes")]
    pub noise_floor: bool,
    /// Homogenized table; the analytic averages are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub averager: StationaryAverager,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TabulationGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn catalog_model(&self) -> Result<CatalogModel> {
        CatalogModel::from_config(&self.model.name, &self.model.params, self.model.initial)
    }

    fn section<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::invalid(name, "section is required by this subcommand"))
    }

    /// The configuration as recorded in manifests: output directory and
    /// thread count dropped, model parameters resolved to their values.
    pub fn snapshot(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.threads = None;
        if let Ok(model) = self.catalog_model() {
            resolved.model.params = model.params_table();
        }
        let mut table = toml::Table::try_from(&resolved).map_err(|e| Error::Config(e.to_string()))?;
        table.remove("output");
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A loaded configuration with flag overrides applied.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config_path: PathBuf,
    pub config: RunConfig,
}

impl Invocation {
    pub fn load(cli: &Cli) -> Result<Self> {
        let config_path = cli
            .config
            .clone()
            .ok_or_else(|| Error::invalid("--config", "a configuration file is required"))?;
        let text = fs::read_to_string(&config_path)?;
        let mut config = RunConfig::parse(&text)?;
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(t) = cli.threads {
            config.threads = Some(t);
        }
        if let Some(out) = &cli.out {
            config.output.dir = out.clone();
        }
        if config.threads == Some(0) {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        Ok(Invocation {
            command: cli.command,
            config_path,
            config,
        })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match self.config_path.parent() {
            Some(dir) => dir.join(path),
            None => path.to_path_buf(),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.config.output.dir.clone();
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn manifest(&self, outputs: &[&str]) -> Result<RunManifest> {
        Ok(RunManifest {
            tool_version: format!("homfilter {}", env!("CARGO_PKG_VERSION")),
            subcommand: self.command.as_str().to_string(),
            config_path: self.config_path.display().to_string(),
            seed: self.config.seed,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            snapshot: self.config.snapshot()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub config_path: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    /// Resolved configuration as TOML.
    pub snapshot: String,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# tool = {}", self.tool_version);
        let _ = writeln!(s, "# subcommand = {}", self.subcommand);
        let _ = writeln!(s, "# config = {}", self.config_path);
        let _ = writeln!(s, "# seed = {}", self.seed);
        let _ = writeln!(s, "# outputs = {}", self.outputs.join(" "));
        let _ = writeln!(s, "# resolved config:");
        for line in self.snapshot.lines() {
            let _ = writeln!(s, "#   {line}");
        }
        s
    }

    /// Reads the leading `#` block of a file written by this tool.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            tool_version: String::new(),
            subcommand: String::new(),
            config_path: String::new(),
            seed: 0,
            outputs: Vec::new(),
            snapshot: String::new(),
        };
        let mut in_snapshot = false;
        for (i, line) in text.lines().enumerate() {
            let Some(rest) = line.strip_prefix('#') else { break };
            if in_snapshot {
                if let Some(l) = rest.strip_prefix("   ") {
                    m.snapshot.push_str(l);
                    m.snapshot.push('\n');
                    continue;
                }
                in_snapshot = false;
            }
            let rest = rest.trim_start();
            if rest == "resolved config:" {
                in_snapshot = true;
                continue;
            }
            let Some((k, v)) = rest.split_once(" = ") else { continue };
            match k {
                "tool" => m.tool_version = v.to_string(),
                "subcommand" => m.subcommand = v.to_string(),
                "config" => m.config_path = v.to_string(),
                "seed" => {
                    m.seed = v.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad seed `{v}`"),
                    })?
                }
                "outputs" => m.outputs = v.split_whitespace().map(String::from).collect(),
                _ => {}
            }
        }
        Ok(m)
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
}

fn parse_f64(line: usize, tok: &str) -> Result<f64> {
    tok.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid number `{tok}`"),
    })
}

fn check_header(line: Option<(usize, &str)>, expected: &str) -> Result<()> {
    match line {
        Some((_, l)) if l == expected => Ok(()),
        Some((n, l)) => Err(Error::Parse {
            line: n,
            msg: format!("expected header `{expected}`, found `{l}`"),
        }),
        None => Err(Error::Parse {
            line: 0,
            msg: "missing header".into(),
        }),
    }
}

fn numbered(prefix: &str, count: usize) -> String {
    (1..=count).map(|i| format!(",{prefix}_{i}")).collect()
}

pub fn signal_csv(signal: &SignalPath) -> String {
    let m = signal.slow_states.first().map_or(0, Vec::len);
    let n = signal.fast_states.first().map_or(0, Vec::len);
    let mut s = format!("t{}{}\n", numbered("x", m), numbered("z", n));
    for i in 0..signal.len() {
        let _ = write!(s, "{:?}", signal.times[i]);
        for v in signal.slow_states[i].iter().chain(&signal.fast_states[i]) {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_signal_csv(text: &str) -> Result<SignalPath> {
    let mut lines = data_lines(text);
    let header = lines.next();
    let cols: Vec<&str> = header.map_or(Vec::new(), |h| h.1.split(',').collect());
    let m = cols.iter().filter(|c| c.starts_with("x_")).count();
    let n = cols.iter().filter(|c| c.starts_with("z_")).count();
    check_header(header, &format!("t{}{}", numbered("x", m), numbered("z", n)))?;
    let mut signal = SignalPath {
        times: Vec::new(),
        slow_states: Vec::new(),
        fast_states: Vec::new(),
    };
    for (ln, l) in lines {
        let v = l.split(',').map(|t| parse_f64(ln, t)).collect::<Result<Vec<_>>>()?;
        if v.len() != 1 + m + n {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {} fields", 1 + m + n),
            });
        }
        signal.times.push(v[0]);
        signal.slow_states.push(v[1..1 + m].to_vec());
        signal.fast_states.push(v[1 + m..].to_vec());
    }
    Ok(signal)
}

pub fn observations_csv(obs: &ObservationPath) -> String {
    let mut s = format!("t_start,t_end{}\n", numbered("dy", obs.dim()));
    for (i, inc) in obs.increments.iter().enumerate() {
        let _ = write!(s, "{:?},{:?}", obs.times[i], obs.times[i + 1]);
        for v in inc {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_observations_csv(text: &str) -> Result<ObservationPath> {
    let mut lines = data_lines(text);
    let header = lines.next();
    let d = header.map_or(0, |h| h.1.split(',').filter(|c| c.starts_with("dy_")).count());
    check_header(header, &format!("t_start,t_end{}", numbered("dy", d)))?;
    let mut times = Vec::new();
    let mut increments = Vec::new();
    for (ln, l) in lines {
        let v = l.split(',').map(|t| parse_f64(ln, t)).collect::<Result<Vec<_>>>()?;
        if v.len() != 2 + d {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {} fields", 2 + d),
            });
        }
        match times.last() {
            None => times.push(v[0]),
            Some(&t) if t == v[0] => {}
            Some(_) => {
                return Err(Error::Parse {
                    line: ln,
                    msg: "t_start does not continue the previous t_end".into(),
                })
            }
        }
        times.push(v[1]);
        increments.push(v[2..].to_vec());
    }
    if times.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no observation rows".into(),
        });
    }
    ObservationPath::new(times, increments)
}

/// One row of the per-step filter CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    /// `full` or `homogenized`.
    pub filter: String,
    pub summary: StepSummary,
}

pub fn filter_csv(rows: &[FilterRow], metric: Option<f64>) -> String {
    let m = rows.first().map_or(0, |r| r.summary.mean.len());
    let mut s = format!("filter,step,time{},ess,resampled\n", numbered("mean", m));
    for r in rows {
        let _ = write!(s, "{},{},{:?}", r.filter, r.summary.step, r.summary.time);
        for v in &r.summary.mean {
            let _ = write!(s, ",{v:?}");
        }
        let _ = writeln!(s, ",{:?},{}", r.summary.ess, u8::from(r.summary.resampled));
    }
    if let Some(d) = metric {
        let _ = writeln!(s, "# metric_d = {d:?}");
    }
    s
}

pub fn parse_filter_csv(text: &str) -> Result<(Vec<FilterRow>, Option<f64>)> {
    let mut lines = data_lines(text);
    let header = lines.next();
    let m = header.map_or(0, |h| h.1.split(',').filter(|c| c.starts_with("mean_")).count());
    check_header(header, &format!("filter,step,time{},ess,resampled", numbered("mean", m)))?;
    let mut rows = Vec::new();
    for (ln, l) in lines {
        let t: Vec<&str> = l.split(',').collect();
        if t.len() != 5 + m {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {} fields", 5 + m),
            });
        }
        let bad = |msg: &str| Error::Parse {
            line: ln,
            msg: msg.to_string(),
        };
        rows.push(FilterRow {
            filter: t[0].to_string(),
            summary: StepSummary {
                step: t[1].parse().map_err(|_| bad("bad step"))?,
                time: parse_f64(ln, t[2])?,
                mean: t[3..3 + m].iter().map(|v| parse_f64(ln, v)).collect::<Result<_>>()?,
                ess: parse_f64(ln, t[3 + m])?,
                resampled: match t[4 + m] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("resampled must be 0 or 1")),
                },
            },
        });
    }
    let mut metric = None;
    for (i, l) in text.lines().enumerate() {
        if let Some(v) = l.strip_prefix("# metric_d = ") {
            metric = Some(parse_f64(i + 1, v)?);
        }
    }
    Ok((rows, metric))
}

fn write_output(dir: &Path, name: &str, manifest: &RunManifest, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, format!("{}{}", manifest.render(), body))?;
    Ok(path)
}

pub fn cmd_simulate(inv: &Invocation) -> Result<Vec<PathBuf>> {
    let cfg = &inv.config;
    let sim = RunConfig::section(&cfg.simulate, "simulate")?;
    let catalog = cfg.catalog_model()?;
    let model = catalog.build(cfg.model.epsilon)?;
    let substeps = sim.substeps_fast.unwrap_or_else(|| default_substeps(model.epsilon()));
    let key = |role| derive_seed(cfg.seed, &[0, 0, role]);
    let mut truth = stream(key(ROLE_TRUTH));
    let (x0, z0) = catalog.sample_initial(&mut truth);
    let signal = simulate_multiscale(&model, &x0, &z0, sim.horizon, sim.dt, substeps, &mut truth)?;
    let obs = simulate_observations(&signal, &model, &mut stream(key(ROLE_OBS)))?;

    let dir = inv.out_dir()?;
    let manifest = inv.manifest(&[SIGNAL_FILE, OBSERVATIONS_FILE])?;
    Ok(vec![
        write_output(&dir, SIGNAL_FILE, &manifest, &signal_csv(&signal))?,
        write_output(&dir, OBSERVATIONS_FILE, &manifest, &observations_csv(&obs))?,
    ])
}

pub fn cmd_homogenize(inv: &Invocation) -> Result<Vec<PathBuf>> {
    let cfg = &inv.config;
    let grid = RunConfig::section(&cfg.grid, "grid")?;
    let model = cfg.catalog_model()?.build(cfg.model.epsilon)?;
    let hmodel = build_homogenized(&model, grid, &cfg.averager, cfg.seed)?;
    let dir = inv.out_dir()?;
    let manifest = inv.manifest(&[TABLE_FILE])?;
    Ok(vec![write_output(&dir, TABLE_FILE, &manifest, &write_table(&hmodel)?)?])
}

fn load_table(inv: &Invocation, path: &Path) -> Result<HomogenizedModel> {
    parse_table(&fs::read_to_string(inv.resolve(path))?)
}

/// Runs the configured filter(s) and returns the rows and, in `both` mode,
/// the metric between the final `x`-marginals.
pub fn run_filters(inv: &Invocation) -> Result<(Vec<FilterRow>, Option<f64>)> {
    let cfg = &inv.config;
    let section = RunConfig::section(&cfg.filter, "filter")?;
    let obs_path = section
        .observations
        .as_ref()
        .ok_or_else(|| Error::invalid("filter.observations", "an observation file is required"))?;
    let obs = parse_observations_csv(&fs::read_to_string(inv.resolve(obs_path))?)?;
    let catalog = cfg.catalog_model()?;
    let fcfg = section.filter_config();
    let key = |role| derive_seed(cfg.seed, &[0, 0, role]);

    let mut full_rows = Vec::new();
    let mut full_final = None;
    if section.mode != FilterMode::Homogenized {
        let model = catalog.build(cfg.model.epsilon)?;
        let ens = run_full_filter_streaming(
            &model,
            &obs,
            |n| catalog.sample_initial(n),
            &fcfg,
            &mut stream(key(ROLE_FULL)),
            |_, s| {
                full_rows.push(FilterRow {
                    filter: "full".into(),
                    summary: s.clone(),
                })
            },
        )?;
        full_final = Some(marginal_x(&ens, model.dims().slow)?);
    }
    let mut homog_rows = Vec::new();
    let mut homog_final = None;
    if section.mode != FilterMode::Full {
        let hmodel = match &section.table {
            Some(p) => load_table(inv, p)?,
            None => catalog.analytic_homogenized()?,
        };
        let ens = run_homogenized_filter_streaming(
            &hmodel,
            &obs,
            |n| catalog.sample_initial_slow(n),
            &fcfg,
            &mut stream(key(ROLE_HOMOG)),
            |_, s| {
                homog_rows.push(FilterRow {
                    filter: "homogenized".into(),
                    summary: s.clone(),
                })
            },
        )?;
        homog_final = Some(EmpiricalMeasure::from_ensemble(&ens));
    }
    let metric = match (&full_final, &homog_final) {
        (Some(a), Some(b)) => Some(metric_d(a, b, &default_basis(section.basis_size, a.dim())?)?),
        _ => None,
    };
    let rows = if homog_rows.is_empty() {
        full_rows
    } else if full_rows.is_empty() {
        homog_rows
    } else {
        full_rows
            .into_iter()
            .zip(homog_rows)
            .flat_map(|(a, b)| [a, b])
            .collect()
    };
    Ok((rows, metric))
}

pub fn cmd_filter(inv: &Invocation) -> Result<Vec<PathBuf>> {
    let (rows, metric) = run_filters(inv)?;
    let dir = inv.out_dir()?;
    let manifest = inv.manifest(&[FILTER_FILE])?;
    Ok(vec![write_output(&dir, FILTER_FILE, &manifest, &filter_csv(&rows, metric))?])
}

pub fn study_config(cfg: &RunConfig) -> Result<StudyConfig> {
    let s = RunConfig::section(&cfg.study, "study")?;
    let f = RunConfig::section(&cfg.filter, "filter")?;
    Ok(StudyConfig {
        epsilons: s.epsilons.clone(),
        replications: s.replications,
        horizon: s.horizon,
        filter: f.filter_config(),
        basis_size: f.basis_size,
        root_seed: cfg.seed,
        bootstrap_resamples: s.bootstrap_resamples,
        noise_floor: s.noise_floor,
    })
}

/// Runs the study and writes the report and the per-replication CSV.
pub fn cmd_study(inv: &Invocation) -> Result<(ConvergenceReport, Vec<PathBuf>)> {
    let cfg = &inv.config;
    let scfg = study_config(cfg)?;
    let section = RunConfig::section(&cfg.study, "study")?;
    let catalog = cfg.catalog_model()?;
    let report = if let Some(syn) = section.synthetic {
        let law = match syn.law {
            SyntheticKind::Power => SyntheticLaw::Power {
                coef: syn.coef,
                exponent: syn.exponent,
            },
            SyntheticKind::Constant => SyntheticLaw::Constant(syn.coef),
        };
        run_study_with_source(
            &scfg,
            &SyntheticDistance {
                law,
                fail_every: syn.fail_every,
            },
        )?
    } else if let Some(p) = &section.table {
        let family = WithHomogenized {
            model: catalog,
            homogenized: load_table(inv, p)?,
            label: format!("table {}", p.display()),
        };
        run_study(&scfg, &family)?
    } else {
        run_study(&scfg, &catalog)?
    };
    let dir = inv.out_dir()?;
    let manifest = inv.manifest(&[REPORT_FILE, DISTANCES_FILE])?;
    let paths = vec![
        write_output(&dir, REPORT_FILE, &manifest, &report.to_text())?,
        write_output(&dir, DISTANCES_FILE, &manifest, &report.to_csv())?,
    ];
    Ok((report, paths))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Executes a parsed command line; returns the written files.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let inv = Invocation::load(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = inv.config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match inv.command {
        Command::Simulate => cmd_simulate(&inv),
        Command::Homogenize => cmd_homogenize(&inv),
        Command::Filter => cmd_filter(&inv),
        Command::Study => {
            let (report, paths) = cmd_study(&inv)?;
            println!(
                "slope {:.4} (95% bootstrap interval {:.4} to {:.4}, {} weights)",
                report.slope,
                report.slope_ci.0,
                report.slope_ci.1,
                report.weighting.as_str()
            );
            Ok(paths)
        }
    })
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
