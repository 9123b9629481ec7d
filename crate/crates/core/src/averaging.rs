//! Invariant-measure averages of the frozen fast process and the homogenized
//! slow model built from them.
//!
//! `p∞(θ; x)` is estimated by long-run time averaging of the frozen-`x` fast
//! process, which only relies on its ergodicity and works in any dimension.
//! The homogenized coefficients are
//!
//! ```text
//! b̄(x) = p∞(b; x)    ā(x) = p∞(σσᵀ; x)    σ̄(x) = ā(x)^{1/2}    h̄(x) = p∞(h; x)
//! ```
//!
//! and are either supplied in closed form or tabulated on a grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coef, MultiscaleModel, Workspace};
use crate::rng::{derived_stream, NoiseSource};

/// Eigenvalues above `-TOL_PSD` are clipped to zero instead of rejected.
pub const TOL_PSD: f64 = 1e-10;

const BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryAverager {
    pub burn_in: f64,
    pub sample_horizon: f64,
    pub dt: f64,
    pub replicates: usize,
}

impl Default for StationaryAverager {
    fn default() -> Self {
        StationaryAverager {
            burn_in: 10.0,
            sample_horizon: 2010.0,
            dt: 1e-3,
            replicates: 32,
        }
    }
}

impl StationaryAverager {
    pub fn validate(&self) -> Result<()> {
        if !(self.burn_in > 0.0) {
            return Err(Error::invalid("averager.burn_in", "must be positive"));
        }
        if !(self.sample_horizon > self.burn_in) {
            return Err(Error::invalid(
                "averager.sample_horizon",
                "must exceed burn_in",
            ));
        }
        if !(self.dt > 0.0) || self.dt > self.sample_horizon - self.burn_in {
            return Err(Error::invalid(
                "averager.dt",
                "must be positive and shorter than the sampling window",
            ));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("averager.replicates", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryEstimate {
    pub value: Vec<f64>,
    /// Across-replicate standard deviation over `√replicates`.
    pub std_error: Vec<f64>,
    /// Some replicate disagrees with the pooled mean by more than ten pooled
    /// within-replicate standard errors.
    pub non_ergodic_warning: bool,
}

/// `θ(x, z, out)`, with the same buffer convention as the model coefficients.
pub type Integrand<'a> = dyn Fn(&[f64], &[f64], &mut Vec<f64>) + Sync + 'a;

/// Running mean that stays exact on constant input.
#[derive(Debug, Clone)]
struct RunningMean {
    count: usize,
    mean: Vec<f64>,
}

impl RunningMean {
    fn new(dim: usize) -> Self {
        RunningMean {
            count: 0,
            mean: vec![0.0; dim],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for (m, x) in self.mean.iter_mut().zip(v) {
            *m += (x - *m) / k;
        }
    }
}

fn sample_variance(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Estimates `p∞(θ; x)` from `cfg.replicates` independent frozen paths, each
/// started at a standard Gaussian `z0` and averaged over
/// `t ∈ [burn_in, sample_horizon]`.
pub fn estimate_stationary_average<N: NoiseSource + ?Sized>(
    model: &MultiscaleModel,
    x: &[f64],
    theta: &Integrand<'_>,
    cfg: &StationaryAverager,
    noise: &mut N,
) -> Result<StationaryEstimate> {
    cfg.validate()?;
    let dims = model.dims();
    if x.len() != dims.slow {
        return Err(Error::DimensionMismatch {
            what: "x",
            expected: dims.slow,
            got: x.len(),
        });
    }
    let total_steps = (cfg.sample_horizon / cfg.dt).round() as usize;
    let first_sample = (cfg.burn_in / cfg.dt).ceil() as usize;
    let n_samples = total_steps + 1 - first_sample;
    let batch_len = (n_samples / BATCHES).max(1);

    let mut ws = Workspace::default();
    let mut buf = Vec::new();
    let mut z0 = vec![0.0; dims.fast];
    theta(x, &z0, &mut buf);
    let dim = buf.len();

    let mut replicate_means: Vec<Vec<f64>> = Vec::with_capacity(cfg.replicates);
    let mut within_var: Vec<Vec<f64>> = Vec::with_capacity(cfg.replicates);
    for _ in 0..cfg.replicates {
        for v in z0.iter_mut() {
            *v = noise.standard_normal();
        }
        let mut z = z0.clone();
        let mut overall = RunningMean::new(dim);
        let mut batch = RunningMean::new(dim);
        let mut batch_means: Vec<Vec<f64>> = Vec::with_capacity(BATCHES + 1);
        for step in 0..=total_steps {
            if step > 0 && !model.advance_frozen(x, &mut z, cfg.dt, noise, &mut ws)? {
                return Err(Error::NumericalBlowUp { step });
            }
            if step < first_sample {
                continue;
            }
            buf.clear();
            theta(x, &z, &mut buf);
            if buf.len() != dim {
                return Err(Error::ModelShape {
                    what: "theta",
                    expected: dim,
                    got: buf.len(),
                });
            }
            overall.push(&buf);
            batch.push(&buf);
            if batch.count == batch_len {
                batch_means.push(std::mem::replace(&mut batch, RunningMean::new(dim)).mean);
            }
        }
        let var_of_mean = (0..dim)
            .map(|c| {
                let col: Vec<f64> = batch_means.iter().map(|b| b[c]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                sample_variance(&col, mean) / col.len() as f64
            })
            .collect();
        replicate_means.push(overall.mean);
        within_var.push(var_of_mean);
    }

    let mut grand = RunningMean::new(dim);
    for r in &replicate_means {
        grand.push(r);
    }
    let reps = cfg.replicates as f64;
    let mut std_error = Vec::with_capacity(dim);
    let mut non_ergodic = false;
    for c in 0..dim {
        let col: Vec<f64> = replicate_means.iter().map(|r| r[c]).collect();
        std_error.push((sample_variance(&col, grand.mean[c]) / reps).sqrt());
        let pooled = (within_var.iter().map(|w| w[c]).sum::<f64>() / reps).sqrt();
        let spread = col
            .iter()
            .map(|v| (v - grand.mean[c]).abs())
            .fold(0.0, f64::max);
        let scale = grand.mean[c].abs().max(1.0);
        if spread > 10.0 * pooled && spread > 1e-12 * scale {
            non_ergodic = true;
        }
    }
    Ok(StationaryEstimate {
        value: grand.mean,
        std_error,
        non_ergodic_warning: non_ergodic,
    })
}

/// Symmetric square root of a symmetric PSD matrix through its
/// eigendecomposition. Eigenvalues in `[-TOL_PSD, 0)` are clipped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::DimensionMismatch {
            what: "square matrix columns",
            expected: m,
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix", "contains non-finite entries"));
    }
    let mut asymmetry: f64 = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            asymmetry = asymmetry.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asymmetry > TOL_PSD {
        return Err(Error::NotSymmetric { asymmetry });
    }
    if m == 1 {
        let v = a[(0, 0)];
        if v < -TOL_PSD {
            return Err(Error::NotPsd { min_eigenvalue: v });
        }
        return Ok(DMatrix::from_element(1, 1, v.max(0.0).sqrt()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -TOL_PSD {
        return Err(Error::NotPsd { min_eigenvalue });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Multilinear,
}

impl Interpolation {
    pub fn as_str(self) -> &'static str {
        match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Multilinear => "multilinear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64
        }
    }

    fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulationGrid {
    pub axes: Vec<GridAxis>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl TabulationGrid {
    pub fn new(axes: Vec<GridAxis>, interpolation: Interpolation) -> Result<Self> {
        let grid = TabulationGrid {
            axes,
            interpolation,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::invalid("grid.axes", "at least one axis is required"));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.count < 2 {
                return Err(Error::invalid(format!("grid.axes[{i}].count"), "must be at least 2"));
            }
            if !(a.lo < a.hi) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::invalid(format!("grid.axes[{i}]"), "requires finite lo < hi"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    /// Row-major: the last axis varies fastest.
    pub fn node_coords(&self, mut index: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            coords[k] = axis.node(index % axis.count);
            index /= axis.count;
        }
        coords
    }

    fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, a)| acc * a.count + i)
    }

    /// Node indices and weights used to evaluate at `x`. Queries outside the
    /// grid are clamped to the boundary.
    fn stencil(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match self.interpolation {
            Interpolation::Nearest => {
                let multi: Vec<usize> = self
                    .axes
                    .iter()
                    .zip(x)
                    .map(|(a, &xi)| {
                        let u = ((xi - a.lo) / a.spacing()).round();
                        u.clamp(0.0, (a.count - 1) as f64) as usize
                    })
                    .collect();
                out.push((self.flat_index(&multi), 1.0));
            }
            Interpolation::Multilinear => {
                let cells: Vec<(usize, f64)> = self
                    .axes
                    .iter()
                    .zip(x)
                    .map(|(a, &xi)| {
                        let u = ((xi - a.lo) / a.spacing()).clamp(0.0, (a.count - 1) as f64);
                        let cell = (u.floor() as usize).min(a.count - 2);
                        (cell, u - cell as f64)
                    })
                    .collect();
                let dim = cells.len();
                let mut multi = vec![0usize; dim];
                for corner in 0..(1usize << dim) {
                    let mut w = 1.0;
                    for (k, &(cell, t)) in cells.iter().enumerate() {
                        if corner >> k & 1 == 1 {
                            multi[k] = cell + 1;
                            w *= t;
                        } else {
                            multi[k] = cell;
                            w *= 1.0 - t;
                        }
                    }
                    if w != 0.0 {
                        out.push((self.flat_index(&multi), w));
                    }
                }
            }
        }
    }
}

/// Estimated coefficient values at one grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeValues {
    pub drift: Vec<f64>,
    /// Row-major `m×m`.
    pub diffsq: Vec<f64>,
    pub diff: Vec<f64>,
    pub obs: Vec<f64>,
    pub drift_se: Vec<f64>,
    pub diffsq_se: Vec<f64>,
    pub obs_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub grid: TabulationGrid,
    pub averager: StationaryAverager,
    pub root_seed: u64,
    pub nodes: Vec<NodeValues>,
}

/// `(x, out)` for averaged coefficients.
pub type AvgFn = Arc<dyn Fn(&[f64], &mut Vec<f64>) + Send + Sync>;

#[derive(Clone)]
pub struct AnalyticAverages {
    pub drift: AvgFn,
    /// Row-major `m×m`.
    pub diffsq: AvgFn,
    pub obs: AvgFn,
}

#[derive(Clone)]
enum Source {
    Analytic(AnalyticAverages),
    Tabulated(Table),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Analytic,
    Tabulated(TabulationGrid),
}

/// The reduced model `dX = b̄(X) dt + σ̄(X) dV`, observed through `h̄`.
#[derive(Clone)]
pub struct HomogenizedModel {
    dim_slow: usize,
    dim_obs: usize,
    source: Source,
}

impl fmt::Debug for HomogenizedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HomogenizedModel")
            .field("dim_slow", &self.dim_slow)
            .field("dim_obs", &self.dim_obs)
            .field("provenance", &self.provenance())
            .finish()
    }
}

impl HomogenizedModel {
    /// Closed-form averages, checked for shape at the origin.
    pub fn analytic(dim_slow: usize, dim_obs: usize, averages: AnalyticAverages) -> Result<Self> {
        let model = HomogenizedModel {
            dim_slow,
            dim_obs,
            source: Source::Analytic(averages),
        };
        let origin = vec![0.0; dim_slow];
        model.drift_avg(&origin)?;
        model.diff_avg(&origin)?;
        model.obs_avg(&origin)?;
        Ok(model)
    }

    pub fn from_table(dim_slow: usize, dim_obs: usize, table: Table) -> Result<Self> {
        table.grid.validate()?;
        if table.grid.dim() != dim_slow {
            return Err(Error::DimensionMismatch {
                what: "grid dimension",
                expected: dim_slow,
                got: table.grid.dim(),
            });
        }
        if table.nodes.len() != table.grid.node_count() {
            return Err(Error::DimensionMismatch {
                what: "table nodes",
                expected: table.grid.node_count(),
                got: table.nodes.len(),
            });
        }
        for node in &table.nodes {
            let checks = [
                ("drift", node.drift.len(), dim_slow),
                ("diffsq", node.diffsq.len(), dim_slow * dim_slow),
                ("diff", node.diff.len(), dim_slow * dim_slow),
                ("obs", node.obs.len(), dim_obs),
                ("drift_se", node.drift_se.len(), dim_slow),
                ("diffsq_se", node.diffsq_se.len(), dim_slow * dim_slow),
                ("obs_se", node.obs_se.len(), dim_obs),
            ];
            for (what, got, expected) in checks {
                if got != expected {
                    return Err(Error::DimensionMismatch { what, expected, got });
                }
            }
        }
        Ok(HomogenizedModel {
            dim_slow,
            dim_obs,
            source: Source::Tabulated(table),
        })
    }

    pub fn dim_slow(&self) -> usize {
        self.dim_slow
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn provenance(&self) -> Provenance {
        match &self.source {
            Source::Analytic(_) => Provenance::Analytic,
            Source::Tabulated(t) => Provenance::Tabulated(t.grid.clone()),
        }
    }

    pub fn table(&self) -> Option<&Table> {
        match &self.source {
            Source::Tabulated(t) => Some(t),
            Source::Analytic(_) => None,
        }
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_slow {
            return Err(Error::DimensionMismatch {
                what: "x",
                expected: self.dim_slow,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn interpolate(
        table: &Table,
        x: &[f64],
        pick: impl Fn(&NodeValues) -> &[f64],
        out: &mut Vec<f64>,
    ) {
        let mut stencil = Vec::with_capacity(1 << x.len());
        table.grid.stencil(x, &mut stencil);
        out.clear();
        out.resize(pick(&table.nodes[0]).len(), 0.0);
        for (idx, w) in stencil {
            for (o, v) in out.iter_mut().zip(pick(&table.nodes[idx])) {
                *o += w * v;
            }
        }
    }

    fn analytic_into(f: &AvgFn, x: &[f64], expected: usize, what: &'static str, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        f(x, out);
        if out.len() != expected {
            return Err(Error::ModelShape {
                what,
                expected,
                got: out.len(),
            });
        }
        Ok(())
    }

    pub fn drift_avg_into(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.check_x(x)?;
        match &self.source {
            Source::Analytic(a) => Self::analytic_into(&a.drift, x, self.dim_slow, "drift_avg", out),
            Source::Tabulated(t) => {
                Self::interpolate(t, x, |n| &n.drift, out);
                Ok(())
            }
        }
    }

    pub fn diffsq_avg_into(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.check_x(x)?;
        let m = self.dim_slow;
        match &self.source {
            Source::Analytic(a) => Self::analytic_into(&a.diffsq, x, m * m, "diffsq_avg", out),
            Source::Tabulated(t) => {
                Self::interpolate(t, x, |n| &n.diffsq, out);
                Ok(())
            }
        }
    }

    /// `σ̄(x)`, row-major. Analytic models take the PSD root of `ā(x)` on
    /// each query; tabulated models interpolate the nodewise roots.
    pub fn diff_avg_into(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.check_x(x)?;
        let m = self.dim_slow;
        match &self.source {
            Source::Analytic(a) => {
                Self::analytic_into(&a.diffsq, x, m * m, "diffsq_avg", out)?;
                if m == 1 {
                    let v = out[0];
                    if v < -TOL_PSD {
                        return Err(Error::NotPsd { min_eigenvalue: v });
                    }
                    out[0] = v.max(0.0).sqrt();
                    return Ok(());
                }
                let s = matrix_sqrt_psd(&DMatrix::from_row_slice(m, m, out))?;
                out.clear();
                out.extend(s.transpose().iter());
                Ok(())
            }
            Source::Tabulated(t) => {
                Self::interpolate(t, x, |n| &n.diff, out);
                Ok(())
            }
        }
    }

    pub fn obs_avg_into(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.check_x(x)?;
        match &self.source {
            Source::Analytic(a) => Self::analytic_into(&a.obs, x, self.dim_obs, "obs_avg", out),
            Source::Tabulated(t) => {
                Self::interpolate(t, x, |n| &n.obs, out);
                Ok(())
            }
        }
    }

    pub fn drift_avg(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.drift_avg_into(x, &mut out)?;
        Ok(out)
    }

    pub fn diffsq_avg(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = Vec::new();
        self.diffsq_avg_into(x, &mut out)?;
        Ok(DMatrix::from_row_slice(self.dim_slow, self.dim_slow, &out))
    }

    pub fn diff_avg(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = Vec::new();
        self.diff_avg_into(x, &mut out)?;
        Ok(DMatrix::from_row_slice(self.dim_slow, self.dim_slow, &out))
    }

    pub fn obs_avg(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.obs_avg_into(x, &mut out)?;
        Ok(out)
    }
}

/// Estimates `b̄`, `ā`, `h̄` at every grid node (in parallel, node `i` using
/// the stream derived from `(root_seed, i)`) and takes nodewise PSD roots.
pub fn build_homogenized(
    model: &MultiscaleModel,
    grid: &TabulationGrid,
    cfg: &StationaryAverager,
    root_seed: u64,
) -> Result<HomogenizedModel> {
    grid.validate()?;
    cfg.validate()?;
    let dims = model.dims();
    if grid.dim() != dims.slow {
        return Err(Error::DimensionMismatch {
            what: "grid dimension",
            expected: dims.slow,
            got: grid.dim(),
        });
    }
    let (m, k, d) = (dims.slow, dims.noise_slow, dims.obs);

    let nodes = (0..grid.node_count())
        .into_par_iter()
        .map(|index| {
            let coords = grid.node_coords(index);
            estimate_node(model, &coords, cfg, root_seed, index as u64, m, k, d).map_err(|e| {
                Error::NodeFailure {
                    coords,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    HomogenizedModel::from_table(
        m,
        d,
        Table {
            grid: grid.clone(),
            averager: *cfg,
            root_seed,
            nodes,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn estimate_node(
    model: &MultiscaleModel,
    x: &[f64],
    cfg: &StationaryAverager,
    root_seed: u64,
    index: u64,
    m: usize,
    k: usize,
    d: usize,
) -> Result<NodeValues> {
    // θ = (b, σσᵀ, h) stacked into one vector so a single path serves all.
    let theta = |x: &[f64], z: &[f64], out: &mut Vec<f64>| {
        let mut tmp = Vec::with_capacity(m * k);
        if model.eval(Coef::DriftSlow, x, z, &mut tmp).is_err() {
            out.push(f64::NAN);
            return;
        }
        out.extend_from_slice(&tmp);
        if model.eval(Coef::DiffSlow, x, z, &mut tmp).is_err() {
            out.push(f64::NAN);
            return;
        }
        for i in 0..m {
            for j in 0..m {
                let v: f64 = (0..k).map(|c| tmp[i * k + c] * tmp[j * k + c]).sum();
                out.push(v);
            }
        }
        if model.eval(Coef::Obs, x, z, &mut tmp).is_err() {
            out.push(f64::NAN);
            return;
        }
        out.extend_from_slice(&tmp);
    };
    // surface shape errors with their proper names before averaging
    let probe = vec![0.0; model.dims().fast];
    let mut tmp = Vec::new();
    model.eval(Coef::DriftSlow, x, &probe, &mut tmp)?;
    model.eval(Coef::DiffSlow, x, &probe, &mut tmp)?;
    model.eval(Coef::Obs, x, &probe, &mut tmp)?;

    let mut rng = derived_stream(root_seed, &[index]);
    let est = estimate_stationary_average(model, x, &theta, cfg, &mut rng)?;
    if est.value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowUp { step: 0 });
    }
    let split = |v: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            v[..m].to_vec(),
            v[m..m + m * m].to_vec(),
            v[m + m * m..m + m * m + d].to_vec(),
        )
    };
    let (drift, diffsq, obs) = split(&est.value);
    let (drift_se, diffsq_se, obs_se) = split(&est.std_error);
    let root = matrix_sqrt_psd(&DMatrix::from_row_slice(m, m, &diffsq))?;
    let diff = root.transpose().iter().copied().collect();
    Ok(NodeValues {
        drift,
        diffsq,
        diff,
        obs,
        drift_se,
        diffsq_se,
        obs_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefFn, Coefficients, Dims};
    use crate::rng::stream;

    fn ou_model(
        b: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        s: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> MultiscaleModel {
        let b: CoefFn = Arc::new(move |x: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(b(x[0], z[0])));
        let s: CoefFn = Arc::new(move |x: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(s(x[0], z[0])));
        MultiscaleModel::new(
            Dims::scalar(),
            Coefficients {
                drift_slow: b,
                diff_slow: s,
                drift_fast: Arc::new(|x: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(-(z[0] - x[0]))),
                diff_fast: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(2f64.sqrt())),
                obs_fn: Arc::new(|x: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(x[0])),
            },
            0.1,
        )
        .unwrap()
    }

    fn quick() -> StationaryAverager {
        StationaryAverager {
            burn_in: 5.0,
            sample_horizon: 405.0,
            dt: 1e-2,
            replicates: 8,
        }
    }

    #[test]
    fn constant_integrand_is_exact() {
        let m = ou_model(|_, _| 0.0, |_, _| 1.0);
        let one = |_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(1.0);
        let est = estimate_stationary_average(&m, &[0.3], &one, &quick(), &mut stream(1)).unwrap();
        assert_eq!(est.value, vec![1.0]);
        assert_eq!(est.std_error, vec![0.0]);
        assert!(!est.non_ergodic_warning);

        let tenth = |_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.1);
        let est = estimate_stationary_average(&m, &[0.3], &tenth, &quick(), &mut stream(1)).unwrap();
        assert_eq!(est.value, vec![0.1]);
        assert_eq!(est.std_error, vec![0.0]);
    }

    #[test]
    fn ou_first_and_second_moments() {
        let m = ou_model(|_, _| 0.0, |_, _| 1.0);
        let theta = |_: &[f64], z: &[f64], out: &mut Vec<f64>| out.extend([z[0], z[0] * z[0]]);
        let est = estimate_stationary_average(&m, &[0.7], &theta, &quick(), &mut stream(2)).unwrap();
        assert!((est.value[0] - 0.7).abs() < 3.0 * est.std_error[0], "{est:?}");
        let est = estimate_stationary_average(&m, &[0.5], &theta, &quick(), &mut stream(3)).unwrap();
        assert!((est.value[1] - 1.25).abs() < 3.0 * est.std_error[1], "{est:?}");
    }

    #[test]
    fn non_ergodic_replicates_are_flagged() {
        // no fast dynamics: every replicate keeps its own initial z
        let frozen = MultiscaleModel::new(
            Dims::scalar(),
            Coefficients {
                drift_slow: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.0)),
                diff_slow: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.0)),
                drift_fast: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.0)),
                diff_fast: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.0)),
                obs_fn: Arc::new(|_: &[f64], _: &[f64], out: &mut Vec<f64>| out.push(0.0)),
            },
            1.0,
        )
        .unwrap();
        let theta = |_: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(z[0]);
        let est = estimate_stationary_average(&frozen, &[0.0], &theta, &quick(), &mut stream(4)).unwrap();
        assert!(est.non_ergodic_warning);
    }

    #[test]
    fn sqrt_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((matrix_sqrt_psd(&i2).unwrap() - &i2).norm() < 1e-14);

        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])).norm() < 1e-14);

        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = matrix_sqrt_psd(&a).unwrap();
        // eigenvalues 3 and 1 with eigenvectors (1,1)/√2 and (1,-1)/√2
        let diag = (3f64.sqrt() + 1.0) / 2.0;
        let off = (3f64.sqrt() - 1.0) / 2.0;
        let oracle = DMatrix::from_row_slice(2, 2, &[diag, off, off, diag]);
        assert!((&s - oracle).norm() < 1e-12);
        assert!((&s * &s - &a).norm() < 1e-10);
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::NotSymmetric { .. })));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]);
        assert!(matches!(matrix_sqrt_psd(&neg), Err(Error::NotPsd { .. })));
        let clip = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-11]);
        let s = matrix_sqrt_psd(&clip).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
        assert!(matches!(
            matrix_sqrt_psd(&DMatrix::from_element(1, 1, -1.0)),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn grid_order_and_interpolation() {
        let grid = TabulationGrid::new(
            vec![
                GridAxis { lo: 0.0, hi: 1.0, count: 2 },
                GridAxis { lo: -1.0, hi: 1.0, count: 3 },
            ],
            Interpolation::Multilinear,
        )
        .unwrap();
        assert_eq!(grid.node_count(), 6);
        assert_eq!(grid.node_coords(0), vec![0.0, -1.0]);
        assert_eq!(grid.node_coords(1), vec![0.0, 0.0]);
        assert_eq!(grid.node_coords(3), vec![1.0, -1.0]);
        assert_eq!(grid.node_coords(5), vec![1.0, 1.0]);

        let mut st = Vec::new();
        grid.stencil(&[0.25, 0.5], &mut st);
        let total: f64 = st.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-15);

        let bad = TabulationGrid::new(vec![GridAxis { lo: 1.0, hi: 0.0, count: 3 }], Interpolation::Nearest);
        assert!(bad.is_err());
        let bad = TabulationGrid::new(vec![GridAxis { lo: 0.0, hi: 1.0, count: 1 }], Interpolation::Nearest);
        assert!(bad.is_err());
    }

    #[test]
    fn z_independent_diffusion_tabulates_exactly() {
        let m = ou_model(|x, _| -x, |_, _| 1.0);
        let grid = TabulationGrid::new(vec![GridAxis { lo: -1.0, hi: 1.0, count: 3 }], Interpolation::Multilinear)
            .unwrap();
        let h = build_homogenized(&m, &grid, &quick(), 5).unwrap();
        let t = h.table().unwrap();
        for (i, node) in t.nodes.iter().enumerate() {
            let x = grid.node_coords(i)[0];
            assert_eq!(node.diffsq, vec![1.0]);
            assert_eq!(node.diff, vec![1.0]);
            assert_eq!(node.drift, vec![-x]);
            assert_eq!(node.obs, vec![x]);
        }
        // linear drift between nodes is reproduced exactly
        let v = h.drift_avg(&[0.25]).unwrap()[0];
        assert!((v + 0.25).abs() < 1e-15);
    }

    #[test]
    fn ou_drift_and_diffusion_averages() {
        let m = ou_model(|x, z| -x + 0.5 * z, |_, z| (1.0 + z * z).sqrt());
        let grid = TabulationGrid::new(vec![GridAxis { lo: -1.0, hi: 1.0, count: 3 }], Interpolation::Multilinear)
            .unwrap();
        let h = build_homogenized(&m, &grid, &quick(), 6).unwrap();
        let t = h.table().unwrap();
        for (i, node) in t.nodes.iter().enumerate() {
            let x = grid.node_coords(i)[0];
            assert!((node.drift[0] + 0.5 * x).abs() < 3.0 * node.drift_se[0], "{x} {node:?}");
            // σ̄σ̄ᵀ = ā at the node
            assert!((node.diff[0] * node.diff[0] - node.diffsq[0]).abs() < 1e-8);
        }
        let last = &t.nodes[2];
        assert!((last.diffsq[0] - 3.0).abs() < 3.0 * last.diffsq_se[0], "{last:?}");
    }
}
