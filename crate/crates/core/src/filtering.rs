//! Bootstrap particle filters for the full `(x, z)` system and the
//! homogenized `x`-only system, plus a scalar Kalman recursion used as a
//! linear-Gaussian reference.
//!
//! Both particle filters consume the same [`ObservationPath`]. One
//! observation step `[t_i, t_{i+1}]` does:
//!
//! 1. multiply each weight by `exp(h_i·ΔY_i − ½|h_i|² Δt_i)` where `h_i` is
//!    the observation function at the particle's state at `t_i` (the same
//!    left point the observation generator uses), in log space with the
//!    maximum subtracted before exponentiating;
//! 2. resample systematically when `ESS < threshold·N`;
//! 3. propagate every particle to `t_{i+1}` with the model's transition
//!    kernel.

use serde::{Deserialize, Serialize};

use crate::averaging::HomogenizedModel;
use crate::error::{Error, Result};
use crate::model::{default_substeps, MultiscaleModel, ObservationPath, Workspace};
use crate::rng::NoiseSource;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    /// Flat, particle-major.
    states: Vec<f64>,
    weights: Vec<f64>,
    pub time: f64,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, states: Vec<f64>, weights: Vec<f64>, time: f64) -> Result<Self> {
        if dim == 0 || weights.is_empty() || states.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch {
                what: "ensemble states",
                expected: dim * weights.len(),
                got: states.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights", "must be finite and nonnegative"));
        }
        Ok(ParticleEnsemble {
            dim,
            states,
            weights,
            time,
        })
    }

    /// Equally weighted ensemble.
    pub fn uniform(dim: usize, states: Vec<f64>, time: f64) -> Result<Self> {
        let n = states.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, states, vec![1.0 / n.max(1) as f64; n], time)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn flat_states(&self) -> &[f64] {
        &self.states
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean of the first `k` coordinates.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k];
        for (s, w) in self.states().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(s) {
                *o += w * v;
            }
        }
        out
    }

    /// Multiplies the weights by the one-step Girsanov factor and
    /// renormalizes. `obs_values` holds `h(state_i)` particle-major.
    pub fn reweight(&mut self, obs_increment: &[f64], obs_values: &[f64], dt: f64) -> Result<()> {
        let d = obs_increment.len();
        if obs_values.len() != d * self.len() {
            return Err(Error::DimensionMismatch {
                what: "observation values",
                expected: d * self.len(),
                got: obs_values.len(),
            });
        }
        let mut log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(obs_values.chunks_exact(d.max(1)))
            .map(|(w, h)| {
                let dot: f64 = h.iter().zip(obs_increment).map(|(a, b)| a * b).sum();
                let sq: f64 = h.iter().map(|a| a * a).sum();
                w.ln() + dot - 0.5 * sq * dt
            })
            .collect();
        if d == 0 {
            log_w = self.weights.iter().map(|w| w.ln()).collect();
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightCollapse { max_log_weight: max });
        }
        for (w, lw) in self.weights.iter_mut().zip(&log_w) {
            *w = if lw.is_nan() { 0.0 } else { (lw - max).exp() };
        }
        self.normalize()
    }

    fn normalize(&mut self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::WeightCollapse {
                max_log_weight: f64::NEG_INFINITY,
            });
        }
        for w in &mut self.weights {
            *w /= sum;
        }
        Ok(())
    }
}

/// One-step discrete Kallianpur–Striebel weight update.
pub fn weight_update(
    mut ensemble: ParticleEnsemble,
    obs_increment: &[f64],
    obs_values: &[f64],
    dt: f64,
) -> Result<ParticleEnsemble> {
    ensemble.reweight(obs_increment, obs_values, dt)?;
    Ok(ensemble)
}

/// Effective sample size `1 / Σ wᵢ²` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// `count` offspring indices for systematic resampling with the single
/// uniform `u`: particle `i` is selected once for every point
/// `(j + u)/count` falling in its cumulative-weight interval.
pub fn systematic_indices(weights: &[f64], count: usize, u: f64) -> Vec<usize> {
    // rounding may leave the cumulative sum just below 1; never step past
    // the last particle that carries weight
    let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(count);
    let mut cumulative = weights[0];
    let mut i = 0;
    for j in 0..count {
        let point = (j as f64 + u) / count as f64;
        while point >= cumulative && i < last {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

pub fn systematic_resample<N: NoiseSource + ?Sized>(ensemble: &ParticleEnsemble, noise: &mut N) -> ParticleEnsemble {
    let idx = systematic_indices(&ensemble.weights, ensemble.len(), noise.uniform());
    resample_with(ensemble, &idx)
}

fn resample_with(ensemble: &ParticleEnsemble, idx: &[usize]) -> ParticleEnsemble {
    let n = idx.len();
    let mut states = Vec::with_capacity(ensemble.states.len());
    for &i in idx {
        states.extend_from_slice(ensemble.state(i));
    }
    ParticleEnsemble {
        dim: ensemble.dim,
        states,
        weights: vec![1.0 / n as f64; n],
        time: ensemble.time,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold · N`.
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    pub dt: f64,
    /// Fast substeps per observation step for the full filter; `None` means
    /// `ceil(1/ε)`.
    #[serde(default)]
    pub substeps_fast: Option<usize>,
}

fn default_threshold() -> f64 {
    0.5
}

impl FilterConfig {
    pub fn new(n_particles: usize, dt: f64) -> Self {
        FilterConfig {
            n_particles,
            resample_threshold: default_threshold(),
            dt,
            substeps_fast: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::invalid("filter.n_particles", "must be at least 1"));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::invalid("filter.resample_threshold", "must lie in (0, 1]"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("filter.dt", "must be positive"));
        }
        if self.substeps_fast == Some(0) {
            return Err(Error::invalid("filter.substeps_fast", "must be at least 1"));
        }
        Ok(())
    }

    fn check_grid(&self, obs: &ObservationPath) -> Result<()> {
        for i in 0..obs.steps() {
            let step = obs.step_size(i);
            if (step - self.dt).abs() > 1e-9 * self.dt.max(step) {
                return Err(Error::GridMismatch {
                    obs_dt: step,
                    filter_dt: self.dt,
                });
            }
        }
        Ok(())
    }
}

/// Per-step record streamed by the filters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub time: f64,
    /// Posterior mean of the slow coordinates.
    pub mean: Vec<f64>,
    /// ESS after the weight update, before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

/// A Markov kernel and observation function driving a bootstrap filter.
trait Dynamics {
    fn state_dim(&self) -> usize;
    fn slow_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn observe(&self, state: &[f64], out: &mut Vec<f64>, ws: &mut Workspace) -> Result<()>;
    fn propagate<N: NoiseSource + ?Sized>(&self, state: &mut [f64], dt: f64, noise: &mut N, ws: &mut Workspace) -> Result<bool>;
}

struct FullDynamics<'a> {
    model: &'a MultiscaleModel,
    substeps: usize,
}

impl Dynamics for FullDynamics<'_> {
    fn state_dim(&self) -> usize {
        let d = self.model.dims();
        d.slow + d.fast
    }

    fn slow_dim(&self) -> usize {
        self.model.dims().slow
    }

    fn obs_dim(&self) -> usize {
        self.model.dims().obs
    }

    fn observe(&self, state: &[f64], out: &mut Vec<f64>, _ws: &mut Workspace) -> Result<()> {
        let (x, z) = state.split_at(self.slow_dim());
        self.model.obs_into(x, z, out)
    }

    fn propagate<N: NoiseSource + ?Sized>(&self, state: &mut [f64], dt: f64, noise: &mut N, ws: &mut Workspace) -> Result<bool> {
        let m = self.slow_dim();
        let (x, z) = state.split_at_mut(m);
        self.model.advance(x, z, dt, self.substeps, noise, ws)
    }
}

struct HomogenizedDynamics<'a> {
    model: &'a HomogenizedModel,
}

impl Dynamics for HomogenizedDynamics<'_> {
    fn state_dim(&self) -> usize {
        self.model.dim_slow()
    }

    fn slow_dim(&self) -> usize {
        self.model.dim_slow()
    }

    fn obs_dim(&self) -> usize {
        self.model.dim_obs()
    }

    fn observe(&self, state: &[f64], out: &mut Vec<f64>, _ws: &mut Workspace) -> Result<()> {
        self.model.obs_avg_into(state, out)
    }

    fn propagate<N: NoiseSource + ?Sized>(&self, state: &mut [f64], dt: f64, noise: &mut N, ws: &mut Workspace) -> Result<bool> {
        let m = state.len();
        let (drift, diff, xi) = ws.scratch();
        self.model.drift_avg_into(state, drift)?;
        self.model.diff_avg_into(state, diff)?;
        let sqrt_dt = dt.sqrt();
        xi.clear();
        xi.extend((0..m).map(|_| noise.standard_normal() * sqrt_dt));
        for i in 0..m {
            let diffusion: f64 = diff[i * m..(i + 1) * m].iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
            state[i] += drift[i] * dt + diffusion;
        }
        Ok(state.iter().all(|v| v.is_finite()))
    }
}

fn run_bootstrap<D: Dynamics, N: NoiseSource>(
    dynamics: &D,
    obs: &ObservationPath,
    mut init: impl FnMut(&mut N) -> Vec<f64>,
    cfg: &FilterConfig,
    noise: &mut N,
    mut on_step: impl FnMut(&ParticleEnsemble, &StepSummary),
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    cfg.check_grid(obs)?;
    if obs.steps() > 0 && obs.dim() != dynamics.obs_dim() {
        return Err(Error::DimensionMismatch {
            what: "observation dimension",
            expected: dynamics.obs_dim(),
            got: obs.dim(),
        });
    }
    let dim = dynamics.state_dim();
    let n = cfg.n_particles;
    let mut states = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let s = init(noise);
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "initial particle",
                expected: dim,
                got: s.len(),
            });
        }
        states.extend(s);
    }
    let mut ens = ParticleEnsemble::uniform(dim, states, obs.times[0])?;
    on_step(
        &ens,
        &StepSummary {
            step: 0,
            time: ens.time,
            mean: ens.mean(dynamics.slow_dim()),
            ess: ess(&ens.weights),
            resampled: false,
        },
    );
    let mut ws = Workspace::default();
    let mut h = Vec::new();
    let mut obs_values = Vec::with_capacity(n * dynamics.obs_dim());

    for i in 0..obs.steps() {
        let dt = obs.step_size(i);
        obs_values.clear();
        for p in 0..n {
            dynamics.observe(ens.state(p), &mut h, &mut ws)?;
            obs_values.extend_from_slice(&h);
        }
        ens.reweight(&obs.increments[i], &obs_values, dt)?;
        let step_ess = ess(&ens.weights);
        let resampled = step_ess < cfg.resample_threshold * n as f64;
        if resampled {
            ens = systematic_resample(&ens, noise);
        }
        for p in 0..n {
            let state = &mut ens.states[p * dim..(p + 1) * dim];
            if !dynamics.propagate(state, dt, noise, &mut ws)? {
                return Err(Error::NumericalBlowUp { step: i });
            }
        }
        ens.time = obs.times[i + 1];
        let summary = StepSummary {
            step: i + 1,
            time: ens.time,
            mean: ens.mean(dynamics.slow_dim()),
            ess: step_ess,
            resampled,
        };
        on_step(&ens, &summary);
    }
    Ok(ens)
}

fn full_dynamics<'a>(model: &'a MultiscaleModel, cfg: &FilterConfig) -> FullDynamics<'a> {
    FullDynamics {
        model,
        substeps: cfg.substeps_fast.unwrap_or_else(|| default_substeps(model.epsilon())),
    }
}

fn join_full<N>(mut init: impl FnMut(&mut N) -> (Vec<f64>, Vec<f64>)) -> impl FnMut(&mut N) -> Vec<f64> {
    move |noise| {
        let (mut x, z) = init(noise);
        x.extend(z);
        x
    }
}

/// Full filter over `(x, z)`. Returns the initial ensemble followed by the
/// ensemble after each observation step.
pub fn run_full_filter<N: NoiseSource>(
    model: &MultiscaleModel,
    obs: &ObservationPath,
    init_sampler: impl FnMut(&mut N) -> (Vec<f64>, Vec<f64>),
    cfg: &FilterConfig,
    noise: &mut N,
) -> Result<Vec<ParticleEnsemble>> {
    let mut history = Vec::with_capacity(obs.times.len());
    run_full_filter_streaming(model, obs, init_sampler, cfg, noise, |ens, _| history.push(ens.clone()))?;
    Ok(history)
}

/// Same as [`run_full_filter`] but keeps only the final ensemble and reports
/// the initial state (step 0) and every later step to `on_step`.
pub fn run_full_filter_streaming<N: NoiseSource>(
    model: &MultiscaleModel,
    obs: &ObservationPath,
    init_sampler: impl FnMut(&mut N) -> (Vec<f64>, Vec<f64>),
    cfg: &FilterConfig,
    noise: &mut N,
    on_step: impl FnMut(&ParticleEnsemble, &StepSummary),
) -> Result<ParticleEnsemble> {
    run_bootstrap(&full_dynamics(model, cfg), obs, join_full(init_sampler), cfg, noise, on_step)
}

/// Homogenized filter over `x`, driven by the observations of the full
/// system. Returns the initial ensemble followed by one ensemble per step.
pub fn run_homogenized_filter<N: NoiseSource>(
    hmodel: &HomogenizedModel,
    obs: &ObservationPath,
    init_sampler: impl FnMut(&mut N) -> Vec<f64>,
    cfg: &FilterConfig,
    noise: &mut N,
) -> Result<Vec<ParticleEnsemble>> {
    let mut history = Vec::with_capacity(obs.times.len());
    run_homogenized_filter_streaming(hmodel, obs, init_sampler, cfg, noise, |ens, _| history.push(ens.clone()))?;
    Ok(history)
}

pub fn run_homogenized_filter_streaming<N: NoiseSource>(
    hmodel: &HomogenizedModel,
    obs: &ObservationPath,
    init_sampler: impl FnMut(&mut N) -> Vec<f64>,
    cfg: &FilterConfig,
    noise: &mut N,
    on_step: impl FnMut(&ParticleEnsemble, &StepSummary),
) -> Result<ParticleEnsemble> {
    run_bootstrap(&HomogenizedDynamics { model: hmodel }, obs, init_sampler, cfg, noise, on_step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: f64,
    pub covariance: f64,
    pub time: f64,
}

/// Kalman recursion for the Euler-discretized scalar model
/// `ΔX = a X Δt + √(q Δt) ξ`, `ΔY = h X Δt + √(r Δt) η`, where `ΔY_i`
/// observes the state at the start of its step. Returns the prior followed
/// by the predictive state at each later grid time.
pub fn kalman_reference(
    a_lin: f64,
    q: f64,
    h_lin: f64,
    r: f64,
    obs: &ObservationPath,
    prior: KalmanState,
) -> Result<Vec<KalmanState>> {
    if !(q >= 0.0) {
        return Err(Error::invalid("q", "must be nonnegative"));
    }
    if !(r > 0.0) {
        return Err(Error::invalid("r", "must be positive"));
    }
    if !(prior.covariance >= 0.0) {
        return Err(Error::invalid("prior.covariance", "must be nonnegative"));
    }
    if obs.steps() > 0 && obs.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "observation dimension",
            expected: 1,
            got: obs.dim(),
        });
    }
    let mut out = Vec::with_capacity(obs.times.len());
    let mut mean = prior.mean;
    let mut cov = prior.covariance;
    out.push(KalmanState {
        mean,
        covariance: cov,
        time: obs.times[0],
    });
    for i in 0..obs.steps() {
        let dt = obs.step_size(i);
        let dy = obs.increments[i][0];
        // update with ΔY observing h·X·Δt
        let c = h_lin * dt;
        let s = c * c * cov + r * dt;
        let gain = cov * c / s;
        mean += gain * (dy - c * mean);
        cov *= 1.0 - gain * c;
        // predict
        let phi = 1.0 + a_lin * dt;
        mean *= phi;
        cov = phi * phi * cov + q * dt;
        out.push(KalmanState {
            mean,
            covariance: cov,
            time: obs.times[i + 1],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ens(states: Vec<f64>, weights: Vec<f64>) -> ParticleEnsemble {
        ParticleEnsemble::new(1, states, weights, 0.0).unwrap()
    }

    #[test]
    fn uninformative_observation_keeps_weights() {
        let e = ens(vec![0.0, 1.0, 2.0], vec![0.2, 0.3, 0.5]);
        let out = weight_update(e.clone(), &[0.7], &[0.0, 0.0, 0.0], 0.01).unwrap();
        for (a, b) in out.weights().iter().zip(e.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_particle_update() {
        let e = ens(vec![0.0, 1.0], vec![0.5, 0.5]);
        let out = weight_update(e, &[0.1], &[1.0, 0.0], 0.01).unwrap();
        // multipliers e^{0.1 - 0.005} and 1
        let expected = 0.095f64.exp() / (0.095f64.exp() + 1.0);
        assert!((out.weights()[0] - expected).abs() < 1e-14);
        assert!((out.weights()[0] - 0.5237).abs() < 1e-4);
    }

    #[test]
    fn single_particle_weight_stays_one() {
        let e = ens(vec![3.0], vec![1.0]);
        let out = weight_update(e, &[100.0], &[-40.0], 0.5).unwrap();
        assert_eq!(out.weights(), &[1.0]);
    }

    #[test]
    fn collapse_is_reported() {
        let e = ens(vec![0.0, 1.0], vec![0.5, 0.5]);
        let err = weight_update(e, &[f64::NAN], &[1.0, 1.0], 0.01).unwrap_err();
        assert!(matches!(err, Error::WeightCollapse { .. }));
    }

    #[test]
    fn extreme_log_weights_do_not_underflow() {
        let e = ens(vec![0.0, 1.0], vec![0.5, 0.5]);
        let out = weight_update(e, &[-2000.0], &[1.0, 1.1], 0.01).unwrap();
        assert_eq!(out.weights()[0], 1.0);
        let sum: f64 = out.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess(&[1.0, 0.0, 0.0]), 1.0);
        assert!((ess(&[0.5, 0.5, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_examples() {
        assert_eq!(systematic_indices(&[0.0, 1.0, 0.0], 3, 0.3), vec![1, 1, 1]);
        assert_eq!(systematic_indices(&[0.25; 4], 4, 0.999), vec![0, 1, 2, 3]);
        assert_eq!(systematic_indices(&[0.25; 4], 4, 0.0), vec![0, 1, 2, 3]);
        // strata [0,¼), [¼,½), [½,¾), [¾,1) against cumulative weights (0.75, 1)
        for u in [0.0, 0.1, 0.5, 0.9, 0.999_999] {
            assert_eq!(systematic_indices(&[0.75, 0.25], 4, u), vec![0, 0, 0, 1]);
        }
    }

    #[test]
    fn resample_yields_uniform_weights() {
        let e = ens(vec![1.0, 2.0, 3.0], vec![0.1, 0.1, 0.8]);
        let r = systematic_resample(&e, &mut stream(3));
        assert!(r.weights().iter().all(|w| (*w - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn kalman_without_observation_is_prediction() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let obs = ObservationPath::new(times, vec![vec![0.37]; 100]).unwrap();
        let prior = KalmanState { mean: 1.0, covariance: 0.5, time: 0.0 };
        let states = kalman_reference(-1.0, 1.0, 0.0, 1.0, &obs, prior).unwrap();
        let mut p = 0.5;
        let mut m = 1.0;
        for s in &states[1..] {
            let phi: f64 = 1.0 - 0.01;
            p = phi * phi * p + 0.01;
            m *= phi;
            assert!((s.covariance - p).abs() < 1e-14);
            assert!((s.mean - m).abs() < 1e-14);
        }
    }

    #[test]
    fn kalman_deterministic_ode() {
        let times: Vec<f64> = (0..=1000).map(|i| i as f64 * 1e-3).collect();
        let obs = ObservationPath::new(times, vec![vec![0.0]; 1000]).unwrap();
        let prior = KalmanState { mean: 2.0, covariance: 0.0, time: 0.0 };
        let states = kalman_reference(-1.0, 0.0, 0.0, 1.0, &obs, prior).unwrap();
        let last = states.last().unwrap();
        assert_eq!(last.covariance, 0.0);
        assert!((last.mean - 2.0 * (-1.0f64).exp()).abs() < 2e-3);
    }

    #[test]
    fn kalman_parameter_errors() {
        let obs = ObservationPath::new(vec![0.0, 0.1], vec![vec![0.0]]).unwrap();
        let prior = KalmanState { mean: 0.0, covariance: 1.0, time: 0.0 };
        assert!(kalman_reference(-1.0, -1.0, 1.0, 1.0, &obs, prior).is_err());
        assert!(kalman_reference(-1.0, 1.0, 1.0, 0.0, &obs, prior).is_err());
    }
}
