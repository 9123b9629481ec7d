//! The two-timescale signal/observation system and its Euler–Maruyama
//! simulation.
//!
//! The signal `(X, Z)` solves
//!
//! ```text
//! dX = b(X, Z) dt + σ(X, Z) dV
//! dZ = f(X, Z) dt / ε + g(X, Z) dW / √ε
//! ```
//!
//! and the observation is `dY = h(X, Z) dt + dB`. Coefficient functions write
//! their value into a cleared buffer; matrices are stored row-major.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::NoiseSource;

/// `(x, z, out)`: clears nothing, the caller hands over an empty buffer.
pub type CoefFn = Arc<dyn Fn(&[f64], &[f64], &mut Vec<f64>) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// m
    pub slow: usize,
    /// n
    pub fast: usize,
    /// d
    pub obs: usize,
    /// k, columns of σ
    pub noise_slow: usize,
    /// l, columns of g
    pub noise_fast: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Dims {
            slow: 1,
            fast: 1,
            obs: 1,
            noise_slow: 1,
            noise_fast: 1,
        }
    }
}

#[derive(Clone)]
pub struct Coefficients {
    pub drift_slow: CoefFn,
    pub diff_slow: CoefFn,
    pub drift_fast: CoefFn,
    pub diff_fast: CoefFn,
    pub obs_fn: CoefFn,
}

#[derive(Clone)]
pub struct MultiscaleModel {
    dims: Dims,
    coefs: Coefficients,
    epsilon: f64,
}

impl fmt::Debug for MultiscaleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiscaleModel")
            .field("dims", &self.dims)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Coef {
    DriftSlow,
    DiffSlow,
    DriftFast,
    DiffFast,
    Obs,
}

impl Coef {
    fn name(self) -> &'static str {
        match self {
            Coef::DriftSlow => "drift_slow",
            Coef::DiffSlow => "diff_slow",
            Coef::DriftFast => "drift_fast",
            Coef::DiffFast => "diff_fast",
            Coef::Obs => "obs_fn",
        }
    }
}

/// Reusable evaluation buffers, one per simulating thread.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    b: Vec<f64>,
    sigma: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    dx: Vec<f64>,
    xi: Vec<f64>,
}

impl Workspace {
    pub(crate) fn scratch(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.b, &mut self.sigma, &mut self.xi)
    }
}

impl MultiscaleModel {
    /// Registers a model, probing every coefficient at `(0, 0)` and `(1, 1)`
    /// for shape and finiteness.
    pub fn new(dims: Dims, coefs: Coefficients, epsilon: f64) -> Result<Self> {
        for (key, v) in [
            ("dim_slow", dims.slow),
            ("dim_fast", dims.fast),
            ("dim_obs", dims.obs),
            ("dim_noise_slow", dims.noise_slow),
            ("dim_noise_fast", dims.noise_fast),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "dimension must be positive"));
            }
        }
        check_epsilon(epsilon)?;
        let model = MultiscaleModel {
            dims,
            coefs,
            epsilon,
        };
        let mut out = Vec::new();
        for probe in [0.0, 1.0] {
            let x = vec![probe; dims.slow];
            let z = vec![probe; dims.fast];
            for c in [
                Coef::DriftSlow,
                Coef::DiffSlow,
                Coef::DriftFast,
                Coef::DiffFast,
                Coef::Obs,
            ] {
                model.eval(c, &x, &z, &mut out)?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(
                        c.name(),
                        format!("non-finite value at probe point {probe}"),
                    ));
                }
            }
        }
        Ok(model)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coefs
    }

    /// Same coefficients at another scale.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(MultiscaleModel {
            epsilon,
            ..self.clone()
        })
    }

    fn expected_len(&self, c: Coef) -> usize {
        let d = self.dims;
        match c {
            Coef::DriftSlow => d.slow,
            Coef::DiffSlow => d.slow * d.noise_slow,
            Coef::DriftFast => d.fast,
            Coef::DiffFast => d.fast * d.noise_fast,
            Coef::Obs => d.obs,
        }
    }

    pub(crate) fn eval(&self, c: Coef, x: &[f64], z: &[f64], out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        let func = match c {
            Coef::DriftSlow => &self.coefs.drift_slow,
            Coef::DiffSlow => &self.coefs.diff_slow,
            Coef::DriftFast => &self.coefs.drift_fast,
            Coef::DiffFast => &self.coefs.diff_fast,
            Coef::Obs => &self.coefs.obs_fn,
        };
        func(x, z, out);
        let expected = self.expected_len(c);
        if out.len() != expected {
            return Err(Error::ModelShape {
                what: c.name(),
                expected,
                got: out.len(),
            });
        }
        Ok(())
    }

    pub fn drift_slow(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.eval(Coef::DriftSlow, x, z, &mut out)?;
        Ok(out)
    }

    pub fn diff_slow(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.eval(Coef::DiffSlow, x, z, &mut out)?;
        Ok(out)
    }

    pub fn obs(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.eval(Coef::Obs, x, z, &mut out)?;
        Ok(out)
    }

    pub(crate) fn obs_into(&self, x: &[f64], z: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.eval(Coef::Obs, x, z, out)
    }

    /// One slow step of length `dt` split into `substeps` fast substeps.
    ///
    /// The slow state is frozen at its value at the start of the step while
    /// the fast state runs; the slow increment is the Euler–Maruyama sum of
    /// `b h + σ ΔV` along the fast sub-path. Returns `false` if the new state
    /// is not finite.
    pub(crate) fn advance<N: NoiseSource + ?Sized>(
        &self,
        x: &mut [f64],
        z: &mut [f64],
        dt: f64,
        substeps: usize,
        noise: &mut N,
        ws: &mut Workspace,
    ) -> Result<bool> {
        let Dims {
            slow: m,
            fast: n,
            noise_slow: k,
            noise_fast: l,
            ..
        } = self.dims;
        let h = dt / substeps as f64;
        let sqrt_h = h.sqrt();
        let fast_scale = h / self.epsilon;
        let fast_noise = (h / self.epsilon).sqrt();
        ws.dx.clear();
        ws.dx.resize(m, 0.0);
        for _ in 0..substeps {
            self.eval(Coef::DriftSlow, x, z, &mut ws.b)?;
            self.eval(Coef::DiffSlow, x, z, &mut ws.sigma)?;
            self.eval(Coef::DriftFast, x, z, &mut ws.f)?;
            self.eval(Coef::DiffFast, x, z, &mut ws.g)?;

            ws.xi.clear();
            ws.xi.extend((0..k).map(|_| noise.standard_normal() * sqrt_h));
            for i in 0..m {
                let row = &ws.sigma[i * k..(i + 1) * k];
                let diffusion: f64 = row.iter().zip(&ws.xi).map(|(s, w)| s * w).sum();
                ws.dx[i] += ws.b[i] * h + diffusion;
            }

            ws.xi.clear();
            ws.xi.extend((0..l).map(|_| noise.standard_normal() * fast_noise));
            for i in 0..n {
                let row = &ws.g[i * l..(i + 1) * l];
                let diffusion: f64 = row.iter().zip(&ws.xi).map(|(s, w)| s * w).sum();
                z[i] += ws.f[i] * fast_scale + diffusion;
            }
        }
        for (xi, dxi) in x.iter_mut().zip(&ws.dx) {
            *xi += dxi;
        }
        Ok(x.iter().chain(z.iter()).all(|v| v.is_finite()))
    }

    /// Euler–Maruyama step of the frozen-`x` fast process at natural speed.
    pub(crate) fn advance_frozen<N: NoiseSource + ?Sized>(
        &self,
        x: &[f64],
        z: &mut [f64],
        dt: f64,
        noise: &mut N,
        ws: &mut Workspace,
    ) -> Result<bool> {
        let n = self.dims.fast;
        let l = self.dims.noise_fast;
        let sqrt_dt = dt.sqrt();
        self.eval(Coef::DriftFast, x, z, &mut ws.f)?;
        self.eval(Coef::DiffFast, x, z, &mut ws.g)?;
        ws.xi.clear();
        ws.xi.extend((0..l).map(|_| noise.standard_normal() * sqrt_dt));
        for i in 0..n {
            let row = &ws.g[i * l..(i + 1) * l];
            let diffusion: f64 = row.iter().zip(&ws.xi).map(|(s, w)| s * w).sum();
            z[i] += ws.f[i] * dt + diffusion;
        }
        Ok(z.iter().all(|v| v.is_finite()))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid("epsilon", format!("{epsilon} is outside (0, 1]")));
    }
    Ok(())
}

/// `ceil(1/ε)`, so the fast equation sees an effective step of `ε·dt_slow`
/// in its own time units.
pub fn default_substeps(epsilon: f64) -> usize {
    (1.0 / epsilon - 1e-9).ceil().max(1.0) as usize
}

/// `0, dt, 2dt, …` up to `horizon`; the last step is shortened if `horizon`
/// is not a multiple of `dt`.
pub fn time_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be positive and finite"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be non-negative and finite"));
    }
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..steps).map(|i| i as f64 * dt).collect();
    times.push(horizon);
    Ok(times)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    pub times: Vec<f64>,
    pub slow_states: Vec<Vec<f64>>,
    pub fast_states: Vec<Vec<f64>>,
}

impl SignalPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Observation increments `ΔY_i = Y(t_{i+1}) - Y(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub times: Vec<f64>,
    pub increments: Vec<Vec<f64>>,
}

impl ObservationPath {
    pub fn new(times: Vec<f64>, increments: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || increments.len() + 1 != times.len() {
            return Err(Error::DimensionMismatch {
                what: "observation increments",
                expected: times.len().saturating_sub(1),
                got: increments.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("times", "must be strictly increasing"));
        }
        Ok(ObservationPath { times, increments })
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dim(&self) -> usize {
        self.increments.first().map_or(0, Vec::len)
    }

    pub fn step_size(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Simulates `(X^ε, Z^ε)` on the slow grid `0, dt_slow, …, horizon`.
pub fn simulate_multiscale<N: NoiseSource + ?Sized>(
    model: &MultiscaleModel,
    x0: &[f64],
    z0: &[f64],
    horizon: f64,
    dt_slow: f64,
    substeps_fast: usize,
    noise: &mut N,
) -> Result<SignalPath> {
    check_len("x0", x0, model.dims.slow)?;
    check_len("z0", z0, model.dims.fast)?;
    if dt_slow > horizon {
        return Err(Error::invalid("dt_slow", "must not exceed the horizon"));
    }
    if substeps_fast == 0 {
        return Err(Error::invalid("substeps_fast", "must be at least 1"));
    }
    let times = time_grid(horizon, dt_slow)?;
    let mut ws = Workspace::default();
    let mut x = x0.to_vec();
    let mut z = z0.to_vec();
    let mut slow_states = Vec::with_capacity(times.len());
    let mut fast_states = Vec::with_capacity(times.len());
    slow_states.push(x.clone());
    fast_states.push(z.clone());
    for (step, w) in times.windows(2).enumerate() {
        if !model.advance(&mut x, &mut z, w[1] - w[0], substeps_fast, noise, &mut ws)? {
            return Err(Error::NumericalBlowUp { step });
        }
        slow_states.push(x.clone());
        fast_states.push(z.clone());
    }
    Ok(SignalPath {
        times,
        slow_states,
        fast_states,
    })
}

/// Path of the frozen-`x` fast process `dZ = f(x, Z) dt + g(x, Z) dW`,
/// including `z0` at time 0.
///
/// Runs at the fast process's own speed; the `1/ε` rescaled process has the
/// same law after the time change `t ↦ t/ε`.
pub fn simulate_frozen_fast<N: NoiseSource + ?Sized>(
    model: &MultiscaleModel,
    x: &[f64],
    z0: &[f64],
    horizon: f64,
    dt: f64,
    noise: &mut N,
) -> Result<Vec<Vec<f64>>> {
    check_len("x", x, model.dims.slow)?;
    check_len("z0", z0, model.dims.fast)?;
    if dt > horizon {
        return Err(Error::invalid("dt", "must not exceed the horizon"));
    }
    let times = time_grid(horizon, dt)?;
    let mut ws = Workspace::default();
    let mut z = z0.to_vec();
    let mut path = Vec::with_capacity(times.len());
    path.push(z.clone());
    for (step, w) in times.windows(2).enumerate() {
        if !model.advance_frozen(x, &mut z, w[1] - w[0], noise, &mut ws)? {
            return Err(Error::NumericalBlowUp { step });
        }
        path.push(z.clone());
    }
    Ok(path)
}

/// `ΔY_i = h(x_i, z_i) Δt_i + √Δt_i ξ_i` with the left-point state.
pub fn simulate_observations<N: NoiseSource + ?Sized>(
    signal: &SignalPath,
    model: &MultiscaleModel,
    noise: &mut N,
) -> Result<ObservationPath> {
    if signal.is_empty() {
        return Err(Error::invalid("signal", "path is empty"));
    }
    let d = model.dims.obs;
    let mut h = Vec::with_capacity(d);
    let mut increments = Vec::with_capacity(signal.len() - 1);
    for (i, w) in signal.times.windows(2).enumerate() {
        let dt = w[1] - w[0];
        model.obs_into(&signal.slow_states[i], &signal.fast_states[i], &mut h)?;
        let sqrt_dt = dt.sqrt();
        increments.push(
            h.iter()
                .map(|hv| hv * dt + sqrt_dt * noise.standard_normal())
                .collect(),
        );
    }
    ObservationPath::new(signal.times.clone(), increments)
}
