//! Named scalar model families (`m = n = d = 1`, one noise column each).
//!
//! | name           | b                 | σ                  | f               | g    | h              |
//! |----------------|-------------------|--------------------|-----------------|------|----------------|
//! | `zero`         | 0                 | 0                  | 0               | 0    | 0              |
//! | `linear`       | a_xx x + a_xz z   | s_x                | c_zx x + c_zz z | s_z  | h_x x + h_z z  |
//! | `ou_benchmark` | −β x + κ z        | √(s0 + s1 z²)      | −(z − x)        | √2   | h_x x + h_z z  |
//! | `sinusoidal`   | −x + A sin z      | s_x                | −(z − x)        | √2   | x + B cos z    |
//!
//! Every family except `zero` has a Gaussian invariant law for the frozen
//! fast process (`linear` needs `c_zz < 0`), so the averaged coefficients
//! are available in closed form.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::averaging::{AnalyticAverages, HomogenizedModel};
use crate::error::{Error, Result};
use crate::model::{CoefFn, Coefficients, Dims, MultiscaleModel};
use crate::rng::NoiseSource;

pub const MODEL_NAMES: [&str; 4] = ["zero", "linear", "ou_benchmark", "sinusoidal"];

fn one() -> f64 {
    1.0
}

fn sqrt2() -> f64 {
    std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    #[serde(default = "minus_one")]
    pub a_xx: f64,
    #[serde(default)]
    pub a_xz: f64,
    #[serde(default = "one")]
    pub s_x: f64,
    #[serde(default)]
    pub c_zx: f64,
    #[serde(default = "minus_one")]
    pub c_zz: f64,
    #[serde(default = "sqrt2")]
    pub s_z: f64,
    #[serde(default = "one")]
    pub h_x: f64,
    #[serde(default)]
    pub h_z: f64,
}

fn minus_one() -> f64 {
    -1.0
}

impl Default for LinearParams {
    fn default() -> Self {
        LinearParams {
            a_xx: -1.0,
            a_xz: 0.0,
            s_x: 1.0,
            c_zx: 0.0,
            c_zz: -1.0,
            s_z: sqrt2(),
            h_x: 1.0,
            h_z: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_ou_kappa")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default = "one")]
    pub s1: f64,
    #[serde(default = "one")]
    pub h_x: f64,
    #[serde(default = "default_ou_hz")]
    pub h_z: f64,
}

fn default_ou_kappa() -> f64 {
    -0.5
}

fn default_ou_hz() -> f64 {
    2.0
}

impl Default for OuParams {
    fn default() -> Self {
        OuParams {
            beta: 1.0,
            kappa: default_ou_kappa(),
            s0: 1.0,
            s1: 1.0,
            h_x: 1.0,
            h_z: default_ou_hz(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidalParams {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one")]
    pub s_x: f64,
}

impl Default for SinusoidalParams {
    fn default() -> Self {
        SinusoidalParams { a: 1.0, b: 1.0, s_x: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Zero,
    Linear(LinearParams),
    OuBenchmark(OuParams),
    Sinusoidal(SinusoidalParams),
}

/// `x0 ~ N(x_mean, x_std²)`. The fast start is drawn from the invariant law
/// of the frozen fast process at `x0`, unless `z_mean`/`z_std` are given, in
/// which case `z0 ~ N(z_mean, z_std²)` independently of `x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    #[serde(default)]
    pub x_mean: f64,
    #[serde(default = "one")]
    pub x_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_std: Option<f64>,
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw {
            x_mean: 0.0,
            x_std: 1.0,
            z_mean: None,
            z_std: None,
        }
    }
}

impl InitialLaw {
    pub fn delta(x: f64) -> Self {
        InitialLaw {
            x_std: 0.0,
            x_mean: x,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogModel {
    pub family: Family,
    pub initial: InitialLaw,
}

fn coef(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> CoefFn {
    Arc::new(move |x: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(f(x[0], z[0])))
}

fn avg(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> crate::averaging::AvgFn {
    Arc::new(move |x: &[f64], out: &mut Vec<f64>| out.push(f(x[0])))
}

fn parse_params<T: for<'de> Deserialize<'de>>(name: &str, params: &toml::Table) -> Result<T> {
    toml::Value::Table(params.clone())
        .try_into()
        .map_err(|e| Error::invalid(format!("model.params ({name})"), e.to_string()))
}

impl CatalogModel {
    pub fn new(family: Family, initial: InitialLaw) -> Self {
        CatalogModel { family, initial }
    }

    /// Looks a family up by name; unspecified parameters take their defaults.
    pub fn from_config(name: &str, params: &toml::Table, initial: InitialLaw) -> Result<Self> {
        let family = match name {
            "zero" => {
                if let Some(k) = params.keys().next() {
                    return Err(Error::invalid(format!("model.params.{k}"), "the zero model has no parameters"));
                }
                Family::Zero
            }
            "linear" => Family::Linear(parse_params(name, params)?),
            "ou_benchmark" => Family::OuBenchmark(parse_params(name, params)?),
            "sinusoidal" => Family::Sinusoidal(parse_params(name, params)?),
            other => {
                return Err(Error::invalid(
                    "model.name",
                    format!("unknown model `{other}`; expected one of {}", MODEL_NAMES.join(", ")),
                ))
            }
        };
        let model = CatalogModel { family, initial };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.initial;
        let finite = [Some(i.x_mean), Some(i.x_std), i.z_mean, i.z_std]
            .into_iter()
            .flatten()
            .all(f64::is_finite);
        if !finite {
            return Err(Error::invalid("model.initial", "values must be finite"));
        }
        if i.x_std < 0.0 || i.z_std.is_some_and(|s| s < 0.0) {
            return Err(Error::invalid("model.initial", "standard deviations must be nonnegative"));
        }
        if let Family::OuBenchmark(p) = self.family {
            if p.s0 < 0.0 || p.s1 < 0.0 {
                return Err(Error::invalid("model.params", "s0 and s1 must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            Family::Zero => "zero",
            Family::Linear(_) => "linear",
            Family::OuBenchmark(_) => "ou_benchmark",
            Family::Sinusoidal(_) => "sinusoidal",
        }
    }

    /// Resolved parameters, defaults included.
    pub fn params_table(&self) -> toml::Table {
        let table = match self.family {
            Family::Zero => Ok(toml::Table::new()),
            Family::Linear(p) => toml::Table::try_from(p),
            Family::OuBenchmark(p) => toml::Table::try_from(p),
            Family::Sinusoidal(p) => toml::Table::try_from(p),
        };
        table.unwrap_or_default()
    }

    pub fn build(&self, epsilon: f64) -> Result<MultiscaleModel> {
        let coefs = match self.family {
            Family::Zero => Coefficients {
                drift_slow: coef(|_, _| 0.0),
                diff_slow: coef(|_, _| 0.0),
                drift_fast: coef(|_, _| 0.0),
                diff_fast: coef(|_, _| 0.0),
                obs_fn: coef(|_, _| 0.0),
            },
            Family::Linear(p) => Coefficients {
                drift_slow: coef(move |x, z| p.a_xx * x + p.a_xz * z),
                diff_slow: coef(move |_, _| p.s_x),
                drift_fast: coef(move |x, z| p.c_zx * x + p.c_zz * z),
                diff_fast: coef(move |_, _| p.s_z),
                obs_fn: coef(move |x, z| p.h_x * x + p.h_z * z),
            },
            Family::OuBenchmark(p) => Coefficients {
                drift_slow: coef(move |x, z| -p.beta * x + p.kappa * z),
                diff_slow: coef(move |_, z| (p.s0 + p.s1 * z * z).sqrt()),
                drift_fast: coef(|x, z| -(z - x)),
                diff_fast: coef(|_, _| sqrt2()),
                obs_fn: coef(move |x, z| p.h_x * x + p.h_z * z),
            },
            Family::Sinusoidal(p) => Coefficients {
                drift_slow: coef(move |x, z| -x + p.a * z.sin()),
                diff_slow: coef(move |_, _| p.s_x),
                drift_fast: coef(|x, z| -(z - x)),
                diff_fast: coef(|_, _| sqrt2()),
                obs_fn: coef(move |x, z| x + p.b * z.cos()),
            },
        };
        MultiscaleModel::new(Dims::scalar(), coefs, epsilon)
    }

    /// Mean and standard deviation of the invariant law of the frozen fast
    /// process at `x`, if it exists.
    pub fn stationary_fast(&self, x: f64) -> Option<(f64, f64)> {
        match self.family {
            Family::Zero => None,
            Family::Linear(p) if p.c_zz < 0.0 => {
                Some((-p.c_zx * x / p.c_zz, p.s_z.abs() / (-2.0 * p.c_zz).sqrt()))
            }
            Family::Linear(_) => None,
            Family::OuBenchmark(_) | Family::Sinusoidal(_) => Some((x, 1.0)),
        }
    }

    /// Closed-form `b̄`, `ā`, `h̄`.
    pub fn analytic_homogenized(&self) -> Result<HomogenizedModel> {
        let averages = match self.family {
            Family::Zero => AnalyticAverages {
                drift: avg(|_| 0.0),
                diffsq: avg(|_| 0.0),
                obs: avg(|_| 0.0),
            },
            Family::Linear(p) => {
                if !(p.c_zz < 0.0) {
                    return Err(Error::invalid(
                        "model.params.c_zz",
                        "must be negative for the fast process to be ergodic",
                    ));
                }
                let r = -p.c_zx / p.c_zz;
                AnalyticAverages {
                    drift: avg(move |x| (p.a_xx + p.a_xz * r) * x),
                    diffsq: avg(move |_| p.s_x * p.s_x),
                    obs: avg(move |x| (p.h_x + p.h_z * r) * x),
                }
            }
            Family::OuBenchmark(p) => AnalyticAverages {
                drift: avg(move |x| (p.kappa - p.beta) * x),
                diffsq: avg(move |x| p.s0 + p.s1 * (x * x + 1.0)),
                obs: avg(move |x| (p.h_x + p.h_z) * x),
            },
            Family::Sinusoidal(p) => {
                let damp = (-0.5f64).exp();
                AnalyticAverages {
                    drift: avg(move |x| -x + p.a * damp * x.sin()),
                    diffsq: avg(move |_| p.s_x * p.s_x),
                    obs: avg(move |x| x + p.b * damp * x.cos()),
                }
            }
        };
        HomogenizedModel::analytic(1, 1, averages)
    }

    pub fn sample_initial_slow<N: NoiseSource + ?Sized>(&self, noise: &mut N) -> Vec<f64> {
        vec![self.initial.x_mean + self.initial.x_std * noise.standard_normal()]
    }

    pub fn sample_initial<N: NoiseSource + ?Sized>(&self, noise: &mut N) -> (Vec<f64>, Vec<f64>) {
        let x = self.sample_initial_slow(noise);
        let i = &self.initial;
        let (mean, std) = if i.z_mean.is_some() || i.z_std.is_some() {
            (i.z_mean.unwrap_or(0.0), i.z_std.unwrap_or(0.0))
        } else {
            self.stationary_fast(x[0]).unwrap_or((0.0, 0.0))
        };
        let z = vec![mean + std * noise.standard_normal()];
        (x, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ZeroNoise;

    #[test]
    fn lookup_and_defaults() {
        let m = CatalogModel::from_config("ou_benchmark", &toml::Table::new(), InitialLaw::default()).unwrap();
        assert_eq!(m.family, Family::OuBenchmark(OuParams::default()));
        assert_eq!(m.params_table()["h_z"].as_float(), Some(2.0));
        let lin = CatalogModel::from_config("linear", &toml::Table::new(), InitialLaw::default()).unwrap();
        assert_eq!(lin.family, Family::Linear(LinearParams::default()));
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        let err = CatalogModel::from_config("nope", &toml::Table::new(), InitialLaw::default()).unwrap_err();
        assert!(err.to_string().contains("model.name"));
        let params: toml::Table = toml::from_str("bogus = 1.0").unwrap();
        let err = CatalogModel::from_config("linear", &params, InitialLaw::default()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn coefficients_match_the_table() {
        let m = CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default())
            .build(0.1)
            .unwrap();
        assert_eq!(m.drift_slow(&[2.0], &[1.0]).unwrap(), vec![-2.5]);
        assert_eq!(m.diff_slow(&[2.0], &[3.0]).unwrap(), vec![10f64.sqrt()]);
        assert_eq!(m.obs(&[2.0], &[1.0]).unwrap(), vec![4.0]);
        let s = CatalogModel::new(Family::Sinusoidal(SinusoidalParams::default()), InitialLaw::default())
            .build(0.1)
            .unwrap();
        assert_eq!(s.obs(&[1.0], &[0.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn analytic_averages() {
        let ou = CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default());
        let h = ou.analytic_homogenized().unwrap();
        assert_eq!(h.drift_avg(&[2.0]).unwrap(), vec![-3.0]);
        assert_eq!(h.diffsq_avg(&[1.0]).unwrap()[(0, 0)], 3.0);
        assert_eq!(h.obs_avg(&[2.0]).unwrap(), vec![6.0]);

        let lin = CatalogModel::new(
            Family::Linear(LinearParams {
                a_xz: 1.0,
                c_zx: 1.0,
                c_zz: -2.0,
                ..Default::default()
            }),
            InitialLaw::default(),
        );
        assert_eq!(lin.analytic_homogenized().unwrap().drift_avg(&[2.0]).unwrap(), vec![-1.0]);
        assert_eq!(lin.stationary_fast(2.0), Some((1.0, 0.5f64.sqrt())));

        let unstable = CatalogModel::new(
            Family::Linear(LinearParams { c_zz: 0.5, ..Default::default() }),
            InitialLaw::default(),
        );
        assert!(unstable.analytic_homogenized().is_err());
    }

    #[test]
    fn initial_sampling() {
        let m = CatalogModel::new(
            Family::OuBenchmark(OuParams::default()),
            InitialLaw {
                x_mean: 0.7,
                ..Default::default()
            },
        );
        assert_eq!(m.sample_initial(&mut ZeroNoise), (vec![0.7], vec![0.7]));
        let fixed = CatalogModel::new(
            Family::Zero,
            InitialLaw {
                z_mean: Some(3.0),
                ..Default::default()
            },
        );
        assert_eq!(fixed.sample_initial(&mut ZeroNoise), (vec![0.0], vec![3.0]));
    }
}
