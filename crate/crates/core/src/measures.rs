//! Empirical measures, the `x`-marginal, Gaussian test functions and the
//! weak-convergence metric
//!
//! ```text
//! d(μ, ν) = Σ_{i=1}^{K} |μ(φ_i) − ν(φ_i)| / 2^i
//! ```
//!
//! # Default enumeration (`gauss-lattice-v1`)
//!
//! Test functions are single Gaussian bumps `φ(x) = exp(−q |x − c|²)` with a
//! lattice center `c ∈ ℤ^m` and a dyadic width `q`. Products of bumps are
//! representable in [`TestFunction`] but the default enumeration does not use
//! them: single bumps already separate points.
//!
//! * widths: `q_0 = 1, q_1 = 1/2, q_2 = 2, q_3 = 1/4, q_4 = 4, …`, that is
//!   `q_k = 2^{-(k+1)/2}` for odd `k` and `2^{k/2}` for even `k`;
//! * centers: the integer lattice in shells of growing sup-norm
//!   `r = 0, 1, 2, …`; inside a shell points are sorted by L1 norm, then
//!   lexicographically on the per-coordinate key `(|c_j|, c_j < 0)`. In one
//!   dimension this is `0, 1, −1, 2, −2, …`;
//! * pairs `(center index c, width index k)` are walked along anti-diagonals
//!   `s = c + k = 0, 1, 2, …`, with `k` running from `0` to `s` inside each
//!   diagonal.
//!
//! So the first functions in one dimension are `e^{−x²}`, `e^{−(x−1)²}`,
//! `e^{−x²/2}`, `e^{−(x+1)²}`, `e^{−(x−1)²/2}`, `e^{−2x²}`, …

use crate::error::{Error, Result};
use crate::filtering::ParticleEnsemble;

pub const BASIS_TAG: &str = "gauss-lattice-v1";
pub const DEFAULT_BASIS_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Weights are renormalized; they must be nonnegative with positive sum.
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() || atoms.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch {
                what: "measure atoms",
                expected: dim * weights.len(),
                got: atoms.len(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::invalid("weights", "must be nonnegative with positive finite sum"));
        }
        let weights = if (sum - 1.0).abs() <= 1e-12 {
            weights
        } else {
            weights.into_iter().map(|w| w / sum).collect()
        };
        Ok(EmpiricalMeasure { dim, atoms, weights })
    }

    pub fn dirac(point: &[f64]) -> Self {
        EmpiricalMeasure {
            dim: point.len(),
            atoms: point.to_vec(),
            weights: vec![1.0],
        }
    }

    pub fn from_ensemble(ensemble: &ParticleEnsemble) -> Self {
        EmpiricalMeasure {
            dim: ensemble.dim(),
            atoms: ensemble.flat_states().to_vec(),
            weights: ensemble.weights().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Projects an ensemble over `(x, z)` onto its first `dim_slow` coordinates.
pub fn marginal_x(ensemble: &ParticleEnsemble, dim_slow: usize) -> Result<EmpiricalMeasure> {
    let dim = ensemble.dim();
    if dim_slow == 0 || dim_slow > dim {
        return Err(Error::DimensionMismatch {
            what: "slow dimension",
            expected: dim,
            got: dim_slow,
        });
    }
    let atoms = ensemble
        .states()
        .flat_map(|s| s[..dim_slow].iter().copied())
        .collect();
    Ok(EmpiricalMeasure {
        dim: dim_slow,
        atoms,
        weights: ensemble.weights().to_vec(),
    })
}

pub fn integrate(measure: &EmpiricalMeasure, phi: impl Fn(&[f64]) -> f64) -> f64 {
    measure
        .atoms()
        .zip(&measure.weights)
        .map(|(a, w)| w * phi(a))
        .sum()
}

/// One factor `exp(−q |x − center|²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTerm {
    pub q: f64,
    pub center: Vec<f64>,
}

/// Product of Gaussian terms, with values in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub terms: Vec<GaussianTerm>,
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let exponent: f64 = self
            .terms
            .iter()
            .map(|t| {
                t.q * x
                    .iter()
                    .zip(&t.center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
            })
            .sum();
        (-exponent).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionBasis {
    pub dim: usize,
    pub tag: String,
    pub functions: Vec<TestFunction>,
}

impl TestFunctionBasis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

fn width(k: usize) -> f64 {
    if k == 0 {
        1.0
    } else if k % 2 == 1 {
        0.5f64.powi(((k + 1) / 2) as i32)
    } else {
        2f64.powi((k / 2) as i32)
    }
}

fn lattice_shell(dim: usize, r: i64) -> Vec<Vec<i64>> {
    let mut points = Vec::new();
    let side = 2 * r + 1;
    let total = (side as u64).pow(dim as u32);
    for code in 0..total {
        let mut c = code;
        let mut p = Vec::with_capacity(dim);
        for _ in 0..dim {
            p.push((c % side as u64) as i64 - r);
            c /= side as u64;
        }
        p.reverse();
        if p.iter().map(|v| v.abs()).max().unwrap_or(0) == r {
            points.push(p);
        }
    }
    points.sort_by_key(|p| {
        let l1: i64 = p.iter().map(|v| v.abs()).sum();
        let key: Vec<(i64, bool)> = p.iter().map(|&v| (v.abs(), v < 0)).collect();
        (l1, key)
    });
    points
}

fn lattice_centers(dim: usize, count: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::with_capacity(count);
    let mut r = 0;
    while out.len() < count {
        out.extend(lattice_shell(dim, r));
        r += 1;
    }
    out.truncate(count);
    out
}

/// First `k` functions of the `gauss-lattice-v1` enumeration (see the module
/// docs).
pub fn default_basis(k: usize, dim: usize) -> Result<TestFunctionBasis> {
    if k == 0 {
        return Err(Error::invalid("basis_size", "must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let mut pairs = Vec::with_capacity(k);
    let mut s = 0;
    'outer: loop {
        for width_idx in 0..=s {
            pairs.push((s - width_idx, width_idx));
            if pairs.len() == k {
                break 'outer;
            }
        }
        s += 1;
    }
    let max_center = pairs.iter().map(|p| p.0).max().unwrap_or(0);
    let centers = lattice_centers(dim, max_center + 1);
    let functions = pairs
        .into_iter()
        .map(|(c, w)| TestFunction {
            terms: vec![GaussianTerm {
                q: width(w),
                center: centers[c].iter().map(|&v| v as f64).collect(),
            }],
        })
        .collect();
    Ok(TestFunctionBasis {
        dim,
        tag: BASIS_TAG.to_string(),
        functions,
    })
}

/// `Σ_{i=1}^{K} |μ(φ_i) − ν(φ_i)| / 2^i` over the basis functions.
pub fn metric_d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, basis: &TestFunctionBasis) -> Result<f64> {
    for (what, got) in [("mu dimension", mu.dim), ("nu dimension", nu.dim)] {
        if got != basis.dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: basis.dim,
                got,
            });
        }
    }
    let mut scale = 1.0;
    let mut total = 0.0;
    for phi in &basis.functions {
        scale *= 0.5;
        let a = integrate(mu, |x| phi.eval(x));
        let b = integrate(nu, |x| phi.eval(x));
        total += (a - b).abs() * scale;
    }
    Ok(total)
}
