//! Gaussian-process error covariance `Σ_i = K_i + ν₃ I` with the squared
//! exponential kernel `k(t, t') = ν₁ exp(-ν₂ (t - t')² / 2)`, and its first
//! and second derivatives in `ν`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Kernel variance `nu1`, inverse squared length-scale `nu2`, noise `nu3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuParams {
    pub nu1: f64,
    pub nu2: f64,
    pub nu3: f64,
}

impl NuParams {
    pub fn new(nu1: f64, nu2: f64, nu3: f64) -> Result<Self> {
        let nu = NuParams { nu1, nu2, nu3 };
        nu.validate()?;
        Ok(nu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation(format!("nu must be strictly positive, got {self:?}")))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.nu1, self.nu2, self.nu3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        NuParams {
            nu1: a[0],
            nu2: a[1],
            nu3: a[2],
        }
    }

    pub fn to_log(&self) -> DVector<f64> {
        DVector::from_iterator(3, self.as_array().iter().map(|v| v.ln()))
    }

    pub fn from_log(rho: &DVector<f64>) -> Self {
        NuParams::from_array([rho[0].exp(), rho[1].exp(), rho[2].exp()])
    }

    pub fn norm(&self) -> f64 {
        self.as_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// How `ν₃` enters `Σ_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseParam {
    /// `Σ = K + ν₃ I`; `ν₃` is the noise variance.
    #[default]
    Variance,
    /// `Σ = K + ν₃² I`; `ν₃` is the noise standard deviation.
    StdDev,
}

pub fn kernel(t: f64, t2: f64, nu: &NuParams) -> f64 {
    let d = t - t2;
    nu.nu1 * (-0.5 * nu.nu2 * d * d).exp()
}

/// Nonzero first and second derivatives of `Σ_i` with respect to `ν`.
#[derive(Debug, Clone)]
pub struct CovDerivatives {
    /// `∂Σ/∂ν_j`, `j = 1..3`.
    pub first: [DMatrix<f64>; 3],
    pub d12: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    /// `∂²Σ/∂ν₃²`: zero for the variance parameterization, `2I` otherwise.
    pub d33: DMatrix<f64>,
}

impl CovDerivatives {
    /// `∂²Σ/∂ν_j∂ν_k` (zero-based indices).
    pub fn second(&self, j: usize, k: usize) -> Option<&DMatrix<f64>> {
        match (j.min(k), j.max(k)) {
            (0, 1) => Some(&self.d12),
            (1, 1) => Some(&self.d22),
            (2, 2) => Some(&self.d33),
            _ => None,
        }
    }
}

pub fn cov_derivatives(times: &[f64], nu: &NuParams, noise: NoiseParam) -> CovDerivatives {
    let n = times.len();
    let mut d1 = DMatrix::zeros(n, n);
    let mut d2 = DMatrix::zeros(n, n);
    let mut d12 = DMatrix::zeros(n, n);
    let mut d22 = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let dt = times[i] - times[j];
            let sq = dt * dt;
            let e = (-0.5 * nu.nu2 * sq).exp();
            d1[(i, j)] = e;
            d2[(i, j)] = -0.5 * nu.nu1 * sq * e;
            d12[(i, j)] = -0.5 * sq * e;
            d22[(i, j)] = 0.25 * nu.nu1 * sq * sq * e;
        }
    }
    let (d3, d33) = match noise {
        NoiseParam::Variance => (DMatrix::identity(n, n), DMatrix::zeros(n, n)),
        NoiseParam::StdDev => (
            DMatrix::identity(n, n) * (2.0 * nu.nu3),
            DMatrix::identity(n, n) * 2.0,
        ),
    };
    CovDerivatives {
        first: [d1, d2, d3],
        d12,
        d22,
        d33,
    }
}

/// `Σ_i` for one time grid with its Cholesky factor and derivatives.
#[derive(Debug, Clone)]
pub struct CovBundle {
    pub sigma: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub derivs: CovDerivatives,
}

impl CovBundle {
    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn logdet(&self) -> f64 {
        linalg::cholesky_logdet(&self.chol)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Covariance matrix alone, without factorization.
pub fn sigma_matrix(times: &[f64], nu: &NuParams, noise: NoiseParam) -> DMatrix<f64> {
    let n = times.len();
    let noise_var = match noise {
        NoiseParam::Variance => nu.nu3,
        NoiseParam::StdDev => nu.nu3 * nu.nu3,
    };
    let mut s = DMatrix::from_fn(n, n, |i, j| kernel(times[i], times[j], nu));
    for i in 0..n {
        s[(i, i)] += noise_var;
    }
    s
}

pub fn cov_matrix(times: &[f64], nu: &NuParams, noise: NoiseParam) -> Result<CovBundle> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("non-finite time point".into()));
    }
    nu.validate()?;
    let sigma = sigma_matrix(times, nu, noise);
    let chol = linalg::cholesky_with_jitter(&sigma)?;
    Ok(CovBundle {
        sigma,
        chol,
        derivs: cov_derivatives(times, nu, noise),
    })
}
