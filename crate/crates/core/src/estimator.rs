//! Penalized maximum likelihood for `Θ` and the Gaussian-process
//! parameters `ν`.
//!
//! Given `ν`, `vec Θ̂ = (XᵀΣ⁻¹X + nλΩ)⁺ XᵀΣ⁻¹y` in closed form. Given `Θ`,
//! one damped Newton step in `log ν` is taken. The two updates alternate
//! until the relative change of the penalized log-likelihood falls below
//! the tolerance.
//!
//! Subjects that share a time grid share `Σ_i` and `Ψ_i`, so the data are
//! stored per time grid and `XᵀΣ⁻¹X` is accumulated as
//! `Σ_g (Z_gᵀZ_g) ⊗ (ΨᵀΣ⁻¹Ψ)` without materializing any `X_i`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BasisSystem, PenaltyMatrix};
use crate::design::{self, build_covariate, n_covariates, QuadraticModelSpec, ThetaMatrix};
use crate::error::{Error, Result};
use crate::gpcov::{cov_matrix, CovBundle, NoiseParam, NuParams};
use crate::linalg::{self, kron, DeflatedCholesky, Nullspace, PINV_REL_TOL};
use crate::smoothing::{FunctionalCurve, LongitudinalDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Subjects observed on one common time grid.
#[derive(Debug, Clone)]
pub struct TimeGroup {
    pub times: Vec<f64>,
    /// `Ψ` for this grid, `n_t × M_y`.
    pub psi: DMatrix<f64>,
    /// Subject indices, in column order of `y` and row order of `z`.
    pub members: Vec<usize>,
    /// Responses, `n_t × n_g`.
    pub y: DMatrix<f64>,
    /// Covariates, `n_g × P`.
    pub z: DMatrix<f64>,
}

/// Response observations and covariate vectors ready for estimation.
#[derive(Debug, Clone)]
pub struct FitData {
    groups: Vec<TimeGroup>,
    /// subject -> (group, position)
    index: Vec<(usize, usize)>,
    response_basis: Arc<BasisSystem>,
    n_cov: usize,
    total_obs: usize,
}

impl FitData {
    pub fn new(
        covariates: Vec<DVector<f64>>,
        times: Vec<Vec<f64>>,
        responses: Vec<DVector<f64>>,
        response_basis: Arc<BasisSystem>,
    ) -> Result<Self> {
        let n = covariates.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if times.len() != n || responses.len() != n {
            return Err(Error::Dimension(format!(
                "{n} covariate vectors, {} time grids, {} responses",
                times.len(),
                responses.len()
            )));
        }
        let n_cov = covariates[0].len();
        let mut keyed: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut grids: Vec<Vec<f64>> = Vec::new();
        let mut total_obs = 0;
        for i in 0..n {
            if covariates[i].len() != n_cov {
                return Err(Error::Dimension("covariate vectors differ in length".into()));
            }
            if times[i].len() != responses[i].len() || times[i].is_empty() {
                return Err(Error::Dimension(format!("subject {i}: times and responses differ in length")));
            }
            if responses[i].iter().chain(covariates[i].iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("subject {i}: non-finite value")));
            }
            total_obs += times[i].len();
            let key: Vec<u64> = times[i].iter().map(|t| t.to_bits()).collect();
            let g = *keyed.entry(key).or_insert_with(|| {
                grids.push(times[i].clone());
                members.push(Vec::new());
                grids.len() - 1
            });
            members[g].push(i);
        }
        let mut index = vec![(0, 0); n];
        let mut groups = Vec::with_capacity(grids.len());
        for (g, (grid, mem)) in grids.into_iter().zip(members).enumerate() {
            let psi = response_basis.design_matrix(&grid)?;
            let y = DMatrix::from_fn(grid.len(), mem.len(), |j, c| responses[mem[c]][j]);
            let z = DMatrix::from_fn(mem.len(), n_cov, |c, k| covariates[mem[c]][k]);
            for (c, &i) in mem.iter().enumerate() {
                index[i] = (g, c);
            }
            groups.push(TimeGroup {
                times: grid,
                psi,
                members: mem,
                y,
                z,
            });
        }
        Ok(FitData {
            groups,
            index,
            response_basis,
            n_cov,
            total_obs,
        })
    }

    /// Covariates from smoothed predictor curves, paired subject by subject with `response`.
    pub fn from_curves(
        curves: &[FunctionalCurve],
        gram: &DMatrix<f64>,
        order: usize,
        response: &LongitudinalDataset,
        response_basis: Arc<BasisSystem>,
    ) -> Result<Self> {
        if curves.len() != response.len() {
            return Err(Error::Dimension(format!(
                "{} predictor curves but {} response subjects",
                curves.len(),
                response.len()
            )));
        }
        let z = curves
            .iter()
            .map(|c| build_covariate(&c.coefficients, gram, order))
            .collect::<Result<Vec<_>>>()?;
        let times = response.subjects.iter().map(|s| s.times.clone()).collect();
        let y = response
            .subjects
            .iter()
            .map(|s| DVector::from_column_slice(&s.values))
            .collect();
        Self::new(z, times, y, response_basis)
    }

    /// Same responses with covariates cut down to the first `n_cov` entries
    /// (e.g. the linear-only design `(1, Φw)`).
    pub fn truncate_covariates(&self, n_cov: usize) -> Result<Self> {
        if n_cov > self.n_cov || n_cov == 0 {
            return Err(Error::Dimension(format!("cannot truncate {} covariates to {n_cov}", self.n_cov)));
        }
        let mut out = self.clone();
        for g in &mut out.groups {
            g.z = g.z.columns(0, n_cov).into_owned();
        }
        out.n_cov = n_cov;
        Ok(out)
    }

    pub fn n_subjects(&self) -> usize {
        self.index.len()
    }

    pub fn total_observations(&self) -> usize {
        self.total_obs
    }

    pub fn n_covariates(&self) -> usize {
        self.n_cov
    }

    pub fn m_y(&self) -> usize {
        self.response_basis.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_cov * self.m_y()
    }

    pub fn groups(&self) -> &[TimeGroup] {
        &self.groups
    }

    pub fn response_basis(&self) -> &Arc<BasisSystem> {
        &self.response_basis
    }

    pub fn times(&self, i: usize) -> &[f64] {
        &self.groups[self.index[i].0].times
    }

    pub fn y(&self, i: usize) -> DVector<f64> {
        let (g, c) = self.index[i];
        self.groups[g].y.column(c).into_owned()
    }

    pub fn z(&self, i: usize) -> DVector<f64> {
        let (g, c) = self.index[i];
        self.groups[g].z.row(c).transpose()
    }

    pub fn psi(&self, i: usize) -> &DMatrix<f64> {
        &self.groups[self.index[i].0].psi
    }

    /// Explicit `X_i = z_iᵀ ⊗ Ψ_i`.
    pub fn design_block(&self, i: usize) -> DMatrix<f64> {
        design::build_design_block(&self.z(i), self.psi(i))
    }

    fn time_range(&self) -> f64 {
        let lo = self.groups.iter().flat_map(|g| g.times.iter()).fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = self.groups.iter().flat_map(|g| g.times.iter()).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        hi - lo
    }

    fn check_spec(&self, spec: &QuadraticModelSpec) -> Result<()> {
        if spec.n_covariates() != self.n_cov || spec.m_y != self.m_y() {
            return Err(Error::Dimension(format!(
                "model expects P={} and M_y={}, data has P={} and M_y={}",
                spec.n_covariates(),
                spec.m_y,
                self.n_cov,
                self.m_y()
            )));
        }
        Ok(())
    }
}

/// Regularization entering the system matrix as `n · (λΩ + λ_q J)` where
/// `J` selects the quadratic and higher blocks of `vec Θ`.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub omega: DMatrix<f64>,
    pub lambda: f64,
    pub quad_ridge: f64,
    m_y: usize,
    linear_len: usize,
}

impl Penalty {
    pub fn new(spec: &QuadraticModelSpec, quad_ridge: f64) -> Result<Self> {
        Ok(Penalty {
            omega: design::build_penalty(spec)?,
            lambda: spec.lambda,
            quad_ridge,
            m_y: spec.m_y,
            linear_len: 1 + spec.m_x,
        })
    }

    /// `λΩ + λ_q J`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = &self.omega * self.lambda;
        if self.quad_ridge > 0.0 {
            for i in self.linear_len * self.m_y..m.nrows() {
                m[(i, i)] += self.quad_ridge;
            }
        }
        m
    }

    /// `(vecΘ)ᵀ(λΩ + λ_q J)(vecΘ)`.
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        let mut s = if self.lambda > 0.0 {
            self.lambda * v.dot(&(&self.omega * v))
        } else {
            0.0
        };
        if self.quad_ridge > 0.0 {
            s += self.quad_ridge * v.rows_range(self.linear_len * self.m_y..).norm_squared();
        }
        s
    }
}

/// `Σ_g` factorizations for every time grid at one `ν`.
#[derive(Debug, Clone)]
pub(crate) struct CovState {
    pub bundles: Vec<CovBundle>,
}

impl CovState {
    pub fn new(data: &FitData, nu: &NuParams, noise: NoiseParam) -> Result<Self> {
        let bundles = data
            .groups
            .par_iter()
            .map(|g| cov_matrix(&g.times, nu, noise))
            .collect::<Result<Vec<_>>>()?;
        Ok(CovState { bundles })
    }
}

/// `XᵀΣ⁻¹X` and `XᵀΣ⁻¹y`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub xtsx: DMatrix<f64>,
    pub xtsy: DVector<f64>,
}

pub(crate) fn normal_equations(data: &FitData, cov: Option<&CovState>) -> NormalEquations {
    let m_y = data.m_y();
    let d = data.n_params();
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = data
        .groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let (spsi, sy) = match cov {
                Some(c) => (c.bundles[gi].chol.solve(&g.psi), c.bundles[gi].chol.solve(&g.y)),
                None => (g.psi.clone(), g.y.clone()),
            };
            let a = g.psi.tr_mul(&spsi);
            let ztz = g.z.tr_mul(&g.z);
            let c = g.psi.tr_mul(&sy);
            let cz = c * &g.z;
            (kron(&ztz, &a), DVector::from_column_slice(cz.as_slice()))
        })
        .collect();
    let mut xtsx = DMatrix::zeros(d, d);
    let mut xtsy = DVector::zeros(d);
    for (f, b) in parts {
        xtsx += f;
        xtsy += b;
    }
    debug_assert_eq!(xtsy.len(), m_y * data.n_cov);
    NormalEquations { xtsx, xtsy }
}

/// Pseudo-inverse solver for `XᵀΣ⁻¹X + nλΩ` that reuses the nullspace,
/// which does not depend on `ν`.
#[derive(Debug, Clone, Default)]
pub(crate) struct ThetaSolver {
    nullspace: Option<Nullspace>,
}

impl ThetaSolver {
    pub fn with_nullspace(nullspace: Option<Nullspace>) -> Self {
        ThetaSolver { nullspace }
    }

    pub fn nullspace(&self) -> Option<&Nullspace> {
        self.nullspace.as_ref()
    }

    pub fn factor(&mut self, system: &DMatrix<f64>) -> SystemFactor {
        if let Some(ns) = &self.nullspace {
            if let Some(f) = DeflatedCholesky::new(system, ns.clone()) {
                return SystemFactor::Deflated(f);
            }
        }
        let ns = Nullspace::detect_scaled(system, PINV_REL_TOL);
        self.nullspace = Some(ns.clone());
        let ns_dim = ns.dim();
        match DeflatedCholesky::new(system, ns) {
            Some(f) => SystemFactor::Deflated(f),
            None => {
                log::debug!("deflated Cholesky failed; falling back to eigen pseudo-inverse");
                let nullity = ns_dim;
                SystemFactor::Dense {
                    pinv: linalg::pinv_symmetric(system, PINV_REL_TOL),
                    nullity,
                }
            }
        }
    }
}

pub(crate) enum SystemFactor {
    Deflated(DeflatedCholesky),
    Dense { pinv: DMatrix<f64>, nullity: usize },
}

impl SystemFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SystemFactor::Deflated(f) => f.solve(b),
            SystemFactor::Dense { pinv, .. } => pinv * b,
        }
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SystemFactor::Deflated(f) => f.solve_matrix(b),
            SystemFactor::Dense { pinv, .. } => pinv * b,
        }
    }

    pub fn nullity(&self) -> usize {
        match self {
            SystemFactor::Deflated(f) => f.nullity(),
            SystemFactor::Dense { nullity, .. } => *nullity,
        }
    }
}

pub(crate) fn system_matrix(ne: &NormalEquations, pen: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut a = &ne.xtsx + pen * n as f64;
    linalg::symmetrize(&mut a);
    a
}

/// Closed-form `vec Θ̂` with the number of deflated (unidentified) directions.
#[derive(Debug, Clone)]
pub struct ThetaUpdate {
    pub vec_theta: DVector<f64>,
    pub nullity: usize,
}

/// `vec Θ̂ = (XᵀΣ⁻¹X + nλΩ)⁺ XᵀΣ⁻¹y` for fixed `ν`.
pub fn update_theta(
    data: &FitData,
    nu: &NuParams,
    lambda: f64,
    omega: &DMatrix<f64>,
    noise: NoiseParam,
) -> Result<ThetaUpdate> {
    check_square(omega, data.n_params(), "Omega")?;
    let cov = CovState::new(data, nu, noise)?;
    let ne = normal_equations(data, Some(&cov));
    let a = system_matrix(&ne, &(omega * lambda), data.n_subjects());
    let factor = ThetaSolver::default().factor(&a);
    Ok(ThetaUpdate {
        vec_theta: factor.solve(&ne.xtsy),
        nullity: factor.nullity(),
    })
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!("{what} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn theta_matrix(data: &FitData, v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(data.m_y(), data.n_cov, v.as_slice())
}

/// Residuals `y_i − Ψ_i Θ z_i`, one `n_t × n_g` block per time grid.
pub(crate) fn residuals(data: &FitData, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let theta = theta_matrix(data, v);
    data.groups
        .iter()
        .map(|g| &g.y - &g.psi * &theta * g.z.transpose())
        .collect()
}

pub(crate) fn loglik_from(data: &FitData, cov: &CovState, resid: &[DMatrix<f64>]) -> f64 {
    data.groups
        .iter()
        .zip(&cov.bundles)
        .zip(resid)
        .map(|((g, b), r)| {
            let ng = g.members.len() as f64;
            let nt = g.times.len() as f64;
            let alpha = b.chol.solve(r);
            -0.5 * ng * (nt * LN_2PI + b.logdet()) - 0.5 * r.dot(&alpha)
        })
        .sum()
}

fn loglik_vec(data: &FitData, v: &DVector<f64>, nu: &NuParams, noise: NoiseParam) -> Result<f64> {
    let cov = CovState::new(data, nu, noise)?;
    Ok(loglik_from(data, &cov, &residuals(data, v)))
}

/// `ℓ(Θ, ν) = Σ_i log f(y_i | Θ, ν)`.
pub fn log_likelihood(theta: &ThetaMatrix, nu: &NuParams, data: &FitData, noise: NoiseParam) -> Result<f64> {
    check_theta(theta, data)?;
    loglik_vec(data, &theta.vec(), nu, noise)
}

/// `ℓ_λ = ℓ − (nλ/2)(vecΘ)ᵀΩ(vecΘ)`.
pub fn penalized_log_likelihood(
    theta: &ThetaMatrix,
    nu: &NuParams,
    data: &FitData,
    lambda: f64,
    omega: &DMatrix<f64>,
    noise: NoiseParam,
) -> Result<f64> {
    check_theta(theta, data)?;
    check_square(omega, data.n_params(), "Omega")?;
    let v = theta.vec();
    let ll = loglik_vec(data, &v, nu, noise)?;
    if lambda == 0.0 {
        return Ok(ll);
    }
    Ok(ll - 0.5 * data.n_subjects() as f64 * lambda * v.dot(&(omega * &v)))
}

fn check_theta(theta: &ThetaMatrix, data: &FitData) -> Result<()> {
    if theta.m_y() != data.m_y() || theta.matrix().ncols() != data.n_cov {
        return Err(Error::Dimension("Theta does not match the data".into()));
    }
    Ok(())
}

/// Gradient and Hessian of `ℓ_λ` in `ν` (the penalty does not involve `ν`).
#[derive(Debug, Clone)]
pub struct NuDerivatives {
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl NuDerivatives {
    /// Chain rule to `ρ = log ν`.
    pub fn to_log_scale(&self, nu: &NuParams) -> NuDerivatives {
        let v = DVector::from_row_slice(&nu.as_array());
        let gradient = self.gradient.component_mul(&v);
        let mut hessian = DMatrix::from_fn(3, 3, |j, k| v[j] * v[k] * self.hessian[(j, k)]);
        for j in 0..3 {
            hessian[(j, j)] += gradient[j];
        }
        NuDerivatives { gradient, hessian }
    }
}

pub(crate) fn nu_derivatives_from(data: &FitData, cov: &CovState, resid: &[DMatrix<f64>]) -> NuDerivatives {
    let parts: Vec<(DVector<f64>, DMatrix<f64>)> = data
        .groups
        .par_iter()
        .zip(cov.bundles.par_iter())
        .zip(resid.par_iter())
        .map(|((g, b), r)| {
            let ng = g.members.len() as f64;
            let sinv = b.inverse();
            let alpha = &sinv * r;
            let d = &b.derivs.first;
            let m: Vec<DMatrix<f64>> = d.iter().map(|dj| &sinv * dj).collect();
            let v: Vec<DMatrix<f64>> = d.iter().map(|dj| dj * &alpha).collect();
            let sv: Vec<DMatrix<f64>> = v.iter().map(|vj| &sinv * vj).collect();
            let mut grad = DVector::zeros(3);
            let mut hess = DMatrix::zeros(3, 3);
            for j in 0..3 {
                grad[j] = 0.5 * alpha.dot(&v[j]) - 0.5 * ng * m[j].trace();
                for k in j..3 {
                    let mut h = -v[j].dot(&sv[k]) + 0.5 * ng * (&m[j] * &m[k]).trace();
                    if let Some(djk) = b.derivs.second(j, k) {
                        h += 0.5 * alpha.dot(&(djk * &alpha)) - 0.5 * ng * (&sinv * djk).trace();
                    }
                    hess[(j, k)] = h;
                    hess[(k, j)] = h;
                }
            }
            (grad, hess)
        })
        .collect();
    let mut gradient = DVector::zeros(3);
    let mut hessian = DMatrix::zeros(3, 3);
    for (g, h) in parts {
        gradient += g;
        hessian += h;
    }
    NuDerivatives { gradient, hessian }
}

/// Analytic `∂ℓ_λ/∂ν` and `∂²ℓ_λ/∂ν∂νᵀ` at `(Θ, ν)`.
pub fn nu_derivatives(theta: &ThetaMatrix, nu: &NuParams, data: &FitData, noise: NoiseParam) -> Result<NuDerivatives> {
    check_theta(theta, data)?;
    let cov = CovState::new(data, nu, noise)?;
    Ok(nu_derivatives_from(data, &cov, &residuals(data, &theta.vec())))
}

pub fn nu_gradient(theta: &ThetaMatrix, nu: &NuParams, data: &FitData, noise: NoiseParam) -> Result<DVector<f64>> {
    Ok(nu_derivatives(theta, nu, data, noise)?.gradient)
}

pub fn nu_hessian(theta: &ThetaMatrix, nu: &NuParams, data: &FitData, noise: NoiseParam) -> Result<DMatrix<f64>> {
    Ok(nu_derivatives(theta, nu, data, noise)?.hessian)
}

/// Result of one damped ascent step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Accepted {
        x: DVector<f64>,
        value: f64,
        halvings: usize,
        steepest: bool,
    },
    /// Zero gradient; the point is left unchanged.
    Stationary,
    /// No trial point within 30 halvings kept the objective from decreasing.
    Failed,
}

pub const MAX_HALVINGS: usize = 30;

/// Ascent direction: Newton when `H` is negative definite, otherwise
/// steepest ascent scaled by `1/‖H‖`.
pub fn ascent_direction(gradient: &DVector<f64>, hessian: &DMatrix<f64>) -> (DVector<f64>, bool) {
    if let Some(c) = nalgebra::Cholesky::new(-hessian) {
        let d = c.solve(gradient);
        if d.iter().all(|v| v.is_finite()) {
            return (d, false);
        }
    }
    let hn = hessian.norm();
    let scale = if hn > 0.0 && hn.is_finite() { 1.0 / hn } else { 1.0 };
    (gradient * scale, true)
}

/// Damped Newton ascent step: the full step is halved until the objective
/// does not decrease, at most [`MAX_HALVINGS`] times.
pub fn damped_newton_step<F>(
    x: &DVector<f64>,
    value: f64,
    gradient: &DVector<f64>,
    hessian: &DMatrix<f64>,
    objective: F,
) -> StepOutcome
where
    F: Fn(&DVector<f64>) -> Option<f64>,
{
    if gradient.iter().all(|g| *g == 0.0) {
        return StepOutcome::Stationary;
    }
    let (dir, steepest) = ascent_direction(gradient, hessian);
    let mut step = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let trial = x + &dir * step;
        if let Some(v) = objective(&trial) {
            if v.is_finite() && v >= value {
                return StepOutcome::Accepted {
                    x: trial,
                    value: v,
                    halvings,
                    steepest,
                };
            }
        }
        step *= 0.5;
    }
    StepOutcome::Failed
}

/// One damped Newton step for `ν` taken in `log ν` coordinates.
///
/// `gradient` and `hessian` are with respect to `log ν`; `objective`
/// evaluates `ℓ_λ` at a candidate `ν`.
pub fn newton_nu_step<F>(
    nu: &NuParams,
    value: f64,
    gradient: &DVector<f64>,
    hessian: &DMatrix<f64>,
    objective: F,
) -> (NuParams, StepOutcome)
where
    F: Fn(&NuParams) -> Option<f64>,
{
    let rho = nu.to_log();
    let outcome = damped_newton_step(&rho, value, gradient, hessian, |r| {
        let cand = NuParams::from_log(r);
        cand.validate().ok()?;
        objective(&cand)
    });
    let next = match &outcome {
        StepOutcome::Accepted { x, .. } => NuParams::from_log(x),
        _ => *nu,
    };
    (next, outcome)
}

/// Controls for the alternating fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitControls {
    pub max_outer: usize,
    pub tol: f64,
    pub nu_init: Option<NuParams>,
    pub noise: NoiseParam,
    /// Extra ridge on the quadratic (and higher) blocks of `vec Θ`.
    pub quad_ridge: f64,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            max_outer: 200,
            tol: 1e-6,
            nu_init: None,
            noise: NoiseParam::Variance,
            quad_ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    /// Penalized log-likelihood after initialization and after every outer iteration.
    pub trace: Vec<f64>,
    /// Dimension of the deflated nullspace of `XᵀΣ⁻¹X + nλΩ` (0 when invertible).
    pub rank_deficiency: usize,
    pub steepest_steps: usize,
    pub message: Option<String>,
}

/// Predictor-side information needed to turn new raw curves into covariates.
#[derive(Debug, Clone)]
pub struct PredictorInfo {
    pub basis: Arc<BasisSystem>,
    pub gram: DMatrix<f64>,
    pub roughness: Option<f64>,
}

impl PredictorInfo {
    pub fn new(basis: Arc<BasisSystem>, roughness: Option<f64>) -> Self {
        let gram = basis.default_gram();
        PredictorInfo { basis, gram, roughness }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub theta: ThetaMatrix,
    pub nu: NuParams,
    pub spec: QuadraticModelSpec,
    pub noise: NoiseParam,
    pub quad_ridge: f64,
    pub response_basis: Arc<BasisSystem>,
    pub predictor: Option<PredictorInfo>,
    pub diagnostics: Diagnostics,
    pub(crate) nullspace: Option<Nullspace>,
}

impl FittedModel {
    pub fn penalty(&self) -> Result<Penalty> {
        Penalty::new(&self.spec, self.quad_ridge)
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.converged
    }

    /// `Ψ_i Θ̂ z_i` for every subject of `data`.
    pub fn fitted_values(&self, data: &FitData) -> Vec<DVector<f64>> {
        (0..data.n_subjects())
            .map(|i| data.psi(i) * (self.theta.matrix() * data.z(i)))
            .collect()
    }

    pub fn with_predictor(mut self, predictor: PredictorInfo) -> Self {
        self.predictor = Some(predictor);
        self
    }

    /// `Ψ(times) Θ̂ z` for a covariate vector `z`.
    pub fn predict_covariate(&self, z: &DVector<f64>, times: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.spec.n_covariates() {
            return Err(Error::Dimension(format!(
                "covariate of length {}, model expects {}",
                z.len(),
                self.spec.n_covariates()
            )));
        }
        let psi = self.response_basis.design_matrix(times)?;
        Ok(psi * (self.theta.matrix() * z))
    }
}

/// `Ψ(times) Θ̂ z(w_new)`.
pub fn predict(model: &FittedModel, w_new: &DVector<f64>, times: &[f64]) -> Result<DVector<f64>> {
    let pred = model
        .predictor
        .as_ref()
        .ok_or_else(|| Error::Validation("model has no predictor basis attached".into()))?;
    let z = build_covariate(w_new, &pred.gram, model.spec.order)?;
    model.predict_covariate(&z, times)
}

pub fn predict_curve(model: &FittedModel, curve: &FunctionalCurve, times: &[f64]) -> Result<DVector<f64>> {
    predict(model, &curve.coefficients, times)
}

/// Alternate closed-form `Θ` updates and damped Newton steps in `ν`.
pub fn fit(data: &FitData, spec: &QuadraticModelSpec, controls: &FitControls) -> Result<FittedModel> {
    fit_with_nullspace(data, spec, controls, None)
}

pub(crate) fn fit_with_nullspace(
    data: &FitData,
    spec: &QuadraticModelSpec,
    controls: &FitControls,
    nullspace: Option<Nullspace>,
) -> Result<FittedModel> {
    spec.validate()?;
    data.check_spec(spec)?;
    let n = data.n_subjects();
    let noise = controls.noise;
    let penalty = Penalty::new(spec, controls.quad_ridge)?;
    let pen = penalty.matrix();
    let mut solver = ThetaSolver::with_nullspace(nullspace);

    let objective = |v: &DVector<f64>, nu: &NuParams| -> Result<f64> {
        Ok(loglik_vec(data, v, nu, noise)? - 0.5 * n as f64 * penalty.value(v))
    };

    // Θ from Σ = I, then a scale-aware ν
    let ne0 = normal_equations(data, None);
    let f0 = solver.factor(&system_matrix(&ne0, &pen, n));
    let mut v = f0.solve(&ne0.xtsy);
    let mut nu = match controls.nu_init {
        Some(nu) => {
            nu.validate()?;
            nu
        }
        None => initial_nu(data, &v),
    };
    let mut value = objective(&v, &nu)?;
    let mut trace = vec![value];
    let mut rank_deficiency = f0.nullity();
    let mut steepest_steps = 0;
    let mut converged = false;
    let mut message = None;
    let mut iterations = 0;
    let mut last_rel = f64::INFINITY;

    for it in 1..=controls.max_outer {
        iterations = it;
        let start = value;

        let cov = CovState::new(data, &nu, noise)?;
        let ne = normal_equations(data, Some(&cov));
        let factor = solver.factor(&system_matrix(&ne, &pen, n));
        rank_deficiency = factor.nullity();
        let cand = factor.solve(&ne.xtsy);
        let resid = residuals(data, &cand);
        let cand_value = loglik_from(data, &cov, &resid) - 0.5 * n as f64 * penalty.value(&cand);
        let resid = if cand_value >= value {
            v = cand;
            value = cand_value;
            resid
        } else {
            residuals(data, &v)
        };

        let derivs = nu_derivatives_from(data, &cov, &resid).to_log_scale(&nu);
        let (dir, _) = ascent_direction(&derivs.gradient, &derivs.hessian);
        let predicted_gain = derivs.gradient.dot(&dir).abs();
        let scale = value.abs().max(1.0);
        if last_rel < controls.tol && predicted_gain < controls.tol * scale {
            trace.push(value);
            converged = true;
            break;
        }

        let (next, outcome) = newton_nu_step(&nu, value, &derivs.gradient, &derivs.hessian, |cand| {
            objective(&v, cand).ok()
        });
        let dnu = match &outcome {
            StepOutcome::Accepted { value: nv, steepest, .. } => {
                if *steepest {
                    steepest_steps += 1;
                }
                let d = (0..3)
                    .map(|j| (next.as_array()[j] - nu.as_array()[j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / nu.norm();
                nu = next;
                value = *nv;
                d
            }
            StepOutcome::Stationary => 0.0,
            StepOutcome::Failed => {
                trace.push(value);
                message = Some(format!("nu step failed after {MAX_HALVINGS} halvings at iteration {it}"));
                break;
            }
        };
        trace.push(value);
        last_rel = (value - start).abs() / start.abs().max(1.0);
        if last_rel < controls.tol && dnu < controls.tol {
            converged = true;
            break;
        }
    }
    if !converged && message.is_none() {
        message = Some(format!("no convergence within {} outer iterations", controls.max_outer));
    }

    Ok(FittedModel {
        theta: ThetaMatrix::from_vec(&v, spec)?,
        nu,
        spec: spec.clone(),
        noise,
        quad_ridge: controls.quad_ridge,
        response_basis: data.response_basis.clone(),
        predictor: None,
        diagnostics: Diagnostics {
            iterations,
            final_objective: value,
            converged,
            trace,
            rank_deficiency,
            steepest_steps,
            message,
        },
        nullspace: solver.nullspace().cloned(),
    })
}

/// Pooled residual variance of the `Σ = I` fit split evenly between kernel
/// and noise variance, and `ν₂ = 1 / range(t)²`.
fn initial_nu(data: &FitData, v: &DVector<f64>) -> NuParams {
    let resid = residuals(data, v);
    let n = data.total_observations() as f64;
    let rss: f64 = resid.iter().map(|r| r.norm_squared()).sum();
    let mean_sq: f64 = data.groups.iter().map(|g| g.y.norm_squared()).sum::<f64>() / n;
    let s2 = (rss / n).max(1e-12 * (1.0 + mean_sq));
    let range = data.time_range();
    let nu2 = if range > 0.0 { 1.0 / (range * range) } else { 1.0 };
    NuParams {
        nu1: 0.5 * s2,
        nu2,
        nu3: 0.5 * s2,
    }
}

/// Serializable form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub m_x: usize,
    pub m_y: usize,
    pub order: usize,
    pub lambda: f64,
    pub quad_ridge: f64,
    /// Rows of `Ω_x`.
    pub omega_x: Vec<Vec<f64>>,
    /// Rows of `Ω_y`.
    pub omega_y: Vec<Vec<f64>>,
    pub theta_rows: usize,
    pub theta_cols: usize,
    /// `Θ̂` in row-major order.
    pub theta: Vec<f64>,
    pub nu: NuParams,
    pub noise: NoiseParam,
    pub response_basis: BasisConfig,
    pub predictor_basis: Option<BasisConfig>,
    pub predictor_roughness: Option<f64>,
    pub diagnostics: Diagnostics,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("penalty matrix must be square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl FittedModel {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            metadata: BTreeMap::new(),
            m_x: self.spec.m_x,
            m_y: self.spec.m_y,
            order: self.spec.order,
            lambda: self.spec.lambda,
            quad_ridge: self.quad_ridge,
            omega_x: rows_of(&self.spec.omega_x.matrix),
            omega_y: rows_of(&self.spec.omega_y.matrix),
            theta_rows: self.theta.matrix().nrows(),
            theta_cols: self.theta.matrix().ncols(),
            theta: self.theta.row_major(),
            nu: self.nu,
            noise: self.noise,
            response_basis: self.response_basis.config(),
            predictor_basis: self.predictor.as_ref().map(|p| p.basis.config()),
            predictor_roughness: self.predictor.as_ref().and_then(|p| p.roughness),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let omega_x = PenaltyMatrix::from_matrix(from_rows(&doc.omega_x)?)?;
        let omega_y = PenaltyMatrix::from_matrix(from_rows(&doc.omega_y)?)?;
        let spec = QuadraticModelSpec::new(omega_x, omega_y, doc.order, doc.lambda)?;
        if spec.m_x != doc.m_x || spec.m_y != doc.m_y {
            return Err(Error::Dimension("penalty sizes disagree with M_x, M_y".into()));
        }
        if doc.theta.len() != doc.theta_rows * doc.theta_cols
            || doc.theta_rows != doc.m_y
            || doc.theta_cols != n_covariates(doc.m_x, doc.order)
        {
            return Err(Error::Dimension("Theta shape disagrees with the spec".into()));
        }
        let theta = ThetaMatrix::new(
            DMatrix::from_row_slice(doc.theta_rows, doc.theta_cols, &doc.theta),
            doc.m_x,
            doc.order,
        )?;
        let response_basis = Arc::new(doc.response_basis.build()?);
        if response_basis.len() != doc.m_y {
            return Err(Error::Dimension("response basis size disagrees with M_y".into()));
        }
        let predictor = match &doc.predictor_basis {
            Some(cfg) => {
                let b = Arc::new(cfg.build()?);
                if b.len() != doc.m_x {
                    return Err(Error::Dimension("predictor basis size disagrees with M_x".into()));
                }
                Some(PredictorInfo::new(b, doc.predictor_roughness))
            }
            None => None,
        };
        doc.nu.validate()?;
        Ok(FittedModel {
            theta,
            nu: doc.nu,
            spec,
            noise: doc.noise,
            quad_ridge: doc.quad_ridge,
            response_basis,
            predictor,
            diagnostics: doc.diagnostics.clone(),
            nullspace: None,
        })
    }
}
