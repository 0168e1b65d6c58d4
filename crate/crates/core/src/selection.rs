//! Model evaluation and tuning-parameter search.
//!
//! All criteria are evaluated at the fitted `(Θ̂, ν̂)`. The hat-matrix trace
//! is obtained from one factorization of `XᵀΣ⁻¹X + nλΩ`; when that matrix
//! is singular its nullspace is deflated, which yields the pseudo-inverse.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{self, QuadraticModelSpec};
use crate::error::{Error, Result};
use crate::estimator::{
    fit_with_nullspace, loglik_from, normal_equations, nu_derivatives_from, residuals, system_matrix, CovState,
    FitControls, FitData, FittedModel, NormalEquations, ThetaSolver,
};
use crate::gpcov::{NoiseParam, NuParams};
use crate::linalg::{self, Nullspace, PINV_REL_TOL};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gcv,
    Maic,
    Gic,
    Gbic,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Gcv, Criterion::Maic, Criterion::Gic, Criterion::Gbic];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Gcv => "GCV",
            Criterion::Maic => "mAIC",
            Criterion::Gic => "GIC",
            Criterion::Gbic => "GBIC",
        })
    }
}

/// How per-subject scores are combined into `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QForm {
    /// `Q = (1/n) Σ_i s_λ,i s_iᵀ`.
    #[default]
    PerSubject,
    /// `Q = (1/n) (Σ_i s_λ,i)(Σ_i s_i)ᵀ`.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub m_y: usize,
    pub lambda: f64,
    pub df: Option<f64>,
    pub gcv: Option<f64>,
    pub maic: Option<f64>,
    pub gic: Option<f64>,
    pub gbic: Option<f64>,
    pub converged: bool,
    /// Reasons for undefined values or a failed fit.
    pub notes: Vec<String>,
}

impl CriterionReport {
    pub fn value(&self, c: Criterion) -> Option<f64> {
        match c {
            Criterion::Gcv => self.gcv,
            Criterion::Maic => self.maic,
            Criterion::Gic => self.gic,
            Criterion::Gbic => self.gbic,
        }
    }

    fn failed(m_y: usize, lambda: f64, err: &Error) -> Self {
        CriterionReport {
            m_y,
            lambda,
            df: None,
            gcv: None,
            maic: None,
            gic: None,
            gbic: None,
            converged: false,
            notes: vec![err.to_string()],
        }
    }
}

/// `tr S` with `S = X(XᵀΣ⁻¹X + n·pen)⁺XᵀΣ⁻¹`, using `Σ = I` when `nu` is `None`.
pub fn hat_trace(data: &FitData, nu: Option<&NuParams>, noise: NoiseParam, pen: &DMatrix<f64>) -> Result<f64> {
    let cov = nu.map(|nu| CovState::new(data, nu, noise)).transpose()?;
    let ne = normal_equations(data, cov.as_ref());
    let mut solver = ThetaSolver::default();
    Ok(trace_of(&ne, pen, data.n_subjects(), &mut solver))
}

fn trace_of(ne: &NormalEquations, pen: &DMatrix<f64>, n: usize, solver: &mut ThetaSolver) -> f64 {
    let factor = solver.factor(&system_matrix(ne, pen, n));
    factor.solve_matrix(&ne.xtsx).trace()
}

/// Quantities shared by all criteria at `(Θ̂, ν̂)`.
struct Evaluation<'a> {
    data: &'a FitData,
    model: &'a FittedModel,
    cov: CovState,
    ne: NormalEquations,
    pen: DMatrix<f64>,
    nullspace: Nullspace,
    resid: Vec<DMatrix<f64>>,
    loglik: f64,
    df: f64,
}

impl<'a> Evaluation<'a> {
    fn new(model: &'a FittedModel, data: &'a FitData) -> Result<Self> {
        if data.n_covariates() != model.spec.n_covariates() || data.m_y() != model.spec.m_y {
            return Err(Error::Dimension("model and data disagree in P or M_y".into()));
        }
        let n = data.n_subjects();
        let cov = CovState::new(data, &model.nu, model.noise)?;
        let ne = normal_equations(data, Some(&cov));
        let pen = model.penalty()?.matrix();
        let mut solver = ThetaSolver::with_nullspace(model.nullspace.clone());
        let df = trace_of(&ne, &pen, n, &mut solver);
        let nullspace = solver
            .nullspace()
            .cloned()
            .unwrap_or_else(|| Nullspace::empty(data.n_params()));
        let v = model.theta.vec();
        let resid = residuals(data, &v);
        let loglik = loglik_from(data, &cov, &resid);
        Ok(Evaluation {
            data,
            model,
            cov,
            ne,
            pen,
            nullspace,
            resid,
            loglik,
            df,
        })
    }

    fn rss(&self) -> f64 {
        self.resid.iter().map(|r| r.norm_squared()).sum()
    }

    fn gcv(&self) -> Result<f64> {
        let n = self.data.total_observations() as f64;
        if self.df + 3.0 >= n {
            return Err(Error::UndefinedCriterion {
                criterion: "GCV".into(),
                reason: format!("df + 3 = {} is not below the {} observations", self.df + 3.0, n),
            });
        }
        let denom = 1.0 - (self.df + 3.0) / n;
        Ok(self.rss() / n / (denom * denom))
    }

    fn maic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * (self.df + 3.0)
    }

    fn information(&self, q_form: QForm) -> InformationMatrices {
        let data = self.data;
        let n = data.n_subjects();
        let nf = n as f64;
        let d = data.n_params();
        let m_y = data.m_y();
        let dim = d + 3;
        let v = self.model.theta.vec();
        let pen_v = &self.pen * &v;

        let mut r = DMatrix::zeros(dim, dim);
        let mut a = &self.ne.xtsx + &self.pen * nf;
        crate::linalg::symmetrize(&mut a);
        r.view_mut((0, 0), (d, d)).copy_from(&(a / nf));

        let derivs = nu_derivatives_from(data, &self.cov, &self.resid);
        r.view_mut((d, d), (3, 3)).copy_from(&(-&derivs.hessian / nf));

        // per-subject scores s_i (columns) and the cross block of R
        let mut scores = DMatrix::zeros(dim, n);
        let mut cross = DMatrix::zeros(d, 3);
        for (gi, g) in data.groups().iter().enumerate() {
            let b = &self.cov.bundles[gi];
            let alpha = b.chol.solve(&self.resid[gi]);
            let sinv = b.inverse();
            let psi_alpha = g.psi.tr_mul(&alpha);
            for j in 0..3 {
                let dj = &b.derivs.first[j];
                let dja = dj * &alpha;
                let w = g.psi.tr_mul(&b.chol.solve(&dja)) * &g.z;
                let mut col = cross.column_mut(j);
                col += DVector::from_column_slice(w.as_slice());
                let tr = (&sinv * dj).trace();
                for (c, &i) in g.members.iter().enumerate() {
                    scores[(d + j, i)] = 0.5 * (alpha.column(c).dot(&dja.column(c)) - tr);
                }
            }
            for (c, &i) in g.members.iter().enumerate() {
                for k in 0..data.n_covariates() {
                    let zk = g.z[(c, k)];
                    for l in 0..m_y {
                        scores[(k * m_y + l, i)] = zk * psi_alpha[(l, c)];
                    }
                }
            }
        }
        r.view_mut((0, d), (d, 3)).copy_from(&(&cross / nf));
        r.view_mut((d, 0), (3, d)).copy_from(&(cross.transpose() / nf));

        let mut pscores = scores.clone();
        for i in 0..n {
            let mut col = pscores.view_mut((0, i), (d, 1));
            col -= &pen_v;
        }
        let q = match q_form {
            QForm::PerSubject => &pscores * scores.transpose() / nf,
            QForm::Pooled => {
                let ps = pscores.column_sum();
                let s = scores.column_sum();
                ps * s.transpose() / nf
            }
        };
        InformationMatrices {
            r,
            q,
            nullspace: self.nullspace.clone(),
        }
    }

    fn gbic(&self, info: &InformationMatrices) -> Result<f64> {
        let spec = &self.model.spec;
        let lambda = spec.lambda;
        if lambda <= 0.0 {
            return Err(Error::UndefinedCriterion {
                criterion: "GBIC".into(),
                reason: "log(lambda) is undefined at lambda = 0; use a grid of positive lambda".into(),
            });
        }
        let eig = design::penalty_eigenvalues(spec);
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let kept: Vec<f64> = eig.into_iter().filter(|&e| max > 0.0 && e > PINV_REL_TOL * max).collect();
        let eta = spec.n_params() as f64;
        let zeta = kept.len() as f64;
        let log_omega: f64 = kept.iter().map(|e| e.ln()).sum();
        let n = self.data.n_subjects() as f64;
        let v = self.model.theta.vec();
        let pen = lambda * v.dot(&(design::build_penalty(spec)? * &v));
        let log_r = info.log_abs_det()?;
        Ok(-2.0 * self.loglik + n * pen - (eta - zeta) * lambda.ln() + zeta * n.ln() + log_r - log_omega - zeta * LN_2PI)
    }
}

/// `R` (negative scaled Hessian of `ℓ_λ`) and `Q` (score outer products)
/// over `ξ = (vec Θ, ν)`.
#[derive(Debug, Clone)]
pub struct InformationMatrices {
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Unidentified directions of `vec Θ`, shared by `R`'s nullspace.
    pub nullspace: Nullspace,
}

impl InformationMatrices {
    fn deflated_r(&self) -> DMatrix<f64> {
        let mut r = self.r.clone();
        let k = self.nullspace.dim();
        if k > 0 {
            let nb = self.nullspace.basis();
            let d = nb.nrows();
            let mut block = r.view_mut((0, 0), (d, d));
            block += nb * nb.transpose();
        }
        r
    }

    /// Eigen-decomposition of the Jacobi-scaled deflated `R`, with the
    /// scale and the indices of the retained eigenvalues.
    fn scaled_spectrum(&self) -> Result<(SymmetricEigen<f64, Dyn>, DVector<f64>, Vec<usize>)> {
        let r = self.deflated_r();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllConditioned { min_eigenvalue: f64::NAN });
        }
        let s = linalg::jacobi_scale(&r);
        let eig = SymmetricEigen::new(linalg::scaled(&r, &s));
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let kept: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&k| eig.eigenvalues[k].abs() > PINV_REL_TOL * top)
            .collect();
        if kept.is_empty() {
            return Err(Error::IllConditioned { min_eigenvalue: 0.0 });
        }
        Ok((eig, s, kept))
    }

    /// `tr(R⁺Q)`, with numerically null directions of `R` dropped.
    pub fn trace_r_inv_q(&self) -> Result<f64> {
        let (eig, s, kept) = self.scaled_spectrum()?;
        // tr(R⁻¹Q) = tr((DRD)⁻¹ DQD)
        let q = linalg::scaled(&self.q, &s);
        Ok(kept
            .iter()
            .map(|&k| {
                let v = eig.eigenvectors.column(k);
                v.dot(&(&q * v)) / eig.eigenvalues[k]
            })
            .sum())
    }

    /// `log |R|₊` over the identified directions.
    pub fn log_abs_det(&self) -> Result<f64> {
        let (eig, s, kept) = self.scaled_spectrum()?;
        let log_scale: f64 = s.iter().map(|d| d.ln()).sum();
        Ok(kept.iter().map(|&k| eig.eigenvalues[k].abs().ln()).sum::<f64>() - 2.0 * log_scale)
    }
}

/// `tr(R⁺Q)` for explicit matrices whose nullspace is trivial.
pub fn trace_r_inv_q(r: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    InformationMatrices {
        r: r.clone(),
        q: q.clone(),
        nullspace: Nullspace::empty(r.nrows()),
    }
    .trace_r_inv_q()
}

pub fn effective_df(model: &FittedModel, data: &FitData) -> Result<f64> {
    Ok(Evaluation::new(model, data)?.df)
}

pub fn gcv(model: &FittedModel, data: &FitData) -> Result<f64> {
    Evaluation::new(model, data)?.gcv()
}

pub fn maic(model: &FittedModel, data: &FitData) -> Result<f64> {
    Ok(Evaluation::new(model, data)?.maic())
}

pub fn information_matrices(model: &FittedModel, data: &FitData, q_form: QForm) -> Result<InformationMatrices> {
    Ok(Evaluation::new(model, data)?.information(q_form))
}

pub fn gic(model: &FittedModel, data: &FitData, q_form: QForm) -> Result<f64> {
    let ev = Evaluation::new(model, data)?;
    let info = ev.information(q_form);
    Ok(-2.0 * ev.loglik + 2.0 * info.trace_r_inv_q()?)
}

pub fn gbic(model: &FittedModel, data: &FitData) -> Result<f64> {
    let ev = Evaluation::new(model, data)?;
    let info = ev.information(QForm::PerSubject);
    ev.gbic(&info)
}

/// All four criteria. Undefined values are `None` with the reason in `notes`.
pub fn evaluate(model: &FittedModel, data: &FitData, q_form: QForm) -> Result<CriterionReport> {
    let ev = Evaluation::new(model, data)?;
    let mut notes = Vec::new();
    if let Some(m) = &model.diagnostics.message {
        notes.push(m.clone());
    }
    let mut keep = |r: Result<f64>| match r {
        Ok(v) if v.is_finite() => Some(v),
        Ok(v) => {
            notes.push(format!("non-finite criterion value {v}"));
            None
        }
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let gcv = keep(ev.gcv());
    let maic = keep(Ok(ev.maic()));
    let info = ev.information(q_form);
    let gic = keep(info.trace_r_inv_q().map(|t| -2.0 * ev.loglik + 2.0 * t));
    let gbic = keep(ev.gbic(&info));
    Ok(CriterionReport {
        m_y: model.spec.m_y,
        lambda: model.spec.lambda,
        df: Some(ev.df),
        gcv,
        maic,
        gic,
        gbic,
        converged: model.converged(),
        notes,
    })
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub criterion: Criterion,
    pub best: FittedModel,
    pub best_index: usize,
    /// One row per `(M_y, λ)`, `M_y`-major in grid order.
    pub table: Vec<CriterionReport>,
}

/// Fit every `(M_y, λ)` grid point and return the argmin of `criterion`.
///
/// `make_data(M_y)` supplies the data and a model template for one
/// response basis size; its `λ` is overwritten by the grid. Different
/// `M_y` run in parallel, and within one `M_y` the `λ` grid is walked in
/// order with `ν` warm-started from the previous converged fit.
pub fn select<F>(
    make_data: F,
    m_y_grid: &[usize],
    lambdas: &[f64],
    criterion: Criterion,
    controls: &FitControls,
    q_form: QForm,
) -> Result<SelectionOutcome>
where
    F: Fn(usize) -> Result<(FitData, QuadraticModelSpec)> + Sync,
{
    if m_y_grid.is_empty() || lambdas.is_empty() {
        return Err(Error::Validation("selection grids must be non-empty".into()));
    }
    let per_m: Vec<Vec<(CriterionReport, Option<FittedModel>)>> = m_y_grid
        .par_iter()
        .map(|&m_y| {
            let (data, template) = match make_data(m_y) {
                Ok(x) => x,
                Err(e) => {
                    return lambdas
                        .iter()
                        .map(|&l| (CriterionReport::failed(m_y, l, &e), None))
                        .collect();
                }
            };
            let mut ctl = controls.clone();
            let mut rows = Vec::with_capacity(lambdas.len());
            for &lambda in lambdas {
                let spec = template.with_lambda(lambda);
                let res = fit_with_nullspace(&data, &spec, &ctl, None)
                    .and_then(|m| evaluate(&m, &data, q_form).map(|r| (r, m)));
                match res {
                    Ok((report, model)) => {
                        if model.converged() {
                            ctl.nu_init = Some(model.nu);
                        }
                        rows.push((report, Some(model)));
                    }
                    Err(e) => rows.push((CriterionReport::failed(m_y, lambda, &e), None)),
                }
            }
            rows
        })
        .collect();

    let mut table = Vec::new();
    let mut models = Vec::new();
    for (report, model) in per_m.into_iter().flatten() {
        table.push(report);
        models.push(model);
    }
    if models.iter().all(|m| m.is_none()) {
        return Err(Error::AllFitsFailed(
            table.iter().flat_map(|r| r.notes.iter().cloned()).collect::<Vec<_>>().join("; "),
        ));
    }
    let best_index = argmin(&table, criterion).ok_or_else(|| Error::UndefinedCriterion {
        criterion: criterion.to_string(),
        reason: "undefined at every grid point".into(),
    })?;
    let best = models[best_index].take().expect("defined criterion implies a fitted model");
    Ok(SelectionOutcome {
        criterion,
        best,
        best_index,
        table,
    })
}

/// First row with the smallest defined value of `criterion`.
pub fn argmin(table: &[CriterionReport], criterion: Criterion) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in table.iter().enumerate() {
        if let Some(v) = r.value(criterion) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Whether exactly one row attains the minimum of `criterion`.
pub fn has_unique_minimum(table: &[CriterionReport], criterion: Criterion) -> bool {
    match argmin(table, criterion) {
        None => false,
        Some(i) => {
            let m = table[i].value(criterion).unwrap();
            table.iter().filter(|r| r.value(criterion) == Some(m)).count() == 1
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Write the selection table as CSV: `M_y,lambda,df,GCV,mAIC,GIC,GBIC,converged`.
pub fn write_selection_csv<W: Write>(out: W, table: &[CriterionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["M_y", "lambda", "df", "GCV", "mAIC", "GIC", "GBIC", "converged"])?;
    for r in table {
        w.write_record([
            r.m_y.to_string(),
            r.lambda.to_string(),
            fmt_opt(r.df),
            fmt_opt(r.gcv),
            fmt_opt(r.maic),
            fmt_opt(r.gic),
            fmt_opt(r.gbic),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSystem;
    use crate::design::{build_covariate, n_covariates, ThetaMatrix};
    use crate::estimator::fit;
    use crate::gpcov::sigma_matrix;
    use crate::linalg::pinv_symmetric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn synthetic(seed: u64, n: usize, nt: usize, m_x: usize, m_y: usize, irregular: bool) -> FitData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Arc::new(BasisSystem::bspline(m_y, 0.0, 1.0, 3.min(m_y - 1)).unwrap());
        let p = n_covariates(m_x, 2);
        let theta = DMatrix::from_fn(m_y, p, |_, _| rng.random_range(-1.0..1.0));
        let noise = NuParams::new(0.2, 15.0, 0.05).unwrap();
        let mut z = Vec::new();
        let mut t = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let w = DVector::from_fn(m_x, |_, _| rng.random_range(-1.0..1.0));
            let zi = build_covariate(&w, &DMatrix::identity(m_x, m_x), 2).unwrap();
            let ti: Vec<f64> = if irregular {
                let mut v: Vec<f64> = (0..nt).map(|_| rng.random_range(0.0..1.0)).collect();
                v.sort_by(f64::total_cmp);
                v
            } else {
                design::linspace(0.0, 1.0, nt)
            };
            let psi = basis.design_matrix(&ti).unwrap();
            let l = sigma_matrix(&ti, &noise, NoiseParam::Variance).cholesky().unwrap().l();
            let e = l * DVector::from_fn(nt, |_, _| rng.sample::<f64, _>(StandardNormal));
            y.push(psi * &theta * &zi + e);
            z.push(zi);
            t.push(ti);
        }
        FitData::new(z, t, y, basis).unwrap()
    }

    fn dense_hat_trace(data: &FitData, nu: &NuParams, pen: &DMatrix<f64>) -> f64 {
        let d = data.n_params();
        let n = data.n_subjects();
        let mut a = pen * n as f64;
        let mut blocks = Vec::new();
        for i in 0..n {
            let x = data.design_block(i);
            let sinv = sigma_matrix(data.times(i), nu, NoiseParam::Variance).try_inverse().unwrap();
            a += x.transpose() * &sinv * &x;
            blocks.push((x, sinv));
        }
        let ap = pinv_symmetric(&a, 1e-10);
        let mut tr = 0.0;
        for (x, sinv) in &blocks {
            // diagonal block of S for subject i
            tr += (x * &ap * x.transpose() * sinv).trace();
        }
        assert_eq!(ap.nrows(), d);
        tr
    }

    #[test]
    fn hat_trace_matches_dense_oracle() {
        for (seed, irregular, lambda) in [(1, false, 0.0), (2, true, 1e-3), (3, true, 0.5)] {
            let data = synthetic(seed, 12, 9, 2, 4, irregular);
            let spec = QuadraticModelSpec::with_difference_penalties(2, 4, 2, 2, lambda).unwrap();
            let pen = design::build_penalty(&spec).unwrap() * lambda;
            let nu = NuParams::new(0.4, 10.0, 0.2).unwrap();
            let fast = hat_trace(&data, Some(&nu), NoiseParam::Variance, &pen).unwrap();
            let dense = dense_hat_trace(&data, &nu, &pen);
            assert!((fast - dense).abs() < 1e-8, "{fast} vs {dense}");
        }
    }

    #[test]
    fn df_full_rank_equals_parameter_count() {
        // with one predictor basis function the quadratic design has full column rank
        let data = synthetic(4, 30, 12, 1, 4, false);
        let p = n_covariates(1, 2);
        let fast = hat_trace(&data, None, NoiseParam::Variance, &DMatrix::zeros(p * 4, p * 4)).unwrap();
        assert!((fast - (p * 4) as f64).abs() < 1e-6);
    }

    #[test]
    fn df_decreases_in_lambda() {
        let data = synthetic(5, 30, 12, 1, 5, false);
        let spec = QuadraticModelSpec::with_difference_penalties(1, 5, 2, 2, 1.0).unwrap();
        let omega = design::build_penalty(&spec).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let lambda = 10f64.powf(-4.0 + k as f64);
            let df = hat_trace(&data, None, NoiseParam::Variance, &(&omega * lambda)).unwrap();
            assert!(df < prev);
            prev = df;
        }
    }

    fn fitted(seed: u64, lambda: f64) -> (FittedModel, FitData) {
        let data = synthetic(seed, 10, 8, 3, 3, true);
        let spec = QuadraticModelSpec::with_difference_penalties(3, 3, 2, 2, lambda).unwrap();
        let model = fit(&data, &spec, &FitControls::default()).unwrap();
        (model, data)
    }

    #[test]
    fn gcv_and_maic_recompute() {
        let (model, data) = fitted(6, 1e-2);
        let df = effective_df(&model, &data).unwrap();
        let fitted_vals = model.fitted_values(&data);
        let mut rss = 0.0;
        let mut ll = 0.0;
        let mut nobs = 0.0;
        for i in 0..data.n_subjects() {
            let r = data.y(i) - &fitted_vals[i];
            rss += r.norm_squared();
            nobs += r.len() as f64;
            let s = sigma_matrix(data.times(i), &model.nu, NoiseParam::Variance);
            ll += -0.5 * r.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * s.determinant().ln()
                - 0.5 * (r.transpose() * s.try_inverse().unwrap() * &r)[(0, 0)];
        }
        let g = rss / nobs / (1.0 - (df + 3.0) / nobs).powi(2);
        assert!((gcv(&model, &data).unwrap() - g).abs() < 1e-10 * g);
        let m = -2.0 * ll + 2.0 * (df + 3.0);
        assert!((maic(&model, &data).unwrap() - m).abs() < 1e-8 * m.abs());
    }

    #[test]
    fn gcv_zero_for_perfect_fit_and_undefined_when_saturated() {
        let data = synthetic(7, 6, 10, 1, 3, false);
        let spec = QuadraticModelSpec::with_difference_penalties(1, 3, 2, 2, 0.0).unwrap();
        let mut model = fit(&data, &spec, &FitControls::default()).unwrap();
        let exact = FitData::new(
            (0..6).map(|i| data.z(i)).collect(),
            (0..6).map(|i| data.times(i).to_vec()).collect(),
            model.fitted_values(&data),
            data.response_basis().clone(),
        )
        .unwrap();
        assert!(gcv(&model, &exact).unwrap() < 1e-20);
        // 2 observations per subject, 9 parameters: df + 3 exceeds N
        let tiny = FitData::new(
            (0..3).map(|i| data.z(i)).collect(),
            (0..3).map(|_| vec![0.2, 0.7]).collect(),
            (0..3).map(|_| DVector::from_vec(vec![1.0, 2.0])).collect(),
            data.response_basis().clone(),
        )
        .unwrap();
        model.nullspace = None;
        assert!(matches!(gcv(&model, &tiny), Err(Error::UndefinedCriterion { .. })));
    }

    #[test]
    fn gic_penalty_is_twice_dimension_when_q_equals_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let r = &a * a.transpose() + DMatrix::identity(6, 6);
        assert!((2.0 * trace_r_inv_q(&r, &r).unwrap() - 12.0).abs() < 1e-10);
    }

    #[test]
    fn r_theta_block_is_scaled_system_matrix() {
        let (model, data) = fitted(9, 1e-2);
        let info = information_matrices(&model, &data, QForm::PerSubject).unwrap();
        let n = data.n_subjects() as f64;
        let d = data.n_params();
        let mut a = model.penalty().unwrap().matrix() * n;
        for i in 0..data.n_subjects() {
            let x = data.design_block(i);
            let sinv = sigma_matrix(data.times(i), &model.nu, NoiseParam::Variance).try_inverse().unwrap();
            a += x.transpose() * sinv * x;
        }
        let block = info.r.view((0, 0), (d, d)).into_owned();
        assert!((block - a / n).amax() < 1e-10);
        assert!(crate::linalg::asymmetry(&info.r) < 1e-8);
    }

    /// `−(1/n)∂²ℓ_λ/∂ξ∂ξᵀ` by central differences of `ℓ_λ`.
    fn fd_r(model: &FittedModel, data: &FitData) -> DMatrix<f64> {
        let d = data.n_params();
        let n = data.n_subjects() as f64;
        let spec = &model.spec;
        let omega = design::build_penalty(spec).unwrap();
        let f = |x: &DVector<f64>| {
            let theta = ThetaMatrix::from_vec(&x.rows(0, d).into_owned(), spec).unwrap();
            let nu = NuParams::new(x[d], x[d + 1], x[d + 2]).unwrap();
            crate::estimator::penalized_log_likelihood(&theta, &nu, data, spec.lambda, &omega, NoiseParam::Variance)
                .unwrap()
        };
        let mut x0 = model.theta.vec().as_slice().to_vec();
        x0.extend(model.nu.as_array());
        let x0 = DVector::from_vec(x0);
        let dim = d + 3;
        let h: Vec<f64> = (0..dim).map(|i| if i < d { 1e-4 * x0[i].abs().max(1e-2) } else { 1e-4 * x0[i] }).collect();
        let mut out = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let mut pp = x0.clone();
                let mut pm = x0.clone();
                let mut mp = x0.clone();
                let mut mm = x0.clone();
                pp[i] += h[i];
                pp[j] += h[j];
                pm[i] += h[i];
                pm[j] -= h[j];
                mp[i] -= h[i];
                mp[j] += h[j];
                mm[i] -= h[i];
                mm[j] -= h[j];
                let v = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h[i] * h[j]);
                out[(i, j)] = -v / n;
                out[(j, i)] = -v / n;
            }
        }
        out
    }

    #[test]
    fn r_matches_finite_difference_hessian() {
        // ν̂ can sit on the boundary for ten subjects; the identity is checked at an interior ν
        let (mut model, data) = fitted(10, 1e-2);
        model.nu = NuParams::new(0.2, 15.0, 0.05).unwrap();
        let info = information_matrices(&model, &data, QForm::PerSubject).unwrap();
        let fd = fd_r(&model, &data);
        let d = data.n_params();
        // cross block: differences of the explicit Θ-score in ν
        let score = |nu: &NuParams| {
            let mut g = DVector::zeros(d);
            for i in 0..data.n_subjects() {
                let x = data.design_block(i);
                let sinv = sigma_matrix(data.times(i), nu, NoiseParam::Variance).try_inverse().unwrap();
                g += x.transpose() * sinv * (data.y(i) - &x * model.theta.vec());
            }
            g
        };
        let mut cross = DMatrix::zeros(d, 3);
        for j in 0..3 {
            let h = 1e-3 * model.nu.as_array()[j];
            let mut up = model.nu.as_array();
            let mut dn = model.nu.as_array();
            up[j] += h;
            dn[j] -= h;
            let col = (score(&NuParams::from_array(up)) - score(&NuParams::from_array(dn))) / (2.0 * h);
            cross.set_column(j, &(-col / data.n_subjects() as f64));
        }
        let a = info.r.view((0, d), (d, 3)).into_owned();
        assert!((&a - &cross).norm() / cross.norm() < 1e-4);
        for (r0, c0, nr, nc) in [(0, 0, d, d), (d, d, 3, 3)] {
            let a = info.r.view((r0, c0), (nr, nc)).into_owned();
            let b = fd.view((r0, c0), (nr, nc)).into_owned();
            let rel = (&a - &b).norm() / b.norm();
            assert!(rel < 1e-4, "block ({r0},{c0}) rel err {rel}");
        }
    }

    #[test]
    fn q_per_subject_matches_explicit_scores() {
        let (model, data) = fitted(11, 1e-2);
        let info = information_matrices(&model, &data, QForm::PerSubject).unwrap();
        let n = data.n_subjects();
        let d = data.n_params();
        let pen_v = model.penalty().unwrap().matrix() * model.theta.vec();
        let mut q = DMatrix::zeros(d + 3, d + 3);
        for i in 0..n {
            let x = data.design_block(i);
            let b = crate::gpcov::cov_matrix(data.times(i), &model.nu, NoiseParam::Variance).unwrap();
            let sinv = b.inverse();
            let r = data.y(i) - &x * model.theta.vec();
            let alpha = &sinv * r;
            let mut s = DVector::zeros(d + 3);
            s.rows_mut(0, d).copy_from(&(x.transpose() * &alpha));
            for j in 0..3 {
                let dj = &b.derivs.first[j];
                s[d + j] = 0.5 * ((alpha.transpose() * dj * &alpha)[(0, 0)] - (&sinv * dj).trace());
            }
            let mut sl = s.clone();
            let mut head = sl.rows_mut(0, d);
            head -= &pen_v;
            q += sl * s.transpose();
        }
        q /= n as f64;
        assert!((info.q - q).amax() < 1e-9);
    }

    #[test]
    fn gbic_requires_positive_lambda() {
        let (model, data) = fitted(12, 0.0);
        assert!(matches!(gbic(&model, &data), Err(Error::UndefinedCriterion { .. })));
        let report = evaluate(&model, &data, QForm::PerSubject).unwrap();
        assert!(report.gbic.is_none());
        assert!(report.maic.is_some());
    }

    #[test]
    fn criteria_reproducible() {
        let (m1, d1) = fitted(13, 1e-3);
        let (m2, d2) = fitted(13, 1e-3);
        let r1 = evaluate(&m1, &d1, QForm::PerSubject).unwrap();
        let r2 = evaluate(&m2, &d2, QForm::PerSubject).unwrap();
        assert_eq!(r1, r2);
        for c in Criterion::ALL {
            assert!(r1.value(c).is_some_and(f64::is_finite), "{c}: {:?}", r1.notes);
        }
    }

    #[test]
    fn select_single_point_and_grid() {
        let make = |m_y: usize| -> Result<(FitData, QuadraticModelSpec)> {
            let data = synthetic(14, 20, 10, 2, m_y, false);
            Ok((data, QuadraticModelSpec::with_difference_penalties(2, m_y, 2, 2, 0.0)?))
        };
        let one = select(make, &[4], &[1e-3], Criterion::Gic, &FitControls::default(), QForm::PerSubject).unwrap();
        assert_eq!(one.table.len(), 1);
        assert_eq!(one.best_index, 0);
        assert_eq!(one.best.spec.lambda, 1e-3);

        let grid = select(
            make,
            &[4, 5],
            &[1e-6, 1e-4, 1e-2, 1.0],
            Criterion::Gic,
            &FitControls::default(),
            QForm::PerSubject,
        )
        .unwrap();
        assert_eq!(grid.table.len(), 8);
        let best = &grid.table[grid.best_index];
        assert_eq!(best.m_y, grid.best.spec.m_y);
        assert_eq!(best.lambda, grid.best.spec.lambda);
        for r in &grid.table {
            assert!(r.gic.unwrap() >= best.gic.unwrap());
        }
        let mut buf = Vec::new();
        write_selection_csv(&mut buf, &grid.table).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("M_y,lambda,df,GCV,mAIC,GIC,GBIC,converged"));
    }

    #[test]
    fn select_with_zero_lambda_marks_gbic_undefined() {
        let make = |m_y: usize| -> Result<(FitData, QuadraticModelSpec)> {
            Ok((synthetic(15, 15, 10, 1, m_y, false), QuadraticModelSpec::with_difference_penalties(1, m_y, 2, 2, 0.0)?))
        };
        let out = select(make, &[4], &[0.0, 1e-3], Criterion::Gbic, &FitControls::default(), QForm::PerSubject).unwrap();
        assert!(out.table[0].gbic.is_none());
        assert!(out.table[0].notes.iter().any(|n| n.contains("lambda")));
        assert_eq!(out.best_index, 1);
    }

    #[test]
    fn unique_minimum_detection() {
        let row = |v: f64| CriterionReport {
            m_y: 4,
            lambda: 1.0,
            df: Some(1.0),
            gcv: Some(v),
            maic: None,
            gic: None,
            gbic: None,
            converged: true,
            notes: vec![],
        };
        assert!(has_unique_minimum(&[row(2.0), row(1.0), row(3.0)], Criterion::Gcv));
        assert!(!has_unique_minimum(&[row(1.0), row(1.0)], Criterion::Gcv));
        assert!(!has_unique_minimum(&[row(1.0)], Criterion::Maic));
    }
}
