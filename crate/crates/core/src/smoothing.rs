//! Longitudinal observations and their conversion into basis coefficients
//! by penalized least squares with a second-difference roughness penalty.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{difference_penalty, BasisSystem, DOMAIN_TOL};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-subject irregular time grids with observed values for one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub variable: String,
    pub domain: (f64, f64),
    pub subjects: Vec<SubjectSeries>,
}

impl LongitudinalDataset {
    pub fn new(variable: impl Into<String>, domain: (f64, f64), subjects: Vec<SubjectSeries>) -> Result<Self> {
        let ds = LongitudinalDataset {
            variable: variable.into(),
            domain,
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (lo, hi) = self.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Validation(format!("invalid domain [{lo}, {hi}]")));
        }
        for s in &self.subjects {
            if s.times.len() != s.values.len() {
                return Err(Error::Dimension(format!(
                    "subject {}: {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.times.len() < 2 {
                return Err(Error::Validation(format!(
                    "subject {} has fewer than 2 observations",
                    s.id
                )));
            }
            if s.times.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Validation(format!(
                    "subject {}: times must be strictly increasing",
                    s.id
                )));
            }
            if s.values.iter().chain(&s.times).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("subject {}: non-finite entry", s.id)));
            }
            if s.times[0] < lo - DOMAIN_TOL || *s.times.last().unwrap() > hi + DOMAIN_TOL {
                return Err(Error::Domain {
                    t: if s.times[0] < lo { s.times[0] } else { *s.times.last().unwrap() },
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Apply an affine map to every time point and to the domain.
    pub fn rescale_times(&self, from: (f64, f64), to: (f64, f64)) -> Result<Self> {
        let scale = (to.1 - to.0) / (from.1 - from.0);
        let map = |t: f64| to.0 + (t - from.0) * scale;
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectSeries {
                id: s.id.clone(),
                times: s.times.iter().map(|&t| map(t)).collect(),
                values: s.values.clone(),
            })
            .collect();
        Self::new(self.variable.clone(), to, subjects)
    }

    /// Read long-format CSV with columns `subject_id,time,value`.
    ///
    /// Subjects keep their order of first appearance and each subject's rows
    /// are sorted by time. Without an explicit `domain` the observed time
    /// range is used.
    pub fn from_csv_reader<R: Read>(reader: R, variable: &str, domain: Option<(f64, f64)>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().all(|h| h.is_empty()) {
            return Err(Error::EmptyDataset);
        }
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Validation(format!("missing column `{name}`")))
        };
        let (ci, ct, cv) = (col("subject_id")?, col("time")?, col("value")?);
        let mut order: Vec<String> = Vec::new();
        let mut rows: std::collections::HashMap<String, Vec<(f64, f64)>> = Default::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("row {}: {e}", line + 2)))
            };
            let id = rec.get(ci).unwrap_or("").to_string();
            let (t, v) = (parse(ct)?, parse(cv)?);
            rows.entry(id.clone())
                .or_insert_with(|| {
                    order.push(id.clone());
                    Vec::new()
                })
                .push((t, v));
        }
        if order.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut subjects = Vec::with_capacity(order.len());
        let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for id in order {
            let mut obs = rows.remove(&id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            tmin = tmin.min(obs[0].0);
            tmax = tmax.max(obs[obs.len() - 1].0);
            subjects.push(SubjectSeries {
                id,
                times: obs.iter().map(|o| o.0).collect(),
                values: obs.iter().map(|o| o.1).collect(),
            });
        }
        Self::new(variable, domain.unwrap_or((tmin, tmax)), subjects)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, variable: &str, domain: Option<(f64, f64)>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Validation(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv_reader(file, variable, domain)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "time", "value"])?;
        for s in &self.subjects {
            for (t, v) in s.times.iter().zip(&s.values) {
                w.write_record([s.id.clone(), t.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// One subject's curve as coefficients against a shared basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalCurve {
    pub coefficients: DVector<f64>,
    pub basis: Arc<BasisSystem>,
}

impl FunctionalCurve {
    pub fn new(coefficients: DVector<f64>, basis: Arc<BasisSystem>) -> Result<Self> {
        if coefficients.len() != basis.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of size {}",
                coefficients.len(),
                basis.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite curve coefficient".into()));
        }
        Ok(FunctionalCurve { coefficients, basis })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        eval_curve(self, t)
    }
}

/// `wᵀφ(t)`.
pub fn eval_curve(c: &FunctionalCurve, t: f64) -> Result<f64> {
    Ok(c.basis.eval(t)?.dot(&c.coefficients))
}

/// Default log-spaced roughness grid `1e-8, 1e-7, …, 1e2`.
pub fn default_roughness_grid() -> Vec<f64> {
    (-8..=2).map(|e| 10f64.powi(e)).collect()
}

/// Penalized least-squares smoother for one basis.
#[derive(Debug, Clone)]
pub struct Smoother {
    basis: Arc<BasisSystem>,
    penalty: DMatrix<f64>,
}

/// Result of smoothing one series.
#[derive(Debug, Clone)]
pub struct SmoothFit {
    pub coefficients: DVector<f64>,
    pub hat_trace: f64,
    pub rss: f64,
}

impl Smoother {
    pub fn new(basis: Arc<BasisSystem>) -> Self {
        let m = basis.len();
        let penalty = if m > 2 {
            difference_penalty(m, 2).expect("m > 2").matrix
        } else {
            DMatrix::zeros(m, m)
        };
        Smoother { basis, penalty }
    }

    pub fn basis(&self) -> &Arc<BasisSystem> {
        &self.basis
    }

    pub fn fit(&self, times: &[f64], values: &[f64], roughness: f64) -> Result<SmoothFit> {
        if times.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if !(roughness >= 0.0 && roughness.is_finite()) {
            return Err(Error::Validation(format!("roughness must be >= 0, got {roughness}")));
        }
        let m = self.basis.len();
        if roughness == 0.0 && times.len() < m {
            return Err(Error::RankDeficient(format!(
                "{} observations for {m} basis functions at zero roughness",
                times.len()
            )));
        }
        let bmat = self.basis.design_matrix(times)?;
        let y = DVector::from_column_slice(values);
        let btb = bmat.tr_mul(&bmat);
        let lhs = &btb + &self.penalty * roughness;
        let chol = nalgebra::Cholesky::new(lhs.clone()).ok_or_else(|| {
            if roughness == 0.0 {
                Error::RankDeficient("singular normal equations".into())
            } else {
                Error::IllConditioned {
                    min_eigenvalue: linalg::min_eigenvalue(&lhs),
                }
            }
        })?;
        let w = chol.solve(&bmat.tr_mul(&y));
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient("non-finite smoothing coefficients".into()));
        }
        let hat_trace = chol.solve(&btb).trace();
        let rss = (y - &bmat * &w).norm_squared();
        Ok(SmoothFit {
            coefficients: w,
            hat_trace,
            rss,
        })
    }
}

/// Solve `(BᵀB + roughness·DᵀD) w = Bᵀ values` with the order-2 penalty.
pub fn smooth_curve(
    times: &[f64],
    values: &[f64],
    basis: &Arc<BasisSystem>,
    roughness: f64,
) -> Result<FunctionalCurve> {
    let fit = Smoother::new(basis.clone()).fit(times, values, roughness)?;
    FunctionalCurve::new(fit.coefficients, basis.clone())
}

/// Pooled GCV score `N·RSS / (N − tr H)²` over all subjects.
pub fn pooled_gcv(smoother: &Smoother, data: &LongitudinalDataset, roughness: f64) -> Result<f64> {
    let fits: Vec<SmoothFit> = data
        .subjects
        .par_iter()
        .map(|s| smoother.fit(&s.times, &s.values, roughness))
        .collect::<Result<_>>()?;
    let n = data.total_observations() as f64;
    let rss: f64 = fits.iter().map(|f| f.rss).sum();
    let tr: f64 = fits.iter().map(|f| f.hat_trace).sum();
    if tr >= n {
        return Ok(f64::INFINITY);
    }
    Ok(n * rss / (n - tr).powi(2))
}

/// Roughness minimizing pooled GCV over `grid`; grid points that cannot be
/// fitted are skipped.
pub fn select_roughness(smoother: &Smoother, data: &LongitudinalDataset, grid: &[f64]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &r in grid {
        if let Ok(score) = pooled_gcv(smoother, data, r) {
            if score.is_finite() && best.is_none_or(|(_, s)| score < s) {
                best = Some((r, score));
            }
        }
    }
    best.map(|(r, _)| r)
        .ok_or_else(|| Error::RankDeficient("no roughness value on the grid yields a finite GCV".into()))
}

/// Smooth every subject; the roughness is GCV-selected when not given.
pub fn smooth_dataset(
    data: &LongitudinalDataset,
    basis: &Arc<BasisSystem>,
    roughness: Option<f64>,
) -> Result<(Vec<FunctionalCurve>, f64)> {
    let smoother = Smoother::new(basis.clone());
    let r = match roughness {
        Some(r) => r,
        None => select_roughness(&smoother, data, &default_roughness_grid())?,
    };
    let curves = data
        .subjects
        .par_iter()
        .map(|s| {
            let fit = smoother.fit(&s.times, &s.values, r)?;
            FunctionalCurve::new(fit.coefficients, basis.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((curves, r))
}
