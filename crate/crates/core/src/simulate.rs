//! Monte Carlo comparison of the functional quadratic model against
//! functional-linear and multivariate baselines.
//!
//! Each replication draws from its own ChaCha stream selected by the
//! replication index, so any cell can be rerun alone with identical output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::design::{build_covariate, linspace, n_covariates, CoefficientTensor, QuadraticModelSpec, ThetaMatrix};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitControls, FitData, FittedModel};
use crate::gpcov::{sigma_matrix, NoiseParam, NuParams};
use crate::linalg::lstsq_min_norm;
use crate::selection::{evaluate, Criterion, CriterionReport, QForm};
use crate::smoothing::{smooth_dataset, LongitudinalDataset, SubjectSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub n_t: usize,
    /// Basis sizes of the generating model.
    pub m_x: usize,
    pub m_y: usize,
    /// Generating GP noise; `nu1 = nu3 = 0` gives noiseless responses.
    pub noise: NuParams,
    /// Predictor noise sd as a fraction of the empirical sd of `x_i(t_j)`.
    pub predictor_noise_ratio: f64,
    pub toeplitz_rho: f64,
    pub wishart_df: usize,
    pub seed: u64,
    pub replications: usize,
    /// Basis sizes used for estimation.
    pub est_m_x: usize,
    pub est_m_y: usize,
    pub lambda_grid: Vec<f64>,
    pub q_form: QForm,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 50,
            n_t: 21,
            m_x: 7,
            m_y: 7,
            noise: NuParams {
                nu1: 0.1,
                nu2: 20.0,
                nu3: 0.3,
            },
            predictor_noise_ratio: 0.1,
            toeplitz_rho: 0.5,
            wishart_df: 10,
            seed: 2024,
            replications: 100,
            est_m_x: 7,
            est_m_y: 6,
            lambda_grid: (0..=8).map(|k| 10f64.powi(k - 8)).collect(),
            q_form: QForm::PerSubject,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("n_t", self.n_t),
            ("m_x", self.m_x),
            ("m_y", self.m_y),
            ("replications", self.replications),
            ("est_m_x", self.est_m_x),
            ("est_m_y", self.est_m_y),
            ("wishart_df", self.wishart_df),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.n_t < 2 {
            return Err(Error::Validation("n_t must be at least 2".into()));
        }
        let nu = self.noise;
        if !(nu.nu1 >= 0.0 && nu.nu3 >= 0.0 && nu.nu2 > 0.0) || !nu.nu1.is_finite() || !nu.nu3.is_finite() {
            return Err(Error::Validation(format!("invalid generating noise {nu:?}")));
        }
        if !(self.toeplitz_rho.abs() < 1.0) {
            return Err(Error::Validation("toeplitz_rho must lie in (-1, 1)".into()));
        }
        if !(self.predictor_noise_ratio >= 0.0) {
            return Err(Error::Validation("predictor_noise_ratio must be >= 0".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Validation("lambda grid values must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        linspace(0.0, 1.0, self.n_t)
    }
}

/// One generated dataset on the common grid `times`.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub times: Vec<f64>,
    /// Noisy predictor observations, one row per subject.
    pub x: DMatrix<f64>,
    /// Noisy responses.
    pub y: DMatrix<f64>,
    /// Mean curves `g_i(t_j)`.
    pub truth: DMatrix<f64>,
    pub theta: ThetaMatrix,
    pub w: Vec<DVector<f64>>,
}

impl SimDataset {
    pub fn predictor_dataset(&self) -> Result<LongitudinalDataset> {
        to_dataset("x", &self.times, &self.x)
    }

    pub fn response_dataset(&self) -> Result<LongitudinalDataset> {
        to_dataset("y", &self.times, &self.y)
    }
}

fn to_dataset(name: &str, times: &[f64], m: &DMatrix<f64>) -> Result<LongitudinalDataset> {
    let width = m.nrows().to_string().len();
    let subjects = (0..m.nrows())
        .map(|i| SubjectSeries {
            id: format!("s{:0width$}", i + 1),
            times: times.to_vec(),
            values: m.row(i).iter().copied().collect(),
        })
        .collect();
    LongitudinalDataset::new(name, (times[0], times[times.len() - 1]), subjects)
}

pub fn toeplitz(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Wishart draw `Σ_k g_k g_kᵀ` with `g_k ~ N(0, scale)`.
pub fn wishart<R: Rng>(rng: &mut R, df: usize, scale_chol: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = scale_chol.nrows();
    let mut out = DMatrix::zeros(dim, dim);
    for _ in 0..df {
        let e = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = scale_chol * e;
        out.ger(1.0, &g, &g, 1.0);
    }
    out
}

/// Symmetric square root via eigendecomposition, so a zero covariance
/// yields exactly zero draws.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `count` noise vectors on `times`, one per row.
pub fn draw_gp_noise<R: Rng>(rng: &mut R, times: &[f64], nu: &NuParams, count: usize) -> DMatrix<f64> {
    let root = psd_sqrt(&sigma_matrix(times, nu, NoiseParam::Variance));
    let nt = times.len();
    let mut out = DMatrix::zeros(count, nt);
    for i in 0..count {
        let e = DVector::from_fn(nt, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.set_row(i, &(&root * e).transpose());
    }
    out
}

fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

/// Entries taken column by column from successive Wishart draws.
fn wishart_entries<R: Rng>(rng: &mut R, df: usize, chol: &DMatrix<f64>, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = wishart(rng, df, chol);
        out.extend(w.iter().copied().take(count - out.len()));
    }
    out
}

pub fn generate_dataset(cfg: &SimConfig, replication: usize) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = replication_rng(cfg.seed, replication);
    let (m_x, m_y) = (cfg.m_x, cfg.m_y);
    let phi_basis = BasisSystem::bspline(m_x, 0.0, 1.0, 3.min(m_x - 1))?;
    let psi_basis = BasisSystem::bspline(m_y, 0.0, 1.0, 3.min(m_y - 1))?;
    let gram = phi_basis.default_gram();
    let scale = toeplitz(m_x, cfg.toeplitz_rho);
    let scale_chol = scale.clone().cholesky().expect("Toeplitz with |rho| < 1 is PD").l();

    let b_entries = wishart_entries(&mut rng, cfg.wishart_df, &scale_chol, m_x * m_y);
    let b = DMatrix::from_column_slice(m_x, m_y, &b_entries);
    let g_entries = wishart_entries(&mut rng, cfg.wishart_df, &scale_chol, m_x * m_x * m_y);
    let mut idx = 0;
    let gamma = CoefficientTensor::from_fn(m_x, m_y, |_, _, _| {
        idx += 1;
        g_entries[idx - 1]
    });
    let theta = ThetaMatrix::from_blocks(&DVector::zeros(m_y), &b, &gamma)?;

    let times = cfg.times();
    let phi_t = phi_basis.design_matrix(&times)?;
    let psi_t = psi_basis.design_matrix(&times)?;
    let w: Vec<DVector<f64>> = (0..cfg.n)
        .map(|_| &scale_chol * DVector::from_fn(m_x, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let nt = times.len();
    let mut x_clean = DMatrix::zeros(cfg.n, nt);
    let mut truth = DMatrix::zeros(cfg.n, nt);
    for (i, wi) in w.iter().enumerate() {
        x_clean.set_row(i, &(&phi_t * wi).transpose());
        let z = build_covariate(wi, &gram, 2)?;
        truth.set_row(i, &(&psi_t * (theta.matrix() * z)).transpose());
    }
    let eps = draw_gp_noise(&mut rng, &times, &cfg.noise, cfg.n);
    let y = &truth + eps;
    let sd = sample_sd(x_clean.as_slice());
    let x_sd = cfg.predictor_noise_ratio * sd;
    let x = x_clean.map(|v| v + x_sd * rng.sample::<f64, _>(StandardNormal));
    Ok(SimDataset {
        times,
        x,
        y,
        truth,
        theta,
        w,
    })
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `1/(n·n_t) Σ_i Σ_j (g_i(t_j) − ŷ_i(t_j))²`.
pub fn ase(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::Dimension(format!(
            "truth is {:?} but predictions are {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    Ok((truth - pred).norm_squared() / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    FInter,
    FLin,
    Inter,
    Quad,
    Lin,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::FInter,
        ModelKind::FLin,
        ModelKind::Inter,
        ModelKind::Quad,
        ModelKind::Lin,
    ];

    fn name(self) -> &'static str {
        match self {
            ModelKind::FInter => "F-INTER",
            ModelKind::FLin => "F-LIN",
            ModelKind::Inter => "INTER",
            ModelKind::Quad => "QUAD",
            ModelKind::Lin => "LIN",
        }
    }
}

/// An estimator in the study: an unpenalized fit of one model, or the
/// penalized quadratic model with `λ` chosen by a criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Mle(ModelKind),
    Pmle(Criterion),
}

impl Estimator {
    pub fn all() -> Vec<Estimator> {
        ModelKind::ALL
            .iter()
            .map(|&k| Estimator::Mle(k))
            .chain(Criterion::ALL.iter().map(|&c| Estimator::Pmle(c)))
            .collect()
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Mle(k) => f.write_str(k.name()),
            Estimator::Pmle(c) => write!(f, "PMLE-{c}"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::all()
            .into_iter()
            .find(|e| e.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown estimator {s:?}")))
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.to_string()
    }
}

/// Raw-value design for the multivariate baselines, intercept first.
pub fn multivariate_features(x: &DMatrix<f64>, kind: ModelKind) -> Result<DMatrix<f64>> {
    let (n, nt) = x.shape();
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    cols.extend((0..nt).map(|j| x.column(j).into_owned()));
    match kind {
        ModelKind::Lin => {}
        ModelKind::Quad => cols.extend((0..nt).map(|j| x.column(j).component_mul(&x.column(j)))),
        ModelKind::Inter => {
            for j in 0..nt {
                for k in j..nt {
                    cols.push(x.column(j).component_mul(&x.column(k)));
                }
            }
        }
        _ => return Err(Error::Validation(format!("{} is not a multivariate model", kind.name()))),
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Shared per-replication state for the functional estimators.
pub struct FunctionalSetup {
    pub data: FitData,
    pub m_x: usize,
}

impl FunctionalSetup {
    pub fn new(ds: &SimDataset, cfg: &SimConfig) -> Result<Self> {
        let xb = Arc::new(BasisSystem::gaussian_rbf(cfg.est_m_x, 0.0, 1.0, None)?);
        let yb = Arc::new(BasisSystem::bspline(cfg.est_m_y, 0.0, 1.0, 3.min(cfg.est_m_y - 1))?);
        let (curves, _) = smooth_dataset(&ds.predictor_dataset()?, &xb, None)?;
        let gram = xb.default_gram();
        let data = FitData::from_curves(&curves, &gram, 2, &ds.response_dataset()?, yb)?;
        Ok(FunctionalSetup { data, m_x: cfg.est_m_x })
    }

    fn predictions(&self, model: &FittedModel, data: &FitData) -> DMatrix<f64> {
        let fitted = model.fitted_values(data);
        DMatrix::from_fn(fitted.len(), fitted[0].len(), |i, j| fitted[i][j])
    }

    pub fn spec(&self, order: usize, lambda: f64) -> Result<QuadraticModelSpec> {
        QuadraticModelSpec::with_difference_penalties(self.m_x, self.data.m_y(), order, 2, lambda)
    }

    /// Fitted values of the order-2 model with an extra ridge on the quadratic block.
    pub fn quadratic_fit(&self, lambda: f64, controls: &FitControls) -> Result<(FittedModel, DMatrix<f64>)> {
        let model = fit(&self.data, &self.spec(2, lambda)?, controls)?;
        let pred = self.predictions(&model, &self.data);
        Ok((model, pred))
    }

    pub fn linear_fit(&self, controls: &FitControls) -> Result<DMatrix<f64>> {
        let data = self.data.truncate_covariates(n_covariates(self.m_x, 1))?;
        let model = fit(&data, &self.spec(1, 0.0)?, controls)?;
        Ok(self.predictions(&model, &data))
    }
}

/// Predictions of an unpenalized model on the replication's grid.
pub fn fit_baseline(kind: ModelKind, ds: &SimDataset, cfg: &SimConfig) -> Result<DMatrix<f64>> {
    match kind {
        ModelKind::FInter => Ok(FunctionalSetup::new(ds, cfg)?.quadratic_fit(0.0, &FitControls::default())?.1),
        ModelKind::FLin => FunctionalSetup::new(ds, cfg)?.linear_fit(&FitControls::default()),
        _ => fit_multivariate(kind, &ds.x, &ds.y),
    }
}

/// Per-time-point least squares with the minimum-norm generalized inverse.
pub fn fit_multivariate(kind: ModelKind, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = multivariate_features(x, kind)?;
    let coef = lstsq_min_norm(&f, y);
    Ok(f * coef)
}

/// Criterion table over the `λ` grid with the `ASE` of each fit.
pub fn pmle_path(setup: &FunctionalSetup, ds: &SimDataset, cfg: &SimConfig) -> Vec<(CriterionReport, Option<f64>)> {
    let mut ctl = FitControls::default();
    let mut out = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let res = setup.quadratic_fit(lambda, &ctl).and_then(|(model, pred)| {
            let report = evaluate(&model, &setup.data, cfg.q_form)?;
            Ok((model, report, ase(&ds.truth, &pred)?))
        });
        match res {
            Ok((model, report, a)) => {
                if model.converged() {
                    ctl.nu_init = Some(model.nu);
                }
                out.push((report, Some(a)));
            }
            Err(e) => out.push((
                CriterionReport {
                    m_y: setup.data.m_y(),
                    lambda,
                    df: None,
                    gcv: None,
                    maic: None,
                    gic: None,
                    gbic: None,
                    converged: false,
                    notes: vec![e.to_string()],
                },
                None,
            )),
        }
    }
    out
}

/// ASE of every requested estimator on one replication.
pub fn run_replication(
    cfg: &SimConfig,
    replication: usize,
    estimators: &[Estimator],
) -> BTreeMap<Estimator, std::result::Result<f64, String>> {
    let mut out = BTreeMap::new();
    let ds = match generate_dataset(cfg, replication) {
        Ok(ds) => ds,
        Err(e) => {
            for &est in estimators {
                out.insert(est, Err(e.to_string()));
            }
            return out;
        }
    };
    let needs_functional = estimators
        .iter()
        .any(|e| matches!(e, Estimator::Pmle(_) | Estimator::Mle(ModelKind::FInter | ModelKind::FLin)));
    let setup = if needs_functional {
        Some(FunctionalSetup::new(&ds, cfg).map_err(|e| e.to_string()))
    } else {
        None
    };
    let path = if estimators.iter().any(|e| matches!(e, Estimator::Pmle(_))) {
        match &setup {
            Some(Ok(s)) => Some(pmle_path(s, &ds, cfg)),
            _ => None,
        }
    } else {
        None
    };
    for &est in estimators {
        let res: std::result::Result<f64, String> = match est {
            Estimator::Mle(kind @ (ModelKind::Inter | ModelKind::Quad | ModelKind::Lin)) => fit_multivariate(kind, &ds.x, &ds.y)
                .and_then(|p| ase(&ds.truth, &p))
                .map_err(|e| e.to_string()),
            Estimator::Mle(kind) => match setup.as_ref().expect("set up above") {
                Err(e) => Err(e.clone()),
                Ok(s) => {
                    let pred = if kind == ModelKind::FInter {
                        s.quadratic_fit(0.0, &FitControls::default()).map(|(_, p)| p)
                    } else {
                        s.linear_fit(&FitControls::default())
                    };
                    pred.and_then(|p| ase(&ds.truth, &p)).map_err(|e| e.to_string())
                }
            },
            Estimator::Pmle(c) => match (&setup, &path) {
                (Some(Err(e)), _) => Err(e.clone()),
                (_, Some(rows)) => {
                    let reports: Vec<CriterionReport> = rows.iter().map(|(r, _)| r.clone()).collect();
                    crate::selection::argmin(&reports, c)
                        .and_then(|i| rows[i].1)
                        .ok_or_else(|| format!("{c} undefined on the whole lambda grid"))
                }
                _ => Err("no PMLE path".to_string()),
            },
        };
        out.insert(est, res);
    }
    out
}

/// ASEs of one estimator in one `(n, ν₃)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub estimator: Estimator,
    pub n: usize,
    pub nu3: f64,
    /// Per replication; `None` marks a failed replication.
    pub ases: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

impl CellResult {
    pub fn successful(&self) -> Vec<f64> {
        self.ases.iter().flatten().copied().collect()
    }

    pub fn failures(&self) -> usize {
        self.ases.iter().filter(|a| a.is_none()).count()
    }

    pub fn mean(&self) -> Option<f64> {
        let v = self.successful();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    /// Sample standard deviation of the successful replications.
    pub fn sd(&self) -> Option<f64> {
        let v = self.successful();
        if v.len() < 2 {
            return None;
        }
        Some(sample_sd(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResultTable {
    pub cells: Vec<CellResult>,
    pub replications: usize,
}

impl SimResultTable {
    pub fn get(&self, estimator: Estimator, n: usize, nu3: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.n == n && c.nu3 == nu3)
    }

    fn cell_keys(&self) -> Vec<(usize, f64)> {
        let mut keys: Vec<(usize, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.contains(&(c.n, c.nu3)) {
                keys.push((c.n, c.nu3));
            }
        }
        keys
    }

    fn estimators(&self, pmle: bool) -> Vec<Estimator> {
        let mut out: Vec<Estimator> = Vec::new();
        for c in &self.cells {
            if matches!(c.estimator, Estimator::Pmle(_)) == pmle && !out.contains(&c.estimator) {
                out.push(c.estimator);
            }
        }
        out
    }

    /// Mean and sd of ASE ×10 for the unpenalized fits, one column pair per cell.
    pub fn write_table1<W: Write>(&self, out: W) -> Result<()> {
        self.write_table(out, false)
    }

    /// Same layout for the penalized fits, one row per criterion.
    pub fn write_table2<W: Write>(&self, out: W) -> Result<()> {
        self.write_table(out, true)
    }

    fn write_table<W: Write>(&self, out: W, pmle: bool) -> Result<()> {
        let keys = self.cell_keys();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["estimator".to_string()];
        for (n, nu3) in &keys {
            for stat in ["mean_x10", "sd_x10", "failed"] {
                header.push(format!("n{n}_nu3_{nu3}_{stat}"));
            }
        }
        w.write_record(&header)?;
        for est in self.estimators(pmle) {
            let mut row = vec![est.to_string()];
            for &(n, nu3) in &keys {
                match self.get(est, n, nu3) {
                    Some(c) => {
                        row.push(c.mean().map_or("NA".into(), |m| (10.0 * m).to_string()));
                        row.push(c.sd().map_or("NA".into(), |s| (10.0 * s).to_string()));
                        row.push(c.failures().to_string());
                    }
                    None => row.extend(["NA".to_string(), "NA".to_string(), "NA".to_string()]),
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Quartiles and Tukey whiskers of ASE per cell.
    pub fn write_boxplots<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "n", "nu3", "q1", "median", "q3", "whisker_low", "whisker_high", "count", "failed"])?;
        for c in &self.cells {
            let stats = BoxStats::from_values(&c.successful());
            let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
            w.write_record([
                c.estimator.to_string(),
                c.n.to_string(),
                c.nu3.to_string(),
                f(stats.map(|s| s.q1)),
                f(stats.map(|s| s.median)),
                f(stats.map(|s| s.q3)),
                f(stats.map(|s| s.whisker_low)),
                f(stats.map(|s| s.whisker_high)),
                c.successful().len().to_string(),
                c.failures().to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
        let iqr = q3 - q1;
        let whisker_low = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(v[0]);
        let whisker_high = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(v[v.len() - 1]);
        Some(BoxStats {
            q1,
            median,
            q3,
            whisker_low,
            whisker_high,
        })
    }
}

/// Run every replication of every cell; replications run in parallel and
/// are reduced in index order.
pub fn run_study(cells: &[SimConfig], estimators: &[Estimator]) -> Result<SimResultTable> {
    if cells.is_empty() || estimators.is_empty() {
        return Err(Error::Validation("study needs at least one cell and one estimator".into()));
    }
    let replications = cells[0].replications;
    for c in cells {
        c.validate()?;
        if c.replications != replications {
            return Err(Error::Validation("all cells must use the same replication count".into()));
        }
    }
    let mut out = Vec::new();
    for cfg in cells {
        let reps: Vec<BTreeMap<Estimator, std::result::Result<f64, String>>> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(cfg, r, estimators))
            .collect();
        for &est in estimators {
            let mut ases = Vec::with_capacity(reps.len());
            let mut errors = Vec::new();
            for (r, rep) in reps.iter().enumerate() {
                match &rep[&est] {
                    Ok(a) if a.is_finite() => ases.push(Some(*a)),
                    Ok(a) => {
                        ases.push(None);
                        errors.push(format!("replication {r}: non-finite ASE {a}"));
                    }
                    Err(e) => {
                        ases.push(None);
                        errors.push(format!("replication {r}: {e}"));
                    }
                }
            }
            out.push(CellResult {
                estimator: est,
                n: cfg.n,
                nu3: cfg.noise.nu3,
                ases,
                errors,
            });
        }
    }
    Ok(SimResultTable {
        cells: out,
        replications,
    })
}

/// One config per `(n, ν₃)` pair, sample sizes outermost.
pub fn study_cells(base: &SimConfig, sample_sizes: &[usize], noise_levels: &[f64]) -> Vec<SimConfig> {
    let mut out = Vec::new();
    for &n in sample_sizes {
        for &nu3 in noise_levels {
            let mut c = base.clone();
            c.n = n;
            c.noise.nu3 = nu3;
            out.push(c);
        }
    }
    out
}

/// Monthly predictor and response curves for 76 sites, generated by the
/// simulation model on a 12-point grid and labelled with months 1 to 12.
pub fn weather_like_fixture(seed: u64) -> Result<(LongitudinalDataset, LongitudinalDataset)> {
    let cfg = SimConfig {
        n: 76,
        n_t: 12,
        seed,
        replications: 1,
        ..SimConfig::default()
    };
    let ds = generate_dataset(&cfg, 0)?;
    let months: Vec<f64> = (1..=12).map(f64::from).collect();
    let mk = |name: &str, m: &DMatrix<f64>| {
        let subjects = (0..m.nrows())
            .map(|i| SubjectSeries {
                id: format!("site{:02}", i + 1),
                times: months.clone(),
                values: m.row(i).iter().copied().collect(),
            })
            .collect();
        LongitudinalDataset::new(name, (1.0, 12.0), subjects)
    };
    Ok((mk("temperature", &ds.x)?, mk("log_precipitation", &ds.y)?))
}
