//! Basis systems over a closed interval: clamped B-splines with equally
//! spaced interior knots and Gaussian radial basis functions with equally
//! spaced centers. Gram matrices use composite Gauss–Legendre quadrature;
//! roughness penalties are finite differences of the coefficient sequence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Absolute slack allowed when an evaluation point sits on a domain endpoint.
pub const DOMAIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Bspline,
    GaussianRbf,
}

/// Serializable description of a basis system.
///
/// `degree_or_width` is the spline degree for B-splines (default 3) and the
/// kernel width for Gaussian RBFs. A missing RBF width selects the width at
/// which neighbouring kernels cross at height 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub kind: BasisKind,
    #[serde(rename = "M")]
    pub m: usize,
    pub domain: [f64; 2],
    #[serde(default)]
    pub degree_or_width: Option<f64>,
}

impl BasisConfig {
    pub fn bspline(m: usize, lo: f64, hi: f64, degree: usize) -> Self {
        BasisConfig {
            kind: BasisKind::Bspline,
            m,
            domain: [lo, hi],
            degree_or_width: Some(degree as f64),
        }
    }

    pub fn gaussian_rbf(m: usize, lo: f64, hi: f64, width: Option<f64>) -> Self {
        BasisConfig {
            kind: BasisKind::GaussianRbf,
            m,
            domain: [lo, hi],
            degree_or_width: width,
        }
    }

    pub fn build(&self) -> Result<BasisSystem> {
        BasisSystem::from_config(self)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], five points (exact to degree 9).
const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    kind: BasisKind,
    m: usize,
    lo: f64,
    hi: f64,
    /// Interior knots (B-spline) or centers (RBF), ascending.
    knots_or_centers: Vec<f64>,
    degree: usize,
    width: f64,
    /// Full clamped knot vector, B-spline only.
    full_knots: Vec<f64>,
}

impl BasisSystem {
    /// Clamped B-spline basis of `degree` with `m` functions and equally spaced interior knots.
    pub fn bspline(m: usize, lo: f64, hi: f64, degree: usize) -> Result<Self> {
        check_domain(m, lo, hi)?;
        if m < degree + 1 {
            return Err(Error::InvalidBasis(format!(
                "degree {degree} B-splines need at least {} functions, got {m}",
                degree + 1
            )));
        }
        let n_interior = m - degree - 1;
        let step = (hi - lo) / (n_interior + 1) as f64;
        let interior: Vec<f64> = (1..=n_interior).map(|k| lo + step * k as f64).collect();
        let mut full = vec![lo; degree + 1];
        full.extend_from_slice(&interior);
        full.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(BasisSystem {
            kind: BasisKind::Bspline,
            m,
            lo,
            hi,
            knots_or_centers: interior,
            degree,
            width: 0.0,
            full_knots: full,
        })
    }

    /// Gaussian RBFs `exp(-(t - c)^2 / (2 width^2))` with equally spaced centers on `[lo, hi]`.
    pub fn gaussian_rbf(m: usize, lo: f64, hi: f64, width: Option<f64>) -> Result<Self> {
        check_domain(m, lo, hi)?;
        let spacing = (hi - lo) / (m - 1) as f64;
        let width = match width {
            Some(w) if w > 0.0 && w.is_finite() => w,
            Some(w) => return Err(Error::InvalidBasis(format!("RBF width must be positive, got {w}"))),
            None => spacing / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()),
        };
        let centers = (0..m).map(|k| lo + spacing * k as f64).collect();
        Ok(BasisSystem {
            kind: BasisKind::GaussianRbf,
            m,
            lo,
            hi,
            knots_or_centers: centers,
            degree: 0,
            width,
            full_knots: Vec::new(),
        })
    }

    /// RBF system with explicit centers; used when the layout is not equally spaced.
    pub fn gaussian_rbf_with_centers(centers: Vec<f64>, lo: f64, hi: f64, width: f64) -> Result<Self> {
        check_domain(centers.len(), lo, hi)?;
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidBasis(format!("RBF width must be positive, got {width}")));
        }
        if centers.windows(2).any(|w| w[0] > w[1]) || centers.iter().any(|&c| c < lo || c > hi) {
            return Err(Error::InvalidBasis(
                "centers must be ascending and inside the domain".into(),
            ));
        }
        Ok(BasisSystem {
            kind: BasisKind::GaussianRbf,
            m: centers.len(),
            lo,
            hi,
            knots_or_centers: centers,
            degree: 0,
            width,
            full_knots: Vec::new(),
        })
    }

    pub fn from_config(cfg: &BasisConfig) -> Result<Self> {
        let [lo, hi] = cfg.domain;
        match cfg.kind {
            BasisKind::Bspline => {
                let d = cfg.degree_or_width.unwrap_or(3.0);
                if d < 0.0 || d.fract() != 0.0 {
                    return Err(Error::InvalidBasis(format!(
                        "B-spline degree must be a nonnegative integer, got {d}"
                    )));
                }
                Self::bspline(cfg.m, lo, hi, d as usize)
            }
            BasisKind::GaussianRbf => Self::gaussian_rbf(cfg.m, lo, hi, cfg.degree_or_width),
        }
    }

    pub fn config(&self) -> BasisConfig {
        BasisConfig {
            kind: self.kind,
            m: self.m,
            domain: [self.lo, self.hi],
            degree_or_width: Some(match self.kind {
                BasisKind::Bspline => self.degree as f64,
                BasisKind::GaussianRbf => self.width,
            }),
        }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots_or_centers(&self) -> &[f64] {
        &self.knots_or_centers
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Clamp `t` onto the domain if it lies within [`DOMAIN_TOL`] of it.
    pub fn check_point(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < self.lo - DOMAIN_TOL || t > self.hi + DOMAIN_TOL {
            return Err(Error::Domain {
                t,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(t.clamp(self.lo, self.hi))
    }

    /// Values of all basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.check_point(t)?;
        let mut out = DVector::zeros(self.m);
        match self.kind {
            BasisKind::Bspline => self.eval_bspline_into(t, out.as_mut_slice()),
            BasisKind::GaussianRbf => {
                let inv = 1.0 / (2.0 * self.width * self.width);
                for (o, &c) in out.iter_mut().zip(&self.knots_or_centers) {
                    let d = t - c;
                    *o = (-d * d * inv).exp();
                }
            }
        }
        Ok(out)
    }

    /// `n × M` matrix with rows `φ(t_j)ᵀ`.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(times.len(), self.m);
        for (j, &t) in times.iter().enumerate() {
            let row = self.eval(t)?;
            out.row_mut(j).copy_from(&row.transpose());
        }
        Ok(out)
    }

    fn eval_bspline_into(&self, t: f64, out: &mut [f64]) {
        let p = self.degree;
        let u = &self.full_knots;
        // span index: u[span] <= t < u[span + 1], with the right endpoint folded into the last span
        let span = if t >= self.hi {
            self.m - 1
        } else {
            let mut s = p;
            while s < self.m - 1 && t >= u[s + 1] {
                s += 1;
            }
            s
        };
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (r, v) in n.into_iter().enumerate() {
            out[span - p + r] = v;
        }
    }

    /// Breakpoints between which every basis function is smooth.
    fn breakpoints(&self) -> Vec<f64> {
        match self.kind {
            BasisKind::Bspline => {
                let mut b = vec![self.lo];
                b.extend_from_slice(&self.knots_or_centers);
                b.push(self.hi);
                b
            }
            BasisKind::GaussianRbf => vec![self.lo, self.hi],
        }
    }

    /// Gram matrix `∫ φ(s) φ(s)ᵀ ds` by composite five-point Gauss–Legendre
    /// quadrature on `panels` subintervals aligned with the knots.
    pub fn gram_matrix(&self, panels: usize) -> Result<DMatrix<f64>> {
        if panels < 2 * self.m {
            return Err(Error::Validation(format!(
                "gram_matrix needs at least {} quadrature panels, got {panels}",
                2 * self.m
            )));
        }
        let breaks = self.breakpoints();
        let spans = breaks.len() - 1;
        let per_span = panels.div_ceil(spans);
        let mut gram = DMatrix::zeros(self.m, self.m);
        let mut phi = vec![0.0; self.m];
        for w in breaks.windows(2) {
            let h = (w[1] - w[0]) / per_span as f64;
            for k in 0..per_span {
                let a = w[0] + h * k as f64;
                for (x, wt) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
                    let t = a + 0.5 * h * (x + 1.0);
                    let v = self.eval(t)?;
                    phi.copy_from_slice(v.as_slice());
                    let scale = 0.5 * h * wt;
                    for j in 0..self.m {
                        if phi[j] == 0.0 {
                            continue;
                        }
                        for i in j..self.m {
                            gram[(i, j)] += scale * phi[i] * phi[j];
                        }
                    }
                }
            }
        }
        for j in 0..self.m {
            for i in 0..j {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        Ok(gram)
    }

    /// Gram matrix with the default `8M` panels.
    pub fn default_gram(&self) -> DMatrix<f64> {
        self.gram_matrix(8 * self.m)
            .expect("8M panels always satisfy the quadrature precondition")
    }
}

fn check_domain(m: usize, lo: f64, hi: f64) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidBasis(format!("need at least 2 basis functions, got {m}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidBasis(format!("invalid domain [{lo}, {hi}]")));
    }
    Ok(())
}

/// Symmetric PSD roughness penalty on a coefficient sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    /// Wrap an arbitrary matrix, checking symmetry and positive semi-definiteness.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        validate_psd(&matrix, "penalty")?;
        Ok(PenaltyMatrix { order: 0, matrix })
    }

    pub fn zeros(m: usize) -> Self {
        PenaltyMatrix {
            order: 0,
            matrix: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub(crate) fn validate_psd(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{what} matrix must be square")));
    }
    let scale = a.amax().max(1.0);
    if linalg::asymmetry(a) > 1e-12 * scale {
        return Err(Error::Validation(format!("{what} matrix is not symmetric")));
    }
    if a.nrows() > 0 {
        let min = linalg::min_eigenvalue(a);
        if min < -1e-10 * scale {
            return Err(Error::Validation(format!(
                "{what} matrix is not positive semi-definite (min eigenvalue {min:e})"
            )));
        }
    }
    Ok(())
}

/// `(M - order) × M` finite-difference operator.
pub fn difference_operator(m: usize, order: usize) -> Result<DMatrix<f64>> {
    if m <= order {
        return Err(Error::Dimension(format!(
            "difference penalty of order {order} needs more than {order} coefficients, got {m}"
        )));
    }
    // binomial coefficients with alternating sign
    let mut coef = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; coef.len() + 1];
        for (i, c) in coef.iter().enumerate() {
            next[i] -= c;
            next[i + 1] += c;
        }
        coef = next;
    }
    let mut d = DMatrix::zeros(m - order, m);
    for r in 0..m - order {
        for (k, c) in coef.iter().enumerate() {
            d[(r, r + k)] = *c;
        }
    }
    Ok(d)
}

/// `DᵀD` for the order-`order` difference operator.
pub fn difference_penalty(m: usize, order: usize) -> Result<PenaltyMatrix> {
    let d = difference_operator(m, order)?;
    Ok(PenaltyMatrix {
        order,
        matrix: d.tr_mul(&d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree0_indicator() {
        let b = BasisSystem::bspline(2, 0.0, 1.0, 0).unwrap();
        assert_eq!(b.eval(0.25).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(b.eval(0.75).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(b.eval(1.0).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn cubic_partition_of_unity_midpoint() {
        let b = BasisSystem::bspline(7, 0.0, 1.0, 3).unwrap();
        assert_eq!(b.knots_or_centers().len() + 3 + 1, 7);
        let v = b.eval(0.5).unwrap();
        assert!((v.sum() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn partition_of_unity_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, deg) in [(7, 3), (10, 2), (5, 1), (12, 4)] {
            let b = BasisSystem::bspline(m, -2.0, 3.0, deg).unwrap();
            for _ in 0..1000 {
                let t = rng.random_range(-2.0..3.0);
                let v = b.eval(t).unwrap();
                assert!((v.sum() - 1.0).abs() < 1e-10);
                assert!(v.iter().all(|x| x.is_finite() && *x >= -1e-15));
            }
        }
    }

    #[test]
    fn rbf_direct_kernel() {
        let b = BasisSystem::gaussian_rbf_with_centers(vec![0.0, 1.0], 0.0, 1.0, 1.0).unwrap();
        let v = b.eval(0.0).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rbf_default_width_half_height() {
        let b = BasisSystem::gaussian_rbf(5, 0.0, 1.0, None).unwrap();
        let v = b.eval(0.125).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn domain_errors_and_endpoint_slack() {
        let b = BasisSystem::bspline(5, 0.0, 1.0, 3).unwrap();
        assert!(matches!(b.eval(1.1), Err(Error::Domain { .. })));
        assert!(matches!(b.eval(-0.01), Err(Error::Domain { .. })));
        assert!(b.eval(1.0 + 5e-10).is_ok());
        assert!(b.eval(-5e-10).is_ok());
    }

    #[test]
    fn invalid_configs() {
        assert!(BasisSystem::bspline(1, 0.0, 1.0, 0).is_err());
        assert!(BasisSystem::bspline(3, 0.0, 1.0, 3).is_err());
        assert!(BasisSystem::bspline(5, 1.0, 1.0, 3).is_err());
        assert!(BasisSystem::gaussian_rbf(3, 0.0, 1.0, Some(-1.0)).is_err());
    }

    #[test]
    fn gram_degree0_two_pieces() {
        let b = BasisSystem::bspline(2, 0.0, 1.0, 0).unwrap();
        let g = b.gram_matrix(4).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((g[(1, 1)] - 0.5).abs() < 1e-14);
        assert!(g[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn gram_linear_hats() {
        let b = BasisSystem::bspline(2, 0.0, 1.0, 1).unwrap();
        let g = b.gram_matrix(4).unwrap();
        let exact = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0]);
        assert!((g - exact).amax() < 1e-14);
    }

    #[test]
    fn gram_rejects_too_few_panels() {
        let b = BasisSystem::bspline(4, 0.0, 1.0, 2).unwrap();
        assert!(b.gram_matrix(7).is_err());
    }

    #[test]
    fn gram_symmetric_psd_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [
            BasisSystem::bspline(7, 0.0, 1.0, 3).unwrap(),
            BasisSystem::gaussian_rbf(7, 0.0, 1.0, None).unwrap(),
            BasisSystem::gaussian_rbf(6, -1.0, 4.0, Some(0.8)).unwrap(),
        ] {
            let m = b.len();
            let g = b.gram_matrix(8 * m).unwrap();
            assert!(linalg::asymmetry(&g) < 1e-12);
            for _ in 0..100 {
                let x = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                assert!(x.dot(&(&g * &x)) >= -1e-10);
            }
            let g2 = b.gram_matrix(16 * m).unwrap();
            assert!((g2 - &g).amax() < 1e-8);
        }
    }

    #[test]
    fn second_difference_small() {
        let p = difference_penalty(3, 2).unwrap();
        let exact = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 1.0, -2.0, 4.0, -2.0, 1.0, -2.0, 1.0]);
        assert_eq!(p.matrix, exact);
        assert!(matches!(difference_penalty(2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn second_difference_nullspace() {
        let p = difference_penalty(7, 2).unwrap();
        let ones = DVector::from_element(7, 1.0);
        let lin = DVector::from_fn(7, |i, _| (i + 1) as f64);
        assert!((&p.matrix * ones).norm() < 1e-10);
        assert!((&p.matrix * lin).norm() < 1e-10);
        assert!(linalg::asymmetry(&p.matrix) < 1e-12);
    }

    #[test]
    fn second_difference_zero_eigenvalues() {
        let p = difference_penalty(5, 2).unwrap();
        let ev = linalg::sorted_eigenvalues(&p.matrix);
        let top = ev.last().unwrap().abs();
        let zeros = ev.iter().filter(|v| v.abs() < 1e-8 * top).count();
        assert_eq!(zeros, 2);
        assert!(ev.iter().all(|&v| v >= -1e-10));
        for m in 3..12 {
            let p = difference_penalty(m, 2).unwrap();
            assert_eq!(linalg::numerical_rank(&p.matrix, 1e-8), m - 2);
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = BasisConfig::bspline(7, 0.0, 1.0, 3);
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"M\":7"));
        assert!(s.contains("\"kind\":\"bspline\""));
        let back: BasisConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let b = back.build().unwrap();
        assert_eq!(b.config(), cfg);
        let bad = r#"{"kind":"bspline","M":7,"domain":[0,1],"degree_or_width":3,"extra":1}"#;
        assert!(serde_json::from_str::<BasisConfig>(bad).is_err());
        let rbf: BasisConfig = serde_json::from_str(r#"{"kind":"gaussian_rbf","M":5,"domain":[0,1]}"#).unwrap();
        assert!(rbf.build().unwrap().width() > 0.0);
    }
}
