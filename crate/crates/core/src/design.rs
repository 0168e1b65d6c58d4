//! Reduced parametric form of the functional quadratic model.
//!
//! With predictor coefficients `w_i` and predictor Gram matrix `Φ`, the
//! response is `y_i(t) = z_iᵀ Θᵀ ψ(t) + ε_i(t)` where
//! `z_i = (1, Φw_i, Φw_i ⊗ Φw_i, …)` and `Θ` is `M_y × P`. Throughout,
//! `vec` stacks the columns of `Θ`, and Kronecker products put the left
//! factor's index slowest, so the quadratic block of `z_i` has entry
//! `k·M_x + h` equal to `u_k u_h`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{difference_penalty, validate_psd, BasisSystem, PenaltyMatrix};
use crate::error::{Error, Result};
use crate::linalg::{self, kron, kron_vec};

/// Highest interaction order supported by the design assembly.
pub const MAX_ORDER: usize = 3;

/// Dimensions and penalties of an order-`p` model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModelSpec {
    pub m_x: usize,
    pub m_y: usize,
    pub order: usize,
    pub omega_x: PenaltyMatrix,
    pub omega_y: PenaltyMatrix,
    pub lambda: f64,
}

impl QuadraticModelSpec {
    pub fn new(omega_x: PenaltyMatrix, omega_y: PenaltyMatrix, order: usize, lambda: f64) -> Result<Self> {
        let spec = QuadraticModelSpec {
            m_x: omega_x.dim(),
            m_y: omega_y.dim(),
            order,
            omega_x,
            omega_y,
            lambda,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with difference penalties of `penalty_order` on both bases
    /// (zero penalty where the basis is too small for that order).
    pub fn with_difference_penalties(
        m_x: usize,
        m_y: usize,
        order: usize,
        penalty_order: usize,
        lambda: f64,
    ) -> Result<Self> {
        let pen = |m: usize| {
            if m > penalty_order {
                difference_penalty(m, penalty_order)
            } else {
                Ok(PenaltyMatrix::zeros(m))
            }
        };
        Self::new(pen(m_x)?, pen(m_y)?, order, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > MAX_ORDER {
            return Err(Error::Validation(format!(
                "interaction order must be in 1..={MAX_ORDER}, got {}",
                self.order
            )));
        }
        if self.m_x == 0 || self.m_y == 0 {
            return Err(Error::Dimension("basis dimensions must be positive".into()));
        }
        if self.omega_x.dim() != self.m_x || self.omega_y.dim() != self.m_y {
            return Err(Error::Dimension("penalty sizes do not match M_x, M_y".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        validate_psd(&self.omega_x.matrix, "Omega_x")?;
        validate_psd(&self.omega_y.matrix, "Omega_y")?;
        Ok(())
    }

    /// `P = 1 + M_x + … + M_xᵖ`.
    pub fn n_covariates(&self) -> usize {
        n_covariates(self.m_x, self.order)
    }

    /// Length of `vec Θ`.
    pub fn n_params(&self) -> usize {
        self.n_covariates() * self.m_y
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        QuadraticModelSpec {
            lambda,
            ..self.clone()
        }
    }
}

pub fn n_covariates(m_x: usize, order: usize) -> usize {
    (0..=order).map(|k| m_x.pow(k as u32)).sum()
}

/// `M_x × M_x × M_y` coefficient tensor `γ_{hkl}` of the quadratic term.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTensor {
    m_x: usize,
    m_y: usize,
    data: Vec<f64>,
}

impl CoefficientTensor {
    pub fn zeros(m_x: usize, m_y: usize) -> Self {
        CoefficientTensor {
            m_x,
            m_y,
            data: vec![0.0; m_x * m_x * m_y],
        }
    }

    pub fn from_fn(m_x: usize, m_y: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(m_x, m_y);
        for l in 0..m_y {
            for k in 0..m_x {
                for h in 0..m_x {
                    t.set(h, k, l, f(h, k, l));
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m_x, self.m_x, self.m_y)
    }

    fn idx(&self, h: usize, k: usize, l: usize) -> usize {
        h + self.m_x * (k + self.m_x * l)
    }

    pub fn get(&self, h: usize, k: usize, l: usize) -> f64 {
        self.data[self.idx(h, k, l)]
    }

    pub fn set(&mut self, h: usize, k: usize, l: usize, v: f64) {
        let i = self.idx(h, k, l);
        self.data[i] = v;
    }

    /// `(γ_{hkl} + γ_{khl}) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.m_x, self.m_y, |h, k, l| 0.5 * (self.get(h, k, l) + self.get(k, h, l)))
    }

    /// Inverse of [`matricize_mode3`].
    pub fn tensorize(g3: &DMatrix<f64>, m_x: usize) -> Result<Self> {
        if g3.ncols() != m_x * m_x {
            return Err(Error::Dimension(format!(
                "mode-3 unfolding has {} columns, expected {}",
                g3.ncols(),
                m_x * m_x
            )));
        }
        Ok(Self::from_fn(m_x, g3.nrows(), |h, k, l| g3[(l, k * m_x + h)]))
    }
}

/// Mode-3 unfolding: `Γ_(3)[l, k·M_x + h] = γ_{hkl}`.
pub fn matricize_mode3(g: &CoefficientTensor) -> DMatrix<f64> {
    let m_x = g.m_x;
    DMatrix::from_fn(g.m_y, m_x * m_x, |l, c| g.get(c % m_x, c / m_x, l))
}

/// `Θ ∈ R^{M_y × P}` with column blocks `(α, Bᵀ, Γ_(3), …)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    matrix: DMatrix<f64>,
    m_x: usize,
    order: usize,
}

impl ThetaMatrix {
    pub fn new(matrix: DMatrix<f64>, m_x: usize, order: usize) -> Result<Self> {
        if matrix.ncols() != n_covariates(m_x, order) {
            return Err(Error::Dimension(format!(
                "Theta has {} columns, expected {}",
                matrix.ncols(),
                n_covariates(m_x, order)
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite entry in Theta".into()));
        }
        Ok(ThetaMatrix { matrix, m_x, order })
    }

    pub fn zeros(m_x: usize, m_y: usize, order: usize) -> Self {
        ThetaMatrix {
            matrix: DMatrix::zeros(m_y, n_covariates(m_x, order)),
            m_x,
            order,
        }
    }

    pub fn from_vec(v: &DVector<f64>, spec: &QuadraticModelSpec) -> Result<Self> {
        if v.len() != spec.n_params() {
            return Err(Error::Dimension(format!(
                "vec Theta has length {}, expected {}",
                v.len(),
                spec.n_params()
            )));
        }
        Self::new(
            DMatrix::from_column_slice(spec.m_y, spec.n_covariates(), v.as_slice()),
            spec.m_x,
            spec.order,
        )
    }

    /// Assemble an order-2 Θ from its blocks.
    pub fn from_blocks(alpha: &DVector<f64>, b: &DMatrix<f64>, gamma: &CoefficientTensor) -> Result<Self> {
        let (m_x, m_y) = (b.nrows(), b.ncols());
        if alpha.len() != m_y || gamma.dims() != (m_x, m_x, m_y) {
            return Err(Error::Dimension("inconsistent Theta blocks".into()));
        }
        let mut theta = DMatrix::zeros(m_y, n_covariates(m_x, 2));
        theta.set_column(0, alpha);
        theta.view_mut((0, 1), (m_y, m_x)).copy_from(&b.transpose());
        theta
            .view_mut((0, 1 + m_x), (m_y, m_x * m_x))
            .copy_from(&matricize_mode3(gamma));
        Self::new(theta, m_x, 2)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn m_x(&self) -> usize {
        self.m_x
    }

    pub fn m_y(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> DVector<f64> {
        self.matrix.column(0).into_owned()
    }

    /// `B` as `M_x × M_y`.
    pub fn b(&self) -> DMatrix<f64> {
        self.matrix.columns(1, self.m_x).transpose()
    }

    /// `Γ_(3)` as `M_y × M_x²`; zero for linear models.
    pub fn gamma3(&self) -> DMatrix<f64> {
        if self.order < 2 {
            return DMatrix::zeros(self.m_y(), self.m_x * self.m_x);
        }
        self.matrix.columns(1 + self.m_x, self.m_x * self.m_x).into_owned()
    }

    pub fn gamma_tensor(&self) -> CoefficientTensor {
        CoefficientTensor::tensorize(&self.gamma3(), self.m_x).expect("shape fixed by construction")
    }

    /// Column-stacked `vec Θ`.
    pub fn vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.matrix.as_slice())
    }

    pub fn row_major(&self) -> Vec<f64> {
        self.matrix.transpose().as_slice().to_vec()
    }

    /// Copy with the quadratic (and higher) blocks set to zero.
    pub fn linear_part(&self) -> Self {
        let mut m = self.matrix.clone();
        let start = 1 + self.m_x;
        m.columns_mut(start, m.ncols() - start).fill(0.0);
        ThetaMatrix { matrix: m, ..self.clone() }
    }
}

/// `z = (1, wᵀΦ, (w⊗w)ᵀ(Φ⊗Φ), …)` up to `order`.
pub fn build_covariate(w: &DVector<f64>, phi: &DMatrix<f64>, order: usize) -> Result<DVector<f64>> {
    if !phi.is_square() || phi.nrows() != w.len() {
        return Err(Error::Dimension(format!(
            "Gram matrix {}x{} does not match {} coefficients",
            phi.nrows(),
            phi.ncols(),
            w.len()
        )));
    }
    if order == 0 || order > MAX_ORDER {
        return Err(Error::Validation(format!("interaction order must be in 1..={MAX_ORDER}")));
    }
    let u = phi.tr_mul(w);
    let mut z = Vec::with_capacity(n_covariates(w.len(), order));
    z.push(1.0);
    let mut power = u.clone();
    z.extend(power.iter());
    for _ in 1..order {
        power = kron_vec(&power, &u);
        z.extend(power.iter());
    }
    Ok(DVector::from_vec(z))
}

/// `X_i = z_iᵀ ⊗ Ψ_i`.
pub fn build_design_block(z: &DVector<f64>, psi: &DMatrix<f64>) -> DMatrix<f64> {
    kron(&DMatrix::from_row_slice(1, z.len(), z.as_slice()), psi)
}

/// `Ω_x* = blockdiag(0, Ω_x, Ω_x⊗I + I⊗Ω_x, …)`.
pub fn build_penalty_x_star(spec: &QuadraticModelSpec) -> DMatrix<f64> {
    let m = spec.m_x;
    let p = spec.n_covariates();
    let ox = &spec.omega_x.matrix;
    let mut out = DMatrix::zeros(p, p);
    let mut offset = 1;
    for k in 1..=spec.order {
        let size = m.pow(k as u32);
        // Σ_j I ⊗ … ⊗ Ω_x (slot j) ⊗ … ⊗ I
        let mut block = DMatrix::zeros(size, size);
        for slot in 0..k {
            let left = linalg::identity(m.pow(slot as u32));
            let right = linalg::identity(m.pow((k - slot - 1) as u32));
            block += kron(&kron(&left, ox), &right);
        }
        out.view_mut((offset, offset), (size, size)).copy_from(&block);
        offset += size;
    }
    out
}

/// `Ω = Ω_x* ⊗ I_{M_y} + I_P ⊗ Ω_y`, so that
/// `(vecΘ)ᵀ Ω vecΘ = tr(Θ Ω_x* Θᵀ) + tr(Θᵀ Ω_y Θ)`.
pub fn build_penalty(spec: &QuadraticModelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let xs = build_penalty_x_star(spec);
    Ok(kron(&xs, &linalg::identity(spec.m_y)) + kron(&linalg::identity(spec.n_covariates()), &spec.omega_y.matrix))
}

/// Eigenvalues of `Ω` from the Kronecker-sum structure, ascending.
pub fn penalty_eigenvalues(spec: &QuadraticModelSpec) -> Vec<f64> {
    let ex = linalg::sorted_eigenvalues(&spec.omega_x.matrix);
    let ey = linalg::sorted_eigenvalues(&spec.omega_y.matrix);
    // eigenvalues of the order-k block are all k-fold sums of Ω_x eigenvalues
    let mut star = vec![0.0];
    let mut level = vec![0.0];
    for _ in 0..spec.order {
        level = level.iter().flat_map(|a| ex.iter().map(move |b| a + b)).collect();
        star.extend(&level);
    }
    let mut all: Vec<f64> = star.iter().flat_map(|a| ey.iter().map(move |b| a + b)).collect();
    all.sort_by(f64::total_cmp);
    all
}

/// Coefficient surfaces evaluated on grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surfaces {
    pub grid_r: Vec<f64>,
    pub grid_s: Vec<f64>,
    pub grid_t: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `beta[s][t]`
    pub beta: Vec<Vec<f64>>,
    /// `gamma[r][s][t]` of the symmetrized tensor; absent for linear models.
    pub gamma: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn eval_surfaces(
    theta: &ThetaMatrix,
    predictor_basis: &BasisSystem,
    response_basis: &BasisSystem,
    grid_s: &[f64],
    grid_t: &[f64],
    grid_r: &[f64],
) -> Result<Surfaces> {
    if theta.order() > 2 {
        return Err(Error::Validation("surface evaluation supports interaction order <= 2".into()));
    }
    if predictor_basis.len() != theta.m_x() || response_basis.len() != theta.m_y() {
        return Err(Error::Dimension("bases do not match Theta".into()));
    }
    let phi_s = predictor_basis.design_matrix(grid_s)?;
    let phi_r = predictor_basis.design_matrix(grid_r)?;
    let psi_t = response_basis.design_matrix(grid_t)?;
    let alpha = (&psi_t * theta.alpha()).as_slice().to_vec();
    let beta_m = &phi_s * theta.b() * psi_t.transpose();
    let beta = (0..grid_s.len())
        .map(|i| beta_m.row(i).iter().copied().collect())
        .collect();
    let gamma = if theta.order() == 2 {
        let g = theta.gamma_tensor().symmetrized();
        let m_x = theta.m_x();
        let mut out = vec![vec![vec![0.0; grid_t.len()]; grid_s.len()]; grid_r.len()];
        for l in 0..theta.m_y() {
            let slice = DMatrix::from_fn(m_x, m_x, |h, k| g.get(h, k, l));
            let rs = &phi_r * slice * phi_s.transpose();
            for (ri, row) in out.iter_mut().enumerate() {
                for (si, cell) in row.iter_mut().enumerate() {
                    let v = rs[(ri, si)];
                    for (ti, o) in cell.iter_mut().enumerate() {
                        *o += v * psi_t[(ti, l)];
                    }
                }
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(Surfaces {
        grid_r: grid_r.to_vec(),
        grid_s: grid_s.to_vec(),
        grid_t: grid_t.to_vec(),
        alpha,
        beta,
        gamma,
    })
}

/// `n` equally spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl Surfaces {
    pub fn write_alpha_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "value"])?;
        for (t, v) in self.grid_t.iter().zip(&self.alpha) {
            out.write_record([t.to_string(), v.to_string()])?;
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn write_beta_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["s", "t", "value"])?;
        for (s, row) in self.grid_s.iter().zip(&self.beta) {
            for (t, v) in self.grid_t.iter().zip(row) {
                out.write_record([s.to_string(), t.to_string(), v.to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn write_gamma_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r", "s", "t", "value"])?;
        if let Some(g) = &self.gamma {
            for (r, plane) in self.grid_r.iter().zip(g) {
                for (s, row) in self.grid_s.iter().zip(plane) {
                    for (t, v) in self.grid_t.iter().zip(row) {
                        out.write_record([r.to_string(), s.to_string(), t.to_string(), v.to_string()])?;
                    }
                }
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matricize_scalar_and_index_map() {
        let one = CoefficientTensor::from_fn(1, 1, |_, _, _| 4.5);
        assert_eq!(matricize_mode3(&one), DMatrix::from_element(1, 1, 4.5));

        let g = CoefficientTensor::from_fn(2, 1, |h, k, _| (10 * (h + 1) + (k + 1)) as f64);
        let m = matricize_mode3(&g);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn matricize_roundtrip_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = CoefficientTensor::from_fn(3, 4, |_, _, _| rng.random_range(-1.0..1.0));
        let m = matricize_mode3(&g);
        for l in 0..4 {
            for k in 0..3 {
                for h in 0..3 {
                    assert_eq!(m[(l, k * 3 + h)], g.get(h, k, l));
                }
            }
        }
        assert_eq!(CoefficientTensor::tensorize(&m, 3).unwrap(), g);
    }

    #[test]
    fn covariate_cases() {
        let phi = DMatrix::identity(3, 3);
        let z = build_covariate(&DVector::zeros(3), &phi, 2).unwrap();
        assert_eq!(z.len(), 13);
        assert_eq!(z[0], 1.0);
        assert!(z.rows(1, 12).iter().all(|&v| v == 0.0));

        let z = build_covariate(&DVector::from_vec(vec![2.0]), &DMatrix::from_element(1, 1, 3.0), 2).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 6.0, 36.0]);

        assert!(build_covariate(&DVector::zeros(2), &phi, 2).is_err());
        assert!(build_covariate(&DVector::zeros(3), &phi, 4).is_err());
    }

    #[test]
    fn covariate_quadratic_block_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = 3;
        let w = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let phi = rand_mat(&mut rng, m, m);
        let z = build_covariate(&w, &phi, 2).unwrap();
        // (w⊗w)ᵀ(Φ⊗Φ): entry (a·m + b) = Σ_{h,k} w_h w_k Φ[h,a] Φ[k,b]
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for h in 0..m {
                    for k in 0..m {
                        s += w[h] * w[k] * phi[(h, a)] * phi[(k, b)];
                    }
                }
                assert!((z[1 + m + a * m + b] - s).abs() < 1e-12);
            }
        }
        for a in 0..m {
            let s: f64 = (0..m).map(|h| w[h] * phi[(h, a)]).sum();
            assert!((z[1 + a] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn covariate_order1_is_linear_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let phi = rand_mat(&mut rng, 4, 4);
        let z1 = build_covariate(&w, &phi, 1).unwrap();
        let z2 = build_covariate(&w, &phi, 2).unwrap();
        let z3 = build_covariate(&w, &phi, 3).unwrap();
        assert_eq!(z1.len(), 5);
        assert_eq!(z3.len(), 1 + 4 + 16 + 64);
        assert_eq!(z1.as_slice(), &z2.as_slice()[..5]);
        assert_eq!(z2.as_slice(), &z3.as_slice()[..21]);
    }

    #[test]
    fn design_block_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = rand_mat(&mut rng, 4, 3);
        let z = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let x = build_design_block(&z, &psi);
        assert_eq!(x.shape(), (4, 15));
        assert_eq!(&x * DVector::zeros(15), DVector::zeros(4));
        let theta = rand_mat(&mut rng, 3, 5);
        let vt = DVector::from_column_slice(theta.as_slice());
        assert!((&x * vt - &psi * &theta * &z).amax() < 1e-13);

        let z1 = DVector::from_element(1, 2.5);
        assert_eq!(build_design_block(&z1, &psi), &psi * 2.5);
    }

    fn six_term_penalty(theta: &ThetaMatrix, ox: &DMatrix<f64>, oy: &DMatrix<f64>) -> f64 {
        let m = ox.nrows();
        let a = theta.alpha();
        let b = theta.b();
        let g = theta.gamma3();
        let i = DMatrix::identity(m, m);
        (a.transpose() * oy * &a)[(0, 0)]
            + (b.transpose() * ox * &b).trace()
            + (&b * oy * b.transpose()).trace()
            + (&g * kron(ox, &i) * g.transpose()).trace()
            + (&g * kron(&i, ox) * g.transpose()).trace()
            + (g.transpose() * oy * &g).trace()
    }

    #[test]
    fn penalty_small_case_and_zero() {
        let spec = QuadraticModelSpec::new(
            PenaltyMatrix::from_matrix(DMatrix::from_element(1, 1, 2.0)).unwrap(),
            PenaltyMatrix::from_matrix(DMatrix::from_element(1, 1, 5.0)).unwrap(),
            2,
            1.0,
        )
        .unwrap();
        let om = build_penalty(&spec).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0, 4.0])) + DMatrix::identity(3, 3) * 5.0;
        assert_eq!(om, expected);

        let zero = QuadraticModelSpec::new(PenaltyMatrix::zeros(3), PenaltyMatrix::zeros(2), 2, 1.0).unwrap();
        assert_eq!(build_penalty(&zero).unwrap().amax(), 0.0);
    }

    #[test]
    fn penalty_equals_six_trace_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = QuadraticModelSpec::with_difference_penalties(4, 5, 2, 2, 0.1).unwrap();
        let om = build_penalty(&spec).unwrap();
        for _ in 0..20 {
            let theta = ThetaMatrix::new(rand_mat(&mut rng, 5, spec.n_covariates()), 4, 2).unwrap();
            let v = theta.vec();
            let quad = v.dot(&(&om * &v));
            let direct = six_term_penalty(&theta, &spec.omega_x.matrix, &spec.omega_y.matrix);
            assert!((quad - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn penalty_is_psd_and_rejects_bad_input() {
        let spec = QuadraticModelSpec::with_difference_penalties(4, 4, 2, 2, 1.0).unwrap();
        let mut om = build_penalty(&spec).unwrap();
        for i in 0..om.nrows() {
            om[(i, i)] += 1e-12;
        }
        assert!(nalgebra::Cholesky::new(om).is_some());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(PenaltyMatrix::from_matrix(bad).is_err());
    }

    #[test]
    fn penalty_order3_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = QuadraticModelSpec::with_difference_penalties(3, 3, 3, 2, 1.0).unwrap();
        let om = build_penalty(&spec).unwrap();
        assert_eq!(om.nrows(), spec.n_params());
        let theta = rand_mat(&mut rng, 3, spec.n_covariates());
        let xs = build_penalty_x_star(&spec);
        let v = DVector::from_column_slice(theta.as_slice());
        let expected = (&theta * xs * theta.transpose()).trace()
            + (theta.transpose() * &spec.omega_y.matrix * &theta).trace();
        assert!((v.dot(&(&om * &v)) - expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn kronecker_sum_eigenvalues_match_dense() {
        for (mx, my, order) in [(3, 4, 2), (4, 3, 1), (2, 3, 3)] {
            let spec = QuadraticModelSpec::with_difference_penalties(mx, my, order, 2, 1.0).unwrap();
            let dense = linalg::sorted_eigenvalues(&build_penalty(&spec).unwrap());
            let fast = penalty_eigenvalues(&spec);
            assert_eq!(dense.len(), fast.len());
            for (a, b) in dense.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gamma_symmetrization_leaves_response_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m_x, m_y) = (3, 4);
        let alpha = DVector::from_fn(m_y, |_, _| rng.random_range(-1.0..1.0));
        let b = rand_mat(&mut rng, m_x, m_y);
        let g = CoefficientTensor::from_fn(m_x, m_y, |_, _, _| rng.random_range(-1.0..1.0));
        let t1 = ThetaMatrix::from_blocks(&alpha, &b, &g).unwrap();
        let t2 = ThetaMatrix::from_blocks(&alpha, &b, &g.symmetrized()).unwrap();
        let phi = rand_mat(&mut rng, m_x, m_x);
        let phi = &phi * phi.transpose();
        for _ in 0..10 {
            let w = DVector::from_fn(m_x, |_, _| rng.random_range(-1.0..1.0));
            let z = build_covariate(&w, &phi, 2).unwrap();
            let psi = DVector::from_fn(m_y, |_, _| rng.random_range(0.0..1.0));
            let y1 = z.dot(&(t1.matrix().transpose() * &psi));
            let y2 = z.dot(&(t2.matrix().transpose() * &psi));
            assert!((y1 - y2).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_views_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = QuadraticModelSpec::with_difference_penalties(3, 2, 2, 2, 0.0).unwrap();
        let v = DVector::from_fn(spec.n_params(), |_, _| rng.random_range(-1.0..1.0));
        let t = ThetaMatrix::from_vec(&v, &spec).unwrap();
        assert_eq!(t.vec(), v);
        let back = ThetaMatrix::from_blocks(&t.alpha(), &t.b(), &t.gamma_tensor()).unwrap();
        assert_eq!(back, t);
        assert!(t.linear_part().gamma3().iter().all(|&x| x == 0.0));
        assert_eq!(t.row_major()[1], t.matrix()[(0, 1)]);
    }

    #[test]
    fn surfaces_zero_rank_one_and_triple_sum() {
        let pb = BasisSystem::bspline(4, 0.0, 1.0, 3).unwrap();
        let rb = BasisSystem::bspline(3, 0.0, 2.0, 2).unwrap();
        let gs = linspace(0.0, 1.0, 5);
        let gt = linspace(0.0, 2.0, 4);
        let gr = linspace(0.0, 1.0, 3);
        let zero = ThetaMatrix::zeros(4, 3, 2);
        let s = eval_surfaces(&zero, &pb, &rb, &gs, &gt, &gr).unwrap();
        assert!(s.alpha.iter().all(|&v| v == 0.0));
        assert!(s.beta.iter().flatten().all(|&v| v == 0.0));
        assert!(s.gamma.as_ref().unwrap().iter().flatten().flatten().all(|&v| v == 0.0));

        let mut b = DMatrix::zeros(4, 3);
        b[(0, 0)] = 1.0;
        let rank1 = ThetaMatrix::from_blocks(&DVector::zeros(3), &b, &CoefficientTensor::zeros(4, 3)).unwrap();
        let s = eval_surfaces(&rank1, &pb, &rb, &gs, &gt, &gr).unwrap();
        for (i, &sv) in gs.iter().enumerate() {
            for (j, &tv) in gt.iter().enumerate() {
                let expected = pb.eval(sv).unwrap()[0] * rb.eval(tv).unwrap()[0];
                assert!((s.beta[i][j] - expected).abs() < 1e-15);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = CoefficientTensor::from_fn(4, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let t = ThetaMatrix::from_blocks(&DVector::zeros(3), &DMatrix::zeros(4, 3), &g).unwrap();
        let (r, sv, tv) = (0.31, 0.77, 1.4);
        let s = eval_surfaces(&t, &pb, &rb, &[sv], &[tv], &[r]).unwrap();
        let (pr, ps, pt) = (pb.eval(r).unwrap(), pb.eval(sv).unwrap(), rb.eval(tv).unwrap());
        let mut direct = 0.0;
        for h in 0..4 {
            for k in 0..4 {
                for l in 0..3 {
                    direct += 0.5 * (g.get(h, k, l) + g.get(k, h, l)) * pr[h] * ps[k] * pt[l];
                }
            }
        }
        assert!((s.gamma.unwrap()[0][0][0] - direct).abs() < 1e-12);
        let swapped = eval_surfaces(&t, &pb, &rb, &[r], &[tv], &[sv]).unwrap();
        assert!((swapped.gamma.unwrap()[0][0][0] - direct).abs() < 1e-12);
        assert!(eval_surfaces(&t, &pb, &rb, &[1.5], &[tv], &[r]).is_err());
    }

    #[test]
    fn surface_csv_layout() {
        let pb = BasisSystem::bspline(4, 0.0, 1.0, 3).unwrap();
        let s = eval_surfaces(&ThetaMatrix::zeros(4, 4, 2), &pb, &pb, &[0.0, 1.0], &[0.5], &[0.0]).unwrap();
        let mut buf = Vec::new();
        s.write_gamma_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("r,s,t,value\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
