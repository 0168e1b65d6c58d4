use std::sync::Arc;

use funquad::design::{self, build_covariate, build_design_block, n_covariates};
use funquad::gpcov::{cov_matrix, sigma_matrix};
use funquad::linalg::{kron_vec, min_eigenvalue};
use funquad::smoothing::Smoother;
use funquad::{BasisSystem, NoiseParam, NuParams, PenaltyMatrix, QuadraticModelSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

fn psd(m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(m, m).prop_map(|a| a.transpose() * a)
}

fn sorted_times(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(0u32..1000, 1..max)
        .prop_map(|s| s.into_iter().map(|k| f64::from(k) / 999.0).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn design_block_matches_direct_product(
        (m_x, m_y, nt) in (1usize..4, 1usize..5, 1usize..8),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let psi = draw(nt, m_y);
        let phi = draw(m_x, m_x);
        let w = draw(m_x, 1).column(0).into_owned();
        let z = build_covariate(&w, &phi, 2).unwrap();
        let theta = draw(m_y, z.len());
        let lhs = build_design_block(&z, &psi) * DVector::from_column_slice(theta.as_slice());
        let rhs = &psi * &theta * &z;
        prop_assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn covariate_layout(w in prop::collection::vec(-2.0f64..2.0, 1..5), a in 0.1f64..3.0) {
        let m = w.len();
        let w = DVector::from_vec(w);
        let phi = DMatrix::identity(m, m) * a;
        let z = build_covariate(&w, &phi, 2).unwrap();
        prop_assert_eq!(z.len(), n_covariates(m, 2));
        prop_assert_eq!(z[0], 1.0);
        let u = &phi * &w;
        prop_assert!((z.rows(1, m) - &u).amax() < 1e-14);
        prop_assert!((z.rows(1 + m, m * m) - kron_vec(&u, &u)).amax() < 1e-12);
    }

    #[test]
    fn penalty_is_symmetric_psd((m_x, m_y) in (1usize..4, 1usize..4), seed in any::<u64>()) {
        let runner = |m: usize, s: u64| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            PenaltyMatrix::from_matrix(a.transpose() * a).unwrap()
        };
        let spec = QuadraticModelSpec::new(runner(m_x, seed), runner(m_y, seed ^ 1), 2, 1.0).unwrap();
        let omega = design::build_penalty(&spec).unwrap();
        prop_assert!((&omega - omega.transpose()).amax() < 1e-12);
        prop_assert!(min_eigenvalue(&omega) > -1e-9 * omega.amax().max(1.0));
    }

    #[test]
    fn penalty_is_linear_in_its_parts(ox in psd(3), oy in psd(2), c in 0.1f64..5.0) {
        let spec = |x: &DMatrix<f64>, y: &DMatrix<f64>| QuadraticModelSpec::new(
            PenaltyMatrix::from_matrix(x.clone()).unwrap(),
            PenaltyMatrix::from_matrix(y.clone()).unwrap(),
            2,
            1.0,
        ).unwrap();
        let base = design::build_penalty(&spec(&ox, &oy)).unwrap();
        let scaled = design::build_penalty(&spec(&(&ox * c), &(&oy * c))).unwrap();
        prop_assert!((scaled - base * c).amax() < 1e-10 * c.max(1.0) * 10.0);
    }

    #[test]
    fn bspline_partition_of_unity(m in 4usize..12, t in 0.0f64..=1.0) {
        let b = BasisSystem::bspline(m, 0.0, 1.0, 3).unwrap();
        let v = b.eval(t).unwrap();
        prop_assert!((v.sum() - 1.0).abs() < 1e-12);
        prop_assert!(v.iter().all(|&x| x >= -1e-15));
    }

    #[test]
    fn gp_covariance_floor(times in sorted_times(12), nu1 in 0.01f64..2.0, nu2 in 0.1f64..50.0, nu3 in 0.01f64..1.0) {
        let nu = NuParams::new(nu1, nu2, nu3).unwrap();
        let s = sigma_matrix(&times, &nu, NoiseParam::Variance);
        prop_assert!((&s - s.transpose()).amax() == 0.0);
        prop_assert!(min_eigenvalue(&s) >= nu3 - 1e-9);
        let bundle = cov_matrix(&times, &nu, NoiseParam::Variance).unwrap();
        let logdet: f64 = nalgebra::SymmetricEigen::new(s).eigenvalues.iter().map(|e| e.ln()).sum();
        prop_assert!((bundle.logdet() - logdet).abs() < 1e-8 * logdet.abs().max(1.0));
    }

    #[test]
    fn smoother_is_linear(v1 in prop::collection::vec(-3.0f64..3.0, 15), v2 in prop::collection::vec(-3.0f64..3.0, 15), a in -2.0f64..2.0) {
        let basis = Arc::new(BasisSystem::bspline(6, 0.0, 1.0, 3).unwrap());
        let sm = Smoother::new(basis);
        let t = design::linspace(0.0, 1.0, 15);
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + y).collect();
        let f1 = sm.fit(&t, &v1, 1e-3).unwrap().coefficients;
        let f2 = sm.fit(&t, &v2, 1e-3).unwrap().coefficients;
        let fm = sm.fit(&t, &mix, 1e-3).unwrap().coefficients;
        prop_assert!((fm - (f1 * a + f2)).amax() < 1e-9);
    }
}
