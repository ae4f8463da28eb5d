use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskagg::cluster::ClusterAssignment;
use riskagg::factors::{self, AggregatedFactors, FactorModel, Provenance};
use riskagg::linalg;
use riskagg::panel::{standardize, ReturnPanel, StatsSource};
use riskagg::synthetic;

fn factor_series(values: Array2<f64>) -> AggregatedFactors<f64> {
    let (n, k) = values.dim();
    AggregatedFactors::new(
        synthetic::numbered_labels("F", k),
        synthetic::business_days(n),
        values,
        Provenance::ClusteredPca,
    )
    .unwrap()
}

fn assets(values: Array2<f64>) -> ReturnPanel<f64> {
    synthetic::to_panel(values, "A")
}

/// Solves the normal equations `D'D c = D'r` by Gauss–Jordan elimination
/// with partial pivoting.
fn normal_equations(design: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let mut a = design.t().dot(design);
    let mut b = design.t().dot(r);
    let m = a.nrows();
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        for c in 0..m {
            a.swap([col, c], [pivot, c]);
        }
        for c in 0..b.ncols() {
            b.swap([col, c], [pivot, c]);
        }
        let p = a[[col, col]];
        for row in 0..m {
            if row != col {
                let f = a[[row, col]] / p;
                for c in 0..m {
                    a[[row, c]] -= f * a[[col, c]];
                }
                for c in 0..b.ncols() {
                    b[[row, c]] -= f * b[[col, c]];
                }
            }
        }
    }
    for row in 0..m {
        let p = a[[row, row]];
        b.row_mut(row).mapv_inplace(|v| v / p);
    }
    b
}

fn design_of(f: ndarray::ArrayView2<f64>) -> Array2<f64> {
    let mut d = Array2::ones((f.nrows(), f.ncols() + 1));
    d.slice_mut(ndarray::s![.., 1..]).assign(&f);
    d
}

#[test]
fn coefficients_match_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = synthetic::gaussian_matrix(400, 3, &mut rng);
    let beta = synthetic::gaussian_matrix(3, 4, &mut rng);
    let r = f.dot(&beta) + 0.05 + synthetic::gaussian_matrix(400, 4, &mut rng) * 0.3;
    let model = factors::fit_factor_model(&assets(r.clone()), &factor_series(f.clone())).unwrap();
    let oracle = normal_equations(&design_of(f.view()), &r);
    for i in 0..4 {
        assert!((model.alphas()[i] - oracle[[0, i]]).abs() <= 1e-8);
        for k in 0..3 {
            assert!((model.betas()[[i, k]] - oracle[[k + 1, i]]).abs() <= 1e-8);
        }
    }
}

#[test]
fn approx_covariance_matches_sample_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cov = synthetic::random_covariance(3, &mut rng);
    let f = synthetic::multivariate_normal(10_000, &Array1::zeros(3), &cov, &mut rng).unwrap();
    let b = synthetic::gaussian_matrix(5, 3, &mut rng);
    let r = f.dot(&b.t()) + 0.01;
    let model = factors::fit_factor_model(&assets(r.clone()), &factor_series(f)).unwrap();
    let approx = factors::approx_covariance(&model);
    let sample = linalg::sample_covariance(r.view());
    let scale = sample.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, s) in approx.iter().zip(&sample) {
        assert!((a - s).abs() <= 0.05 * scale, "{a} vs {s}");
    }
}

#[test]
fn clustered_factors_track_planted_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bp = synthetic::block_panel(2000, &[4, 5, 3, 6, 4, 5], 0.8, 0.05, &mut rng);
    let z = standardize(&synthetic::to_panel(bp.values.clone(), "x"), StatsSource::SelfWindow).unwrap();
    let assignment = ClusterAssignment::from_raw(z.labels().to_vec(), &bp.membership, None);
    let f = factors::clustered_pca_factors(&z, &assignment).unwrap();
    assert_eq!(f.n_factors(), 6);
    for k in 0..6 {
        let mut both = Array2::zeros((2000, 2));
        both.column_mut(0).assign(&f.series().column(k));
        both.column_mut(1).assign(&bp.block_factors.column(k));
        let c = linalg::sample_covariance(both.view());
        let corr = c[[0, 1]] / (c[[0, 0]] * c[[1, 1]]).sqrt();
        assert!(corr.abs() >= 0.95, "factor {k}: {corr}");
    }
}

#[test]
fn uncorrelated_clusters_give_uncorrelated_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bp = synthetic::block_panel(5000, &[4, 4, 4], 0.6, 0.0, &mut rng);
    let z = standardize(&synthetic::to_panel(bp.values, "x"), StatsSource::SelfWindow).unwrap();
    let assignment = ClusterAssignment::from_raw(z.labels().to_vec(), &bp.membership, None);
    let f = factors::clustered_pca_factors(&z, &assignment).unwrap();
    let c = linalg::sample_covariance(f.series());
    for i in 0..3 {
        for j in (i + 1)..3 {
            let corr = c[[i, j]] / (c[[i, i]] * c[[j, j]]).sqrt();
            assert!(corr.abs() <= 0.1, "({i},{j}): {corr}");
        }
    }
}

fn fitted(seed: u64, n: usize, k: usize, p: usize) -> (FactorModel<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = synthetic::gaussian_matrix(n, k, &mut rng);
    let b = synthetic::gaussian_matrix(k, p, &mut rng);
    let r = f.dot(&b) + synthetic::gaussian_matrix(n, p, &mut rng) * 0.5;
    let model = factors::fit_factor_model(&assets(r.clone()), &factor_series(f.clone())).unwrap();
    (model, f, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn residuals_orthogonal_to_factors(seed in any::<u64>(), k in 1usize..5, p in 1usize..5) {
        let (model, f, r) = fitted(seed, 60, k, p);
        let fitted = model.betas().dot(&f.t()).t().to_owned() + model.alphas();
        let resid = &r - &fitted;
        for col in f.columns() {
            let scale = linalg::norm(col) * linalg::norm(r.view().into_shape_with_order(r.len()).unwrap());
            for e in resid.columns() {
                prop_assert!(e.dot(&col).abs() / scale <= 1e-8);
            }
        }
        prop_assert!(resid.sum_axis(Axis(0)).iter().all(|v| v.abs() <= 1e-8 * r.len() as f64));
    }

    #[test]
    fn model_invariants(seed in any::<u64>(), k in 1usize..6, p in 1usize..6) {
        let (model, _, _) = fitted(seed, 50, k, p);
        let omega = model.factor_covariance();
        for i in 0..k {
            for j in 0..k {
                prop_assert!((omega[[i, j]] - omega[[j, i]]).abs() <= 1e-10);
            }
        }
        let eig = linalg::symmetric_eigen(omega.view()).unwrap();
        prop_assert!(eig.values.iter().all(|&l| l >= -1e-8));
        prop_assert!(model.residual_variances().iter().all(|&v| v >= 0.0));
        let approx = factors::approx_covariance(&model);
        let eig = linalg::symmetric_eigen(approx.view()).unwrap();
        let scale = eig.values[0].abs().max(1.0);
        prop_assert!(eig.values.iter().all(|&l| l >= -1e-8 * scale));
    }

    #[test]
    fn approx_covariance_ignores_factor_signs(seed in any::<u64>(), k in 1usize..5, flip in 0usize..5) {
        let (model, f, r) = fitted(seed, 50, k, 3);
        let flip = flip % k;
        let mut g = f.clone();
        g.column_mut(flip).mapv_inplace(|v| -v);
        let other = factors::fit_factor_model(&assets(r), &factor_series(g)).unwrap();
        prop_assert!((other.betas()[[0, flip]] + model.betas()[[0, flip]]).abs() <= 1e-9);
        let a = factors::approx_covariance(&model);
        let b = factors::approx_covariance(&other);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}
