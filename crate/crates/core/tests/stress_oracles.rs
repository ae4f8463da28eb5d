use ndarray::{array, s, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskagg::factors::{FactorModel, Provenance};
use riskagg::linalg;
use riskagg::nnet::{HiddenSpec, TrainConfig};
use riskagg::stress::{self, Propagation, StressScenario};
use riskagg::synthetic;

fn model_with(mu: Array1<f64>, omega: Array2<f64>, betas: Array2<f64>, alphas: Array1<f64>) -> FactorModel<f64> {
    let (p, k) = betas.dim();
    let sds = omega.diag().mapv(f64::sqrt);
    FactorModel::from_parts(
        synthetic::numbered_labels("A", p),
        synthetic::numbered_labels("F", k),
        alphas,
        betas,
        Array1::zeros(p),
        mu,
        omega,
        sds,
        Provenance::ClusteredPca,
        1000,
    )
    .unwrap()
}

fn random_model(seed: u64, k: usize, p: usize) -> FactorModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = synthetic::random_covariance(k, &mut rng);
    let mu = synthetic::gaussian_matrix(1, k, &mut rng).row(0).to_owned() * 0.1;
    let betas = synthetic::gaussian_matrix(p, k, &mut rng);
    let alphas = synthetic::gaussian_matrix(1, p, &mut rng).row(0).to_owned() * 0.01;
    model_with(mu, omega, betas, alphas)
}

fn scenario(labels: &[&str], shifts: &[f64]) -> StressScenario {
    StressScenario::new(
        "s",
        labels.iter().map(|l| l.to_string()).collect(),
        shifts.to_vec(),
        Propagation::ConditionalGaussian,
    )
    .unwrap()
}

#[test]
fn conditional_mean_matches_monte_carlo_regression() {
    let model = random_model(21, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 100_000;
    let draws = synthetic::multivariate_normal(
        n,
        model.factor_means(),
        model.factor_covariance(),
        &mut rng,
    )
    .unwrap();
    let sc = scenario(&["F01", "F03"], &[-2.0, 1.5]);
    let vector = stress::conditional_stress(&model, &sc).unwrap();

    // regress each peripheral factor on [1, F01, F03] over the draws
    let core = [0usize, 2];
    let mut design = Array2::ones((n, 3));
    for (c, &j) in core.iter().enumerate() {
        design.column_mut(c + 1).assign(&draws.column(j));
    }
    let x0 = array![1.0, vector[0], vector[2]];
    let gram_inv = {
        let g = design.t().dot(&design);
        let l = linalg::cholesky(g.view()).unwrap();
        linalg::cholesky_solve(l.view(), Array2::eye(3).view())
    };
    let leverage = x0.dot(&gram_inv.dot(&x0));
    for u in [1usize, 3, 4, 5] {
        let y = draws.column(u).to_owned().insert_axis(Axis(1));
        let coef = linalg::least_squares(design.view(), y.view()).unwrap();
        let resid = &y - &design.dot(&coef);
        let sigma2 = resid.mapv(|v| v * v).sum() / (n - 3) as f64;
        let predicted = x0.dot(&coef.column(0));
        let se = (sigma2 * leverage).sqrt();
        assert!(
            (vector[u] - predicted).abs() <= 3.0 * se,
            "factor {u}: {} vs {predicted} (se {se})",
            vector[u]
        );
    }
}

#[test]
fn zero_shift_is_a_fixed_point() {
    let model = random_model(23, 5, 2);
    let sc = scenario(&["F02", "F05"], &[0.0, 0.0]);
    let v = stress::conditional_stress(&model, &sc).unwrap();
    for (a, b) in v.iter().zip(model.factor_means()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

/// Objective on an even angular grid of the 2-d ellipsoid boundary.
fn grid_minimum(problem: &stress::EllipsoidProblem<f64>, points: usize) -> f64 {
    let l = linalg::cholesky(problem.covariance.view()).unwrap();
    (0..points)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / points as f64;
            let s = &problem.mean + &(l.dot(&array![t.cos(), t.sin()]) * problem.radius);
            problem.objective(s.view())
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn ellipsoid_optimum_beats_boundary_grid() {
    for seed in 0..5u64 {
        let model = random_model(100 + seed, 4, 5);
        let w = stress::equal_weights::<f64>(5);
        let subset = vec!["F02".to_string(), "F04".to_string()];
        let problem = stress::ellipsoid_problem(&model, &subset, 2.5, w.view()).unwrap();
        let (s, binding) = problem.solve().unwrap();
        assert!(binding);
        let best = problem.objective(s.view());
        let grid = grid_minimum(&problem, 10_000);
        // half-step angular error of the grid, second order in the spacing
        let step = std::f64::consts::TAU / 10_000.0;
        let spread = best.abs().max(problem.offset.abs()).max(1.0);
        assert!(best <= grid + 1e-9, "seed {seed}: {best} vs grid {grid}");
        assert!(grid - best <= spread * step * step, "seed {seed}: {best} vs grid {grid}");
        let m = problem.mahalanobis(s.view()).unwrap();
        assert!((m - 2.5).abs() <= 1e-6, "seed {seed}: {m}");
    }
}

#[test]
fn ellipsoid_optimum_beats_random_boundary_points() {
    let model = random_model(31, 5, 4);
    let w = stress::equal_weights::<f64>(4);
    let subset: Vec<String> = synthetic::numbered_labels("F", 5)[..3].to_vec();
    let problem = stress::ellipsoid_problem(&model, &subset, 1.0, w.view()).unwrap();
    let (s, _) = problem.solve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let sampled = problem.boundary_search(10_000, &mut rng).unwrap();
    let best = problem.objective(s.view());
    assert!(best <= sampled + 1e-9);
    assert!(sampled - best <= 1e-2 * (sampled - problem.objective(problem.mean.view())).abs());
}

#[test]
fn gaussian_lower_tail_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = synthetic::gaussian_matrix(1_000_000, 1, &mut rng);
    let tf = stress::tail_frequency(x.column(0), -2.0).unwrap();
    assert!((tf.fraction - 0.0228).abs() <= 0.002, "{}", tf.fraction);
    assert!((tf.days_per_year - 250.0 * tf.fraction).abs() <= 1e-12);
}

#[test]
fn portfolio_impact_by_hand() {
    let model = model_with(
        array![0.0, 0.0],
        array![[1.0, 0.0], [0.0, 1.0]],
        array![[1.0, 0.5], [-2.0, 0.0], [0.0, 3.0]],
        array![0.01, 0.0, -0.02],
    );
    let f = array![-0.1, 0.2];
    let w = array![0.5, 0.25, 0.25];
    let impact = stress::portfolio_impact(&model, f.view(), w.view()).unwrap();
    // 0.01 - 0.1 + 0.1 = 0.01; 0.2; -0.02 + 0.6 = 0.58
    let expected = [0.01, 0.2, 0.58];
    for (a, b) in impact.per_asset.iter().zip(expected) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert!((impact.portfolio - (0.005 + 0.05 + 0.145)).abs() <= 1e-15);
    assert!(stress::portfolio_impact(&model, f.view(), array![0.5, 0.5, 0.5].view()).is_err());
}

fn propagation_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 150,
        batch_size: 64,
        step_size: 1e-2,
        validation_fraction: None,
        early_stop_patience: None,
        refit_on_full: false,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn network_propagation_of_independent_codes_stays_at_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n = 4000;
    let codes = synthetic::gaussian_matrix(n, 3, &mut rng);
    let labels = synthetic::numbered_labels("C", 3);
    let sc = StressScenario::new("ind", vec!["C01".into()], vec![-2.0], Propagation::AeDecoder).unwrap();
    let out = stress::propagate_with_network(codes.view(), &labels, &sc, &HiddenSpec::linear(), &propagation_config())
        .unwrap();
    // standard error of a regression prediction at a point 2 sd from the centre
    let se = ((1.0 + 4.0) / n as f64).sqrt();
    for u in 1..3 {
        let z = (out.vector[u] - out.code_means[u]) / out.code_sds[u];
        assert!(z.abs() <= 2.0 * se, "code {u}: {z}");
    }
    assert!((out.vector[0] - (out.code_means[0] - 2.0 * out.code_sds[0])).abs() <= 1e-12);
}

#[test]
fn network_propagation_recovers_planted_linear_link() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let n = 4000;
    let base = synthetic::gaussian_matrix(n, 2, &mut rng);
    let mut codes = Array2::zeros((n, 2));
    codes.column_mut(0).assign(&base.column(0));
    let linked = &base.column(0) * 0.5 + &(&base.column(1) * 0.01);
    codes.column_mut(1).assign(&linked);
    let labels = synthetic::numbered_labels("C", 2);
    let sc = StressScenario::new("link", vec!["C01".into()], vec![2.0], Propagation::AeDecoder).unwrap();
    let out = stress::propagate_with_network(codes.view(), &labels, &sc, &HiddenSpec::linear(), &propagation_config())
        .unwrap();
    let expected = 0.5 * out.vector[0];
    assert!(
        (out.vector[1] - expected).abs() <= 0.05 * expected.abs(),
        "{} vs {expected}",
        out.vector[1]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conditional_stress_is_affine_in_shift(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        t in 0.0f64..1.0,
    ) {
        let model = random_model(seed, 5, 2);
        let at = |x: f64, y: f64| stress::conditional_stress(&model, &scenario(&["F01", "F04"], &[x, y])).unwrap();
        let v1 = at(a, b);
        let v2 = at(b, -a);
        let mix = at(t * a + (1.0 - t) * b, t * b - (1.0 - t) * a);
        let combo = &v1 * t + &v2 * (1.0 - t);
        for (x, y) in mix.iter().zip(&combo) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn ellipsoid_invariants(seed in any::<u64>(), k in 1usize..5, radius in 0.1f64..4.0, scale in 0.1f64..10.0) {
        let model = random_model(seed, 5, 3);
        let subset = synthetic::numbered_labels("F", 5)[..k].to_vec();
        let w = stress::equal_weights::<f64>(3);
        let problem = stress::ellipsoid_problem(&model, &subset, radius, w.view()).unwrap();
        let (s, _) = problem.solve().unwrap();
        prop_assert!(problem.objective(s.view()) <= problem.objective(problem.mean.view()) + 1e-12);
        let scaled = w.mapv(|v| v * scale);
        let other = stress::ellipsoid_problem(&model, &subset, radius, scaled.view()).unwrap();
        let (s2, _) = other.solve().unwrap();
        for (x, y) in s.iter().zip(&s2) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        let full = stress::ellipsoid_factor_vector(&model, &stress::worst_case_ellipsoid(&model, &subset, radius, w.view()).unwrap()).unwrap();
        prop_assert!(full.slice(s![k..]).iter().zip(model.factor_means().slice(s![k..])).all(|(a, b)| a == b));
    }
}
