//! Synthetic panels with planted structure, for tests, benchmarks and
//! demonstrations.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, Weekday};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::panel::ReturnPanel;

/// `n` consecutive weekdays starting on 2000-01-03.
pub fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

pub fn numbered_labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i:02}")).collect()
}

pub fn gaussian_matrix<R: Rng>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// `n` draws from `N(mean, cov)` via the Cholesky factor of `cov`.
pub fn multivariate_normal<R: Rng>(
    n: usize,
    mean: &Array1<f64>,
    cov: &Array2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>, linalg::LinalgError> {
    let l = linalg::cholesky(cov.view())?;
    let z = gaussian_matrix(n, mean.len(), rng);
    Ok(z.dot(&l.t()) + mean)
}

/// Random symmetric positive-definite matrix `A A' / k + δ I` with a
/// well-spread spectrum.
pub fn random_covariance<R: Rng>(k: usize, rng: &mut R) -> Array2<f64> {
    let a = gaussian_matrix(k, k, rng);
    let mut c = a.dot(&a.t()) / k as f64 + Array2::<f64>::eye(k) * 0.2;
    linalg::symmetrize(&mut c);
    c
}

/// Unit-variance columns in blocks: within-block correlation `rho_within`,
/// between-block correlation `rho_between` (`0 <= rho_between <= rho_within < 1`).
#[derive(Debug, Clone)]
pub struct BlockPanel {
    pub values: Array2<f64>,
    /// Planted block factor per block (`n x b`), unit variance.
    pub block_factors: Array2<f64>,
    /// Block index (0-based) of each column.
    pub membership: Vec<usize>,
}

pub fn block_panel<R: Rng>(
    n: usize,
    block_sizes: &[usize],
    rho_within: f64,
    rho_between: f64,
    rng: &mut R,
) -> BlockPanel {
    let b = block_sizes.len();
    let global: Array1<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let specific = gaussian_matrix(n, b, rng);
    let a = rho_between.sqrt();
    let c = (rho_within - rho_between).max(0.0).sqrt();
    let e = (1.0 - rho_within).sqrt();
    let membership: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    let d = membership.len();
    let noise = gaussian_matrix(n, d, rng);
    let mut values = Array2::<f64>::zeros((n, d));
    for (j, &k) in membership.iter().enumerate() {
        let col = &global * a + &(specific.column(k).to_owned() * c) + &(noise.column(j).to_owned() * e);
        values.column_mut(j).assign(&col);
    }
    // Block factor including the shared component, normalised to unit variance.
    let norm = (a * a + c * c).sqrt().max(f64::MIN_POSITIVE);
    let mut block_factors = Array2::<f64>::zeros((n, b));
    for k in 0..b {
        let f = (&global * a + &(specific.column(k).to_owned() * c)) / norm;
        block_factors.column_mut(k).assign(&f);
    }
    BlockPanel {
        values,
        block_factors,
        membership,
    }
}

/// Column `j` scaled by `sqrt(decay^j)` on independent Gaussians, then mixed
/// by a random orthogonal matrix: a panel with geometric spectrum decay.
pub fn decaying_spectrum_panel<R: Rng>(n: usize, d: usize, decay: f64, rng: &mut R) -> Array2<f64> {
    let mut z = gaussian_matrix(n, d, rng);
    for (j, mut col) in z.columns_mut().into_iter().enumerate() {
        col *= decay.powi(j as i32).sqrt();
    }
    let q = linalg::orthonormal_basis(gaussian_matrix(d, d, rng).view());
    z.dot(&q.t())
}

/// One latent Gaussian factor entering every column both linearly and
/// quadratically, plus idiosyncratic noise of standard deviation `noise`.
pub fn quadratic_panel<R: Rng>(n: usize, d: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let f: Array1<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let q = f.mapv(|v| (v * v - 1.0) / 2f64.sqrt());
    let eps = gaussian_matrix(n, d, rng);
    let mut out = Array2::<f64>::zeros((n, d));
    for j in 0..d {
        let angle = std::f64::consts::PI * (j as f64 + 0.5) / d as f64;
        let col = &f * angle.cos() + &(&q * angle.sin()) + &(eps.column(j).to_owned() * noise);
        out.column_mut(j).assign(&col);
    }
    out
}

/// Dated panel of `values` with labels `{prefix}01, {prefix}02, …`.
pub fn to_panel(values: Array2<f64>, prefix: &str) -> ReturnPanel<f64> {
    let (n, d) = values.dim();
    ReturnPanel::new(business_days(n), numbered_labels(prefix, d), values).expect("finite synthetic values")
}

/// Risk-factor panel with planted categories and an asset panel generated
/// from a linear model on the planted block factors.
#[derive(Debug, Clone)]
pub struct SyntheticUniverse {
    pub factors: ReturnPanel<f64>,
    pub categories: BTreeMap<String, String>,
    pub assets: ReturnPanel<f64>,
    pub block: BlockPanel,
    /// `p x b` planted asset loadings on the unit-variance block factors.
    pub asset_betas: Array2<f64>,
    pub asset_alphas: Array1<f64>,
    /// Covariance of the planted block factors.
    pub block_covariance: Array2<f64>,
}

/// `b` categories of `block_size` risk factors (`rho_within`, `rho_between`)
/// and `p` assets `r = α + β f + ε` with returns at daily scale.
pub fn universe<R: Rng>(
    n: usize,
    block_sizes: &[usize],
    rho_within: f64,
    rho_between: f64,
    p: usize,
    residual_sd: f64,
    rng: &mut R,
) -> SyntheticUniverse {
    let block = block_panel(n, block_sizes, rho_within, rho_between, rng);
    let b = block_sizes.len();
    let scale = 0.01;
    let factor_values = &block.values * scale;
    let factors = to_panel(factor_values, "RF");
    let categories = factors
        .labels()
        .iter()
        .zip(&block.membership)
        .map(|(l, &k)| (l.clone(), format!("cat{}", k + 1)))
        .collect();
    let asset_betas = Array2::from_shape_simple_fn((p, b), || rng.random_range(-0.5..1.5) * scale);
    let asset_alphas = Array1::from_shape_simple_fn(p, || rng.random_range(-1e-4..1e-4));
    let eps = gaussian_matrix(n, p, rng) * (residual_sd * scale);
    let asset_values = block.block_factors.dot(&asset_betas.t()) + &asset_alphas + eps;
    let assets = ReturnPanel::new(business_days(n), numbered_labels("AS", p), asset_values)
        .expect("finite synthetic values");
    let norm = rho_within.max(f64::MIN_POSITIVE);
    let mut block_covariance = Array2::from_elem((b, b), rho_between / norm);
    block_covariance.diag_mut().fill(1.0);
    SyntheticUniverse {
        factors,
        categories,
        assets,
        block,
        asset_betas,
        asset_alphas,
        block_covariance,
    }
}
