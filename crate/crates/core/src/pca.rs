//! Principal component analysis on standardised panels and the diagnostics
//! built on it: loading/score correlations, the Kaiser–Guttman count,
//! (inverse) participation ratios, PR groups and category verdicts.
//!
//! Components are the eigenvectors of the sample correlation matrix
//! `X'X / (n - 1)`, sorted by descending eigenvalue. Each eigenvector is
//! sign-normalised so that its entry of largest magnitude is positive.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::panel::{ColumnStats, StandardizedPanel};
use crate::scalar::Scalar;

/// Largest row count for which the observation-space decomposition is run.
pub const DUALITY_MAX_ROWS: usize = 5000;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("PCA needs n >= 2 and d >= 2, got n={rows}, d={cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("eigendecomposition failed: {0}")]
    Eigen(#[from] LinalgError),
    #[error("component {index} out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("duality check needs an n x n decomposition; n={rows} exceeds {max}")]
    DualityGuard { rows: usize, max: usize },
    #[error("label {0:?} has no category")]
    MissingCategory(String),
}

#[derive(Debug, Clone)]
pub struct PcaModel<T> {
    labels: Vec<String>,
    loadings: Array2<T>,
    eigenvalues: Array1<T>,
    scores: Array2<T>,
    stats: ColumnStats<T>,
}

impl<T: Scalar> PcaModel<T> {
    /// Assembles a model from precomputed parts; scores are `data * loadings`.
    /// Mostly useful for tests and for diagnostics on externally supplied
    /// eigenvectors.
    pub fn from_parts(
        labels: Vec<String>,
        loadings: Array2<T>,
        eigenvalues: Array1<T>,
        data: ArrayView2<T>,
        stats: ColumnStats<T>,
    ) -> Self {
        let scores = data.dot(&loadings);
        Self {
            labels,
            loadings,
            eigenvalues,
            scores,
            stats,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `d x d`, columns are the principal components.
    pub fn loadings(&self) -> &Array2<T> {
        &self.loadings
    }

    pub fn eigenvalues(&self) -> &Array1<T> {
        &self.eigenvalues
    }

    /// `n x d` score matrix `Z = X Φ`.
    pub fn scores(&self) -> &Array2<T> {
        &self.scores
    }

    pub fn stats(&self) -> &ColumnStats<T> {
        &self.stats
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues divided by their sum.
    pub fn explained_shares(&self) -> Array1<T> {
        let total: T = self.eigenvalues.sum();
        self.eigenvalues.mapv(|l| l / total)
    }

    /// Scores of raw (unstandardised) rows under the stored statistics.
    pub fn transform(&self, raw: ArrayView2<T>) -> Array2<T> {
        self.stats.apply(raw).dot(&self.loadings)
    }

    fn check_component(&self, pc: usize) -> Result<(), PcaError> {
        if pc == 0 || pc > self.n_components() {
            return Err(PcaError::OutOfRange {
                index: pc,
                max: self.n_components(),
            });
        }
        Ok(())
    }
}

fn check_input<T: Scalar>(x: ArrayView2<T>) -> Result<(), PcaError> {
    let (n, d) = x.dim();
    if n < 2 || d < 2 {
        return Err(PcaError::TooSmall { rows: n, cols: d });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    Ok(())
}

/// Flips each column so that its largest-magnitude entry is positive
/// (first such entry on exact ties).
pub fn normalize_signs<T: Scalar>(vectors: &mut Array2<T>) {
    for mut col in vectors.columns_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            col.mapv_inplace(|v| -v);
        }
    }
}

fn clip_eigenvalues<T: Scalar>(values: &mut Array1<T>) {
    let floor = T::lit(-1e-10);
    values.mapv_inplace(|l| if l < T::zero() && l >= floor { T::zero() } else { l });
}

pub fn fit_pca<T: Scalar>(panel: &StandardizedPanel<T>) -> Result<PcaModel<T>, PcaError> {
    let x = panel.values();
    check_input(x)?;
    let n = x.nrows();
    let corr = {
        let mut c = x.t().dot(&x) / T::from_count(n - 1);
        linalg::symmetrize(&mut c);
        c
    };
    let eig = linalg::symmetric_eigen(corr.view())?;
    let mut eigenvalues = eig.values;
    clip_eigenvalues(&mut eigenvalues);
    let mut loadings = eig.vectors;
    normalize_signs(&mut loadings);
    let scores = x.dot(&loadings);
    Ok(PcaModel {
        labels: panel.labels().to_vec(),
        loadings,
        eigenvalues,
        scores,
        stats: panel.stats().clone(),
    })
}

/// Discrepancies between the feature-space (`X'X`) and observation-space
/// (`XX'`) decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// Largest relative eigenvalue discrepancy; eigenvalues that vanish are
    /// compared relative to the leading eigenvalue.
    pub eigenvalue_max_rel_error: f64,
    /// Largest entry-wise gap between `Φ` and `X' Φ̃ L^{-1/2}`.
    pub loading_max_abs_error: f64,
    /// Largest entry-wise gap between `Φ̃` and `Z L^{-1/2}`.
    pub scores_max_abs_error: f64,
    /// Number of eigenvalues treated as nonzero.
    pub rank: usize,
}

/// Fits the model and cross-checks it against the eigendecomposition of
/// the `n x n` matrix `XX'`.
pub fn fit_pca_dual<T: Scalar>(
    panel: &StandardizedPanel<T>,
) -> Result<(PcaModel<T>, DualityReport), PcaError> {
    let n = panel.n_rows();
    if n > DUALITY_MAX_ROWS {
        return Err(PcaError::DualityGuard {
            rows: n,
            max: DUALITY_MAX_ROWS,
        });
    }
    let model = fit_pca(panel)?;
    let x = panel.values();
    let d = x.ncols();
    let scale = T::from_count(n - 1);
    let gram = {
        let mut g = x.dot(&x.t()) / scale;
        linalg::symmetrize(&mut g);
        g
    };
    let dual = linalg::symmetric_eigen(gram.view())?;

    // Unclipped feature-space spectrum, recomputed for a like-for-like comparison.
    let lead = model.eigenvalues[0].max(T::min_positive_value());
    let rank_tol = T::epsilon().sqrt() * T::lit(1e-2) * lead;
    let m = n.min(d);
    let mut eig_err = T::zero();
    let mut rank = 0;
    for k in 0..n.max(d) {
        let feature = if k < d { model.eigenvalues[k] } else { T::zero() };
        let observation = if k < n { dual.values[k] } else { T::zero() };
        let err = if k < m && feature > rank_tol {
            rank += 1;
            (feature - observation).abs() / feature
        } else {
            (feature - observation).abs() / lead
        };
        eig_err = eig_err.max(err);
    }

    let mut loading_err = T::zero();
    let mut scores_err = T::zero();
    for k in 0..rank {
        // eigenvalues of the unscaled products X'X and XX'
        let l_feature = model.eigenvalues[k] * scale;
        let l_obs = dual.values[k] * scale;
        let phi_tilde = dual.vectors.column(k);

        let mut from_dual = x.t().dot(&phi_tilde) / l_obs.sqrt();
        let phi = model.loadings.column(k);
        if from_dual.dot(&phi) < T::zero() {
            from_dual.mapv_inplace(|v| -v);
        }
        for (a, b) in from_dual.iter().zip(phi.iter()) {
            loading_err = loading_err.max((*a - *b).abs());
        }

        let scaled_scores = model.scores.column(k).mapv(|v| v / l_feature.sqrt());
        let sign = if scaled_scores.dot(&phi_tilde) < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        for (a, b) in scaled_scores.iter().zip(phi_tilde.iter()) {
            scores_err = scores_err.max((*a - sign * *b).abs());
        }
    }

    let report = DualityReport {
        eigenvalue_max_rel_error: eig_err.as_f64(),
        loading_max_abs_error: loading_err.as_f64(),
        scores_max_abs_error: scores_err.as_f64(),
        rank,
    };
    Ok((model, report))
}

/// Rank-`k` reconstruction `Z_{·,1:k} Φ_{·,1:k}'` and its mean squared error
/// against the full reconstruction `Z Φ'` (the standardised input).
pub fn reconstruct<T: Scalar>(model: &PcaModel<T>, k: usize) -> Result<(Array2<T>, T), PcaError> {
    model.check_component(k)?;
    let approx = model
        .scores
        .slice(s![.., ..k])
        .dot(&model.loadings.slice(s![.., ..k]).t());
    let full = model.scores.dot(&model.loadings.t());
    let count = T::from_count(full.len());
    let sse: T = approx
        .iter()
        .zip(full.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((approx, sse / count))
}

/// Correlations between data columns and scores: entry `(j, i)` is
/// `φ_ji √λ_i`. With `absolute` set, magnitudes are returned.
pub fn factor_correlations<T: Scalar>(model: &PcaModel<T>, absolute: bool) -> Array2<T> {
    let mut out = model.loadings.clone();
    for (i, mut col) in out.columns_mut().into_iter().enumerate() {
        let s = model.eigenvalues[i].max(T::zero()).sqrt();
        col.mapv_inplace(|v| if absolute { (v * s).abs() } else { v * s });
    }
    out
}

/// Number of eigenvalues whose share of the total strictly exceeds `1/d`.
///
/// A share must clear `1/d` by more than a few ulps, so that spectra which
/// are equal up to rounding count as equal.
pub fn kaiser_guttman_count<T: Scalar>(eigenvalues: &[T]) -> usize {
    let d = eigenvalues.len();
    if d == 0 {
        return 0;
    }
    let total: T = eigenvalues.iter().copied().sum();
    let threshold = T::one() / T::from_count(d);
    let slack = T::epsilon() * T::lit(64.0);
    eigenvalues
        .iter()
        .filter(|&&l| l / total - threshold > slack)
        .count()
}

pub fn kaiser_guttman<T: Scalar>(model: &PcaModel<T>) -> usize {
    kaiser_guttman_count(model.eigenvalues.as_slice().expect("contiguous eigenvalues"))
}

/// `(IPR, PR)` of principal component `pc` (1-based): `IPR = Σ_j φ_jk^4`.
pub fn participation_ratio<T: Scalar>(model: &PcaModel<T>, pc: usize) -> Result<(T, T), PcaError> {
    model.check_component(pc)?;
    let ipr: T = model
        .loadings
        .column(pc - 1)
        .iter()
        .map(|&v| v * v * v * v)
        .sum();
    Ok((ipr, T::one() / ipr))
}

/// Group size for a participation ratio: nearest integer, halves rounded
/// away from zero, clamped to `[1, d]`.
pub fn pr_group_size(pr: f64, d: usize) -> usize {
    let rounded = pr.round();
    if !rounded.is_finite() || rounded < 1.0 {
        1
    } else {
        (rounded as usize).min(d)
    }
}

/// Indices of the `size` largest `|correlation|` entries, ties broken by
/// ascending index.
pub fn top_indices<T: Scalar>(abs_corr: &[T], size: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..abs_corr.len()).collect();
    order.sort_by(|&a, &b| {
        abs_corr[b]
            .partial_cmp(&abs_corr[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(size);
    order
}

/// Labels forming the PR group of component `pc` (1-based), strongest first.
pub fn pr_group<T: Scalar>(model: &PcaModel<T>, pc: usize) -> Result<Vec<String>, PcaError> {
    let (_, pr) = participation_ratio(model, pc)?;
    let size = pr_group_size(pr.as_f64(), model.labels.len());
    let corr = factor_correlations(model, true);
    let column: Vec<T> = corr.column(pc - 1).to_vec();
    Ok(top_indices(&column, size)
        .into_iter()
        .map(|j| model.labels[j].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    StrongIn,
    WeakIn,
    WeakOut,
    StrongOut,
}

impl Verdict {
    /// Classifies a category with `inside` of its `size` members in the PR group.
    pub fn from_membership(inside: usize, size: usize) -> Verdict {
        if inside == size {
            Verdict::StrongIn
        } else if inside == 0 {
            Verdict::StrongOut
        } else if 2 * inside > size {
            Verdict::WeakIn
        } else {
            Verdict::WeakOut
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::StrongIn => "StrongIn",
            Verdict::WeakIn => "WeakIn",
            Verdict::WeakOut => "WeakOut",
            Verdict::StrongOut => "StrongOut",
        }
    }
}

/// Category name to verdict, ordered by category name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVerdict(pub BTreeMap<String, Verdict>);

pub fn classify_categories<T: Scalar>(
    model: &PcaModel<T>,
    pc: usize,
    categories: &BTreeMap<String, String>,
) -> Result<CategoryVerdict, PcaError> {
    for label in &model.labels {
        if !categories.contains_key(label) {
            return Err(PcaError::MissingCategory(label.clone()));
        }
    }
    let group = pr_group(model, pc)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for label in &model.labels {
        let entry = tally.entry(categories[label].clone()).or_default();
        entry.1 += 1;
        if group.contains(label) {
            entry.0 += 1;
        }
    }
    Ok(CategoryVerdict(
        tally
            .into_iter()
            .map(|(cat, (inside, size))| (cat, Verdict::from_membership(inside, size)))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{standardize, ReturnPanel, StatsSource};
    use chrono::NaiveDate;
    use ndarray::array;

    fn std_panel(values: Array2<f64>) -> StandardizedPanel<f64> {
        let n = values.nrows();
        let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let dates = (0..n).map(|i| start + chrono::Duration::days(i as i64)).collect();
        let labels = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        let p = ReturnPanel::new(dates, labels, values).unwrap();
        standardize(&p, StatsSource::SelfWindow).unwrap()
    }

    fn model_with_loadings(loadings: Array2<f64>, eigenvalues: Array1<f64>) -> PcaModel<f64> {
        let d = loadings.nrows();
        let labels = (0..d).map(|j| format!("x{j}")).collect();
        let data = Array2::<f64>::zeros((2, d));
        let stats = ColumnStats {
            mean: Array1::zeros(d),
            std_dev: Array1::ones(d),
        };
        PcaModel::from_parts(labels, loadings, eigenvalues, data.view(), stats)
    }

    #[test]
    fn perfectly_correlated_pair() {
        let m = fit_pca(&std_panel(array![[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0], [0.5, 1.0]])).unwrap();
        assert!((m.eigenvalues()[0] - 2.0).abs() < 1e-12);
        assert!(m.eigenvalues()[1].abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.loadings()[[0, 0]] - h).abs() < 1e-12);
        assert!((m.loadings()[[1, 0]] - h).abs() < 1e-12);
        let corr = factor_correlations(&m, false);
        assert!((corr[[0, 0]] - 1.0).abs() < 1e-12);
        let (_, mse) = reconstruct(&m, 1).unwrap();
        assert!(mse < 1e-10);
    }

    #[test]
    fn uncorrelated_pair_has_unit_spectrum() {
        let m = fit_pca(&std_panel(array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])).unwrap();
        assert!((m.eigenvalues()[0] - 1.0).abs() < 1e-12);
        assert!((m.eigenvalues()[1] - 1.0).abs() < 1e-12);
        assert_eq!(kaiser_guttman(&m), 0);
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let mut v = array![[-0.8, 0.6], [0.6, 0.8]];
        normalize_signs(&mut v);
        assert_eq!(v, array![[0.8, 0.6], [-0.6, 0.8]]);
    }

    #[test]
    fn reconstruct_range_checked() {
        let m = fit_pca(&std_panel(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).unwrap();
        assert!(matches!(reconstruct(&m, 0), Err(PcaError::OutOfRange { index: 0, max: 2 })));
        assert!(matches!(reconstruct(&m, 3), Err(PcaError::OutOfRange { .. })));
        assert!(reconstruct(&m, 2).unwrap().1 <= 1e-10);
        assert!(participation_ratio(&m, 0).is_err());
        assert!(pr_group(&m, 3).is_err());
    }

    #[test]
    fn too_small_and_non_finite_inputs() {
        let p = std_panel(array![[1.0], [2.0], [4.0]]);
        assert!(matches!(fit_pca(&p), Err(PcaError::TooSmall { .. })));
    }

    #[test]
    fn kaiser_guttman_on_shares() {
        assert_eq!(kaiser_guttman_count(&[0.5, 0.3, 0.2]), 1);
        assert_eq!(kaiser_guttman_count(&[1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(kaiser_guttman_count(&[2.0, 0.5, 0.5]), 1);
    }

    #[test]
    fn participation_ratio_extremes() {
        let d = 4;
        let q = 0.5;
        // columns: uniform, single entry, two equal entries, rest arbitrary orthonormal
        let loadings = array![
            [q, 1.0, 0.0, 0.0],
            [q, 0.0, 0.5f64.sqrt(), 0.0],
            [q, 0.0, 0.5f64.sqrt(), 0.0],
            [q, 0.0, 0.0, 1.0]
        ];
        let m = model_with_loadings(loadings, array![1.0, 1.0, 1.0, 1.0]);
        let (ipr, pr) = participation_ratio(&m, 1).unwrap();
        assert!((ipr - 1.0 / d as f64).abs() < 1e-15);
        assert!((pr - d as f64).abs() < 1e-12);
        assert_eq!(participation_ratio(&m, 2).unwrap(), (1.0, 1.0));
        let (ipr, pr) = participation_ratio(&m, 3).unwrap();
        assert!((ipr - 0.5).abs() < 1e-15 && (pr - 2.0).abs() < 1e-12);
    }

    #[test]
    fn group_size_rounding() {
        assert_eq!(pr_group_size(2.0, 3), 2);
        assert_eq!(pr_group_size(2.5, 3), 3);
        assert_eq!(pr_group_size(2.49, 3), 2);
        assert_eq!(pr_group_size(0.7, 3), 1);
        assert_eq!(pr_group_size(3.6, 3), 3);
    }

    #[test]
    fn top_indices_tie_break() {
        assert_eq!(top_indices(&[0.9, 0.8, 0.1], 2), vec![0, 1]);
        assert_eq!(top_indices(&[0.5, 0.9, 0.5, 0.5], 3), vec![1, 0, 2]);
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(Verdict::from_membership(2, 2), Verdict::StrongIn);
        assert_eq!(Verdict::from_membership(2, 3), Verdict::WeakIn);
        assert_eq!(Verdict::from_membership(1, 2), Verdict::WeakOut);
        assert_eq!(Verdict::from_membership(0, 4), Verdict::StrongOut);
        assert_eq!(Verdict::from_membership(1, 1), Verdict::StrongIn);
    }

    #[test]
    fn classify_requires_complete_categories() {
        let m = fit_pca(&std_panel(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).unwrap();
        let mut cats = BTreeMap::new();
        cats.insert("x0".to_string(), "A".to_string());
        assert!(matches!(
            classify_categories(&m, 1, &cats),
            Err(PcaError::MissingCategory(ref l)) if l == "x1"
        ));
    }

    #[test]
    fn duality_guard() {
        let values = Array2::from_shape_fn((DUALITY_MAX_ROWS + 1, 2), |(i, j)| ((i * (j + 3)) % 17) as f64);
        assert!(matches!(
            fit_pca_dual(&std_panel(values)),
            Err(PcaError::DualityGuard { .. })
        ));
    }

    #[test]
    fn fits_in_f32() {
        let values = array![[1.0f32, 2.0, 0.5], [2.0, 3.9, 1.0], [-1.0, -2.2, 0.2], [0.5, 1.1, -0.7]];
        let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let dates = (0..4).map(|i| start + chrono::Duration::days(i)).collect();
        let p = ReturnPanel::new(dates, vec!["a".into(), "b".into(), "c".into()], values).unwrap();
        let m = fit_pca(&standardize(&p, StatsSource::SelfWindow).unwrap()).unwrap();
        let total: f32 = m.eigenvalues().sum();
        assert!((total - 3.0).abs() < 1e-4);
    }
}
