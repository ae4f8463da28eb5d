//! Aggregated factor series and linear asset factor models.
//!
//! Asset returns are regressed on an intercept and the raw (unstandardised)
//! factor scores. Scenario shocks are expressed in units of each factor's
//! stored standard deviation.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::linalg::{self, LinalgError};
use crate::panel::{ColumnStats, ReturnPanel, StandardizedPanel};
use crate::pca::{self, PcaError, PcaModel};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("no factors")]
    NoFactors,
    #[error("cluster {0} has no columns")]
    EmptyCluster(usize),
    #[error("factor series contain non-finite values")]
    NonFinite,
    #[error("need more than {needed} aligned rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("design column {column:?} is a linear combination of earlier columns")]
    Collinear { column: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown factor {0:?}")]
    UnknownFactor(String),
    #[error("unsupported model document: {0}")]
    Format(String),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClusteredPca,
    ClusteredAe,
    GlobalPca,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::ClusteredPca => "clustered-pca",
            Provenance::ClusteredAe => "clustered-ae",
            Provenance::GlobalPca => "pca",
        })
    }
}

impl FromStr for Provenance {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clustered-pca" => Ok(Provenance::ClusteredPca),
            "clustered-ae" => Ok(Provenance::ClusteredAe),
            "pca" | "global-pca" => Ok(Provenance::GlobalPca),
            other => Err(FactorError::Format(format!("unknown model {other:?}"))),
        }
    }
}

/// Dated factor series with their history moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFactors<T> {
    labels: Vec<String>,
    dates: Vec<NaiveDate>,
    series: Array2<T>,
    provenance: Provenance,
    means: Array1<T>,
    sds: Array1<T>,
}

impl<T: Scalar> AggregatedFactors<T> {
    /// Moments are estimated from `series`.
    pub fn new(
        labels: Vec<String>,
        dates: Vec<NaiveDate>,
        series: Array2<T>,
        provenance: Provenance,
    ) -> Result<Self, FactorError> {
        if labels.is_empty() || series.ncols() == 0 {
            return Err(FactorError::NoFactors);
        }
        if labels.len() != series.ncols() || dates.len() != series.nrows() {
            return Err(FactorError::Shape(format!(
                "{} labels and {} dates for a {:?} series",
                labels.len(),
                dates.len(),
                series.dim()
            )));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::NonFinite);
        }
        let stats = ColumnStats::of(series.view());
        Ok(Self {
            labels,
            dates,
            series,
            provenance,
            means: stats.mean,
            sds: stats.std_dev,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// `n x K`.
    pub fn series(&self) -> ArrayView2<'_, T> {
        self.series.view()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn means(&self) -> &Array1<T> {
        &self.means
    }

    pub fn sds(&self) -> &Array1<T> {
        &self.sds
    }

    pub fn n_factors(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Rows whose dates appear in `dates`; the stored moments are kept.
    pub fn restrict_to_dates(&self, dates: &BTreeSet<NaiveDate>) -> Self {
        let keep: Vec<usize> = self
            .dates
            .iter()
            .enumerate()
            .filter(|(_, d)| dates.contains(d))
            .map(|(i, _)| i)
            .collect();
        Self {
            labels: self.labels.clone(),
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            series: self.series.select(Axis(0), &keep),
            provenance: self.provenance,
            means: self.means.clone(),
            sds: self.sds.clone(),
        }
    }

    pub fn to_panel(&self) -> ReturnPanel<T> {
        ReturnPanel::new(self.dates.clone(), self.labels.clone(), self.series.clone())
            .expect("factor series are validated on construction")
    }

    /// Dated CSV with a `date` column followed by one column per factor.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FactorError> {
        crate::panel::write_panel(&self.to_panel(), writer)
            .map_err(|e| FactorError::Io(std::io::Error::other(e.to_string())))
    }
}

/// First-PC loadings of each cluster together with the standardisation
/// used, so that scores can be recomputed on other rows.
#[derive(Debug, Clone)]
pub struct ClusteredPcaModel<T> {
    assignment: ClusterAssignment,
    stats: ColumnStats<T>,
    /// Loadings of cluster `k + 1` over its member columns.
    loadings: Vec<Array1<T>>,
    factors: AggregatedFactors<T>,
}

impl<T: Scalar> ClusteredPcaModel<T> {
    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn loadings(&self) -> &[Array1<T>] {
        &self.loadings
    }

    pub fn factors(&self) -> &AggregatedFactors<T> {
        &self.factors
    }

    pub fn into_factors(self) -> AggregatedFactors<T> {
        self.factors
    }

    /// Factor scores of raw rows under the stored statistics and loadings.
    pub fn transform(&self, raw: ArrayView2<T>) -> Result<Array2<T>, FactorError> {
        if raw.ncols() != self.assignment.labels().len() {
            return Err(FactorError::Shape(format!(
                "rows have {} columns, model expects {}",
                raw.ncols(),
                self.assignment.labels().len()
            )));
        }
        let z = self.stats.apply(raw);
        Ok(self.scores_of_standardized(z.view()))
    }

    fn scores_of_standardized(&self, z: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros((z.nrows(), self.loadings.len()));
        for (c, phi) in self.loadings.iter().enumerate() {
            let cols = self.assignment.members(c + 1);
            out.column_mut(c).assign(&z.select(Axis(1), &cols).dot(phi));
        }
        out
    }

    /// Reconstruction of the standardised panel from the K factors: each
    /// cluster is rebuilt from its own first PC. Returns the matrix and its
    /// MSE against `z`.
    pub fn reconstruct(&self, z: ArrayView2<T>) -> (Array2<T>, T) {
        let scores = self.scores_of_standardized(z);
        let mut out = Array2::<T>::zeros(z.dim());
        for (c, phi) in self.loadings.iter().enumerate() {
            for (pos, &j) in self.assignment.members(c + 1).iter().enumerate() {
                let col = scores.column(c).mapv(|v| v * phi[pos]);
                out.column_mut(j).assign(&col);
            }
        }
        let err = crate::nnet::mse(out.view(), z);
        (out, err)
    }
}

/// PCA on each cluster's sub-panel; factor `k` is the first-PC score series
/// of cluster `k`. Single-column clusters pass the standardised column
/// through. Factors are named after the clusters.
pub fn fit_clustered_pca<T: Scalar>(
    panel: &StandardizedPanel<T>,
    assignment: &ClusterAssignment,
) -> Result<ClusteredPcaModel<T>, FactorError> {
    if assignment.labels() != panel.labels() {
        return Err(FactorError::Shape("assignment labels differ from panel labels".into()));
    }
    let k = assignment.n_clusters();
    if k == 0 {
        return Err(FactorError::NoFactors);
    }
    let mut loadings = Vec::with_capacity(k);
    let mut series = Array2::<T>::zeros((panel.n_rows(), k));
    for c in 1..=k {
        let cols = assignment.members(c);
        match cols.len() {
            0 => return Err(FactorError::EmptyCluster(c)),
            1 => {
                loadings.push(Array1::ones(1));
                series.column_mut(c - 1).assign(&panel.values().column(cols[0]));
            }
            _ => {
                let model = pca::fit_pca(&panel.columns(&cols))?;
                loadings.push(model.loadings().column(0).to_owned());
                series.column_mut(c - 1).assign(&model.scores().column(0));
            }
        }
    }
    let factors = AggregatedFactors::new(
        assignment.names().to_vec(),
        panel.dates().to_vec(),
        series,
        Provenance::ClusteredPca,
    )?;
    Ok(ClusteredPcaModel {
        assignment: assignment.clone(),
        stats: panel.stats().clone(),
        loadings,
        factors,
    })
}

pub fn clustered_pca_factors<T: Scalar>(
    panel: &StandardizedPanel<T>,
    assignment: &ClusterAssignment,
) -> Result<AggregatedFactors<T>, FactorError> {
    fit_clustered_pca(panel, assignment).map(ClusteredPcaModel::into_factors)
}

/// The first `k` global PC score series, named `PC1..PCk`.
pub fn global_pca_factors<T: Scalar>(
    model: &PcaModel<T>,
    dates: &[NaiveDate],
    k: usize,
) -> Result<AggregatedFactors<T>, FactorError> {
    if k == 0 || k > model.n_components() {
        return Err(FactorError::Pca(PcaError::OutOfRange {
            index: k,
            max: model.n_components(),
        }));
    }
    AggregatedFactors::new(
        (1..=k).map(|i| format!("PC{i}")).collect(),
        dates.to_vec(),
        model.scores().slice(s![.., ..k]).to_owned(),
        Provenance::GlobalPca,
    )
}

/// Per-asset OLS on the factors plus the factor moments needed for
/// scenario analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    asset_labels: Vec<String>,
    factor_labels: Vec<String>,
    alphas: Array1<T>,
    /// `p x K`.
    betas: Array2<T>,
    residual_variances: Array1<T>,
    factor_means: Array1<T>,
    factor_covariance: Array2<T>,
    /// Standard deviations used to express shocks.
    factor_sds: Array1<T>,
    provenance: Provenance,
    n_obs: usize,
}

impl<T: Scalar> FactorModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        asset_labels: Vec<String>,
        factor_labels: Vec<String>,
        alphas: Array1<T>,
        betas: Array2<T>,
        residual_variances: Array1<T>,
        factor_means: Array1<T>,
        factor_covariance: Array2<T>,
        factor_sds: Array1<T>,
        provenance: Provenance,
        n_obs: usize,
    ) -> Result<Self, FactorError> {
        let p = asset_labels.len();
        let k = factor_labels.len();
        if k == 0 {
            return Err(FactorError::NoFactors);
        }
        let ok = alphas.len() == p
            && betas.dim() == (p, k)
            && residual_variances.len() == p
            && factor_means.len() == k
            && factor_covariance.dim() == (k, k)
            && factor_sds.len() == k;
        if !ok {
            return Err(FactorError::Shape("inconsistent factor model dimensions".into()));
        }
        Ok(Self {
            asset_labels,
            factor_labels,
            alphas,
            betas,
            residual_variances,
            factor_means,
            factor_covariance,
            factor_sds,
            provenance,
            n_obs,
        })
    }

    pub fn asset_labels(&self) -> &[String] {
        &self.asset_labels
    }

    pub fn factor_labels(&self) -> &[String] {
        &self.factor_labels
    }

    pub fn alphas(&self) -> &Array1<T> {
        &self.alphas
    }

    pub fn betas(&self) -> &Array2<T> {
        &self.betas
    }

    pub fn residual_variances(&self) -> &Array1<T> {
        &self.residual_variances
    }

    pub fn factor_means(&self) -> &Array1<T> {
        &self.factor_means
    }

    pub fn factor_covariance(&self) -> &Array2<T> {
        &self.factor_covariance
    }

    pub fn factor_sds(&self) -> &Array1<T> {
        &self.factor_sds
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_assets(&self) -> usize {
        self.asset_labels.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_labels.len()
    }

    pub fn factor_index(&self, label: &str) -> Result<usize, FactorError> {
        self.factor_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| FactorError::UnknownFactor(label.to_string()))
    }

    /// Replaces the shock scale, e.g. with standard deviations from a longer
    /// history than the calibration window.
    pub fn with_factor_sds(mut self, sds: Array1<T>) -> Result<Self, FactorError> {
        if sds.len() != self.n_factors() {
            return Err(FactorError::Shape("one sd per factor expected".into()));
        }
        self.factor_sds = sds;
        Ok(self)
    }

    pub fn to_document(&self) -> FactorModelDocument {
        let rows = |m: &Array2<T>| -> Vec<Vec<f64>> {
            m.rows().into_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
        };
        let vec = |v: &Array1<T>| -> Vec<f64> { v.iter().map(|x| x.as_f64()).collect() };
        FactorModelDocument {
            format_version: FORMAT_VERSION,
            kind: "factor_model".into(),
            provenance: self.provenance,
            n_obs: self.n_obs,
            asset_labels: self.asset_labels.clone(),
            factor_labels: self.factor_labels.clone(),
            alphas: vec(&self.alphas),
            betas: rows(&self.betas),
            residual_variances: vec(&self.residual_variances),
            factor_means: vec(&self.factor_means),
            factor_covariance: rows(&self.factor_covariance),
            factor_sds: vec(&self.factor_sds),
        }
    }

    pub fn from_document(doc: &FactorModelDocument) -> Result<Self, FactorError> {
        if doc.format_version != FORMAT_VERSION || doc.kind != "factor_model" {
            return Err(FactorError::Format(format!(
                "kind {:?} version {}",
                doc.kind, doc.format_version
            )));
        }
        let matrix = |rows: &[Vec<f64>], ncols: usize| -> Result<Array2<T>, FactorError> {
            let flat: Vec<T> = rows.iter().flatten().map(|&v| T::lit(v)).collect();
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(FactorError::Format("ragged matrix".into()));
            }
            Array2::from_shape_vec((rows.len(), ncols), flat)
                .map_err(|e| FactorError::Format(e.to_string()))
        };
        let vec = |v: &[f64]| -> Array1<T> { v.iter().map(|&x| T::lit(x)).collect() };
        let k = doc.factor_labels.len();
        Self::from_parts(
            doc.asset_labels.clone(),
            doc.factor_labels.clone(),
            vec(&doc.alphas),
            matrix(&doc.betas, k)?,
            vec(&doc.residual_variances),
            vec(&doc.factor_means),
            matrix(&doc.factor_covariance, k)?,
            vec(&doc.factor_sds),
            doc.provenance,
            doc.n_obs,
        )
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<(), FactorError> {
        serde_json::to_writer_pretty(writer, &self.to_document())?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self, FactorError> {
        let doc: FactorModelDocument = serde_json::from_reader(reader)?;
        Self::from_document(&doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelDocument {
    pub format_version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub n_obs: usize,
    pub asset_labels: Vec<String>,
    pub factor_labels: Vec<String>,
    pub alphas: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub residual_variances: Vec<f64>,
    pub factor_means: Vec<f64>,
    pub factor_covariance: Vec<Vec<f64>>,
    pub factor_sds: Vec<f64>,
}

/// Regresses every asset on an intercept and the factors over the dates
/// both series share. Shocks are scaled by the factors' stored moments.
pub fn fit_factor_model<T: Scalar>(
    assets: &ReturnPanel<T>,
    factors: &AggregatedFactors<T>,
) -> Result<FactorModel<T>, FactorError> {
    let (assets, fpanel) = crate::panel::align_on_dates(assets, &factors.to_panel());
    let n = assets.n_rows();
    let k = factors.n_factors();
    if n <= k + 1 {
        return Err(FactorError::TooFewRows { rows: n, needed: k + 1 });
    }
    let f = fpanel.values();
    let mut design = Array2::<T>::ones((n, k + 1));
    design.slice_mut(s![.., 1..]).assign(&f);
    let coef = linalg::least_squares(design.view(), assets.values()).map_err(|e| match e {
        LinalgError::Collinear { column } => FactorError::Collinear {
            column: if column == 0 {
                "intercept".to_string()
            } else {
                factors.labels()[column - 1].clone()
            },
        },
        other => FactorError::Linalg(other),
    })?;
    let fitted = design.dot(&coef);
    let resid = &assets.values() - &fitted;
    let dof = T::from_count(n - k - 1);
    let residual_variances = resid
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|&e| e * e).sum::<T>() / dof)
        .collect();
    let alphas = coef.row(0).to_owned();
    let betas = coef.slice(s![1.., ..]).t().to_owned();
    FactorModel::from_parts(
        assets.labels().to_vec(),
        factors.labels().to_vec(),
        alphas,
        betas,
        residual_variances,
        linalg::column_means(f),
        linalg::sample_covariance(f),
        factors.sds().clone(),
        factors.provenance(),
        n,
    )
}

/// `B Ω B'`, residual variances ignored.
pub fn approx_covariance<T: Scalar>(model: &FactorModel<T>) -> Array2<T> {
    let b = model.betas();
    let mut cov = b.dot(model.factor_covariance()).dot(&b.t());
    linalg::symmetrize(&mut cov);
    cov
}
