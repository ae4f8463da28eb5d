//! Stress scenarios on factor models: conditional-Gaussian propagation of
//! core shocks, worst cases over a Mahalanobis ellipsoid, propagation
//! through a trained network on autoencoder codes, and portfolio impacts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::FactorModel;
use crate::linalg::{self, LinalgError};
use crate::nnet::{self, Activation, ClusteredAe, HiddenSpec, Mlp, NnetError, TrainConfig};
use crate::panel::ColumnStats;
use crate::scalar::Scalar;
use crate::seed::substream_rng;

/// Largest accepted condition number of the core covariance block.
pub const MAX_CONDITION: f64 = 1e12;

/// Trading days per year used to express tail frequencies.
pub const TRADING_DAYS: f64 = 250.0;

#[derive(Debug, Error)]
pub enum StressError {
    #[error("scenario {0:?} has no core factors")]
    NoCoreFactors(String),
    #[error("core factor {0:?} listed twice")]
    DuplicateFactor(String),
    #[error("unknown factor {0:?}")]
    UnknownFactor(String),
    #[error("{labels} core factors but {shifts} shifts")]
    ShiftCount { labels: usize, shifts: usize },
    #[error("non-finite shift for {0:?}")]
    NonFiniteShift(String),
    #[error("core covariance is singular (condition number {condition:e})")]
    Singular { condition: f64 },
    #[error("covariance of the factor subset is not positive definite")]
    Degenerate,
    #[error("weights must have length {expected} and sum to 1, got length {len} and sum {sum}")]
    Weights { expected: usize, len: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("propagation {0} is not available for this model")]
    Propagation(Propagation),
    #[error("need at least {needed} rows of history, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    ConditionalGaussian,
    AeDecoder,
    None,
}

impl fmt::Display for Propagation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Propagation::ConditionalGaussian => "conditional-gaussian",
            Propagation::AeDecoder => "ae-decoder",
            Propagation::None => "none",
        })
    }
}

impl FromStr for Propagation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conditional-gaussian" | "gaussian" => Ok(Propagation::ConditionalGaussian),
            "ae-decoder" | "decoder" => Ok(Propagation::AeDecoder),
            "none" => Ok(Propagation::None),
            other => Err(format!("unknown propagation {other:?}")),
        }
    }
}

/// Shocks of `shifts_in_sd` standard deviations on the core factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressScenario {
    pub name: String,
    pub core_labels: Vec<String>,
    pub shifts_in_sd: Vec<f64>,
    pub propagation: Propagation,
}

impl StressScenario {
    pub fn new(
        name: impl Into<String>,
        core_labels: Vec<String>,
        shifts_in_sd: Vec<f64>,
        propagation: Propagation,
    ) -> Result<Self, StressError> {
        let s = Self {
            name: name.into(),
            core_labels,
            shifts_in_sd,
            propagation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StressError> {
        if self.core_labels.is_empty() {
            return Err(StressError::NoCoreFactors(self.name.clone()));
        }
        if self.core_labels.len() != self.shifts_in_sd.len() {
            return Err(StressError::ShiftCount {
                labels: self.core_labels.len(),
                shifts: self.shifts_in_sd.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for (label, shift) in self.core_labels.iter().zip(&self.shifts_in_sd) {
            if !seen.insert(label) {
                return Err(StressError::DuplicateFactor(label.clone()));
            }
            if !shift.is_finite() {
                return Err(StressError::NonFiniteShift(label.clone()));
            }
        }
        Ok(())
    }

    fn core_indices(&self, labels: &[String]) -> Result<Vec<usize>, StressError> {
        self.core_labels
            .iter()
            .map(|l| {
                labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| StressError::UnknownFactor(l.clone()))
            })
            .collect()
    }
}

fn complement(k: usize, core: &[usize]) -> Vec<usize> {
    (0..k).filter(|i| !core.contains(i)).collect()
}

/// `E(F_u | F_s = core_values) = μ_u + Σ_us Σ_ss⁻¹ (core_values − μ_s)`,
/// assembled into a full vector with the core entries set to `core_values`.
pub fn conditional_mean<T: Scalar>(
    mean: ArrayView1<T>,
    covariance: ArrayView2<T>,
    core: &[usize],
    core_values: ArrayView1<T>,
) -> Result<Array1<T>, StressError> {
    let k = mean.len();
    if covariance.dim() != (k, k) || core_values.len() != core.len() {
        return Err(StressError::Shape("mean, covariance and core sizes differ".into()));
    }
    let periph = complement(k, core);
    let mut out = mean.to_owned();
    for (&i, &v) in core.iter().zip(core_values) {
        out[i] = v;
    }
    if periph.is_empty() {
        return Ok(out);
    }
    let sigma_ss = covariance.select(Axis(0), core).select(Axis(1), core);
    let eig = linalg::symmetric_eigen(sigma_ss.view())?;
    let (hi, lo) = (eig.values[0].as_f64(), eig.values[core.len() - 1].as_f64());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(StressError::Singular { condition });
    }
    let l = linalg::cholesky(sigma_ss.view()).map_err(|_| StressError::Singular { condition })?;
    let delta: Array1<T> = core.iter().zip(core_values).map(|(&i, &v)| v - mean[i]).collect();
    let solved = linalg::cholesky_solve(l.view(), delta.insert_axis(Axis(1)).view());
    let sigma_us = covariance.select(Axis(0), &periph).select(Axis(1), core);
    let shift = sigma_us.dot(&solved);
    for (row, &u) in periph.iter().enumerate() {
        out[u] = mean[u] + shift[[row, 0]];
    }
    Ok(out)
}

/// Full factor vector under a scenario: core factors at `μ + shift·sd`,
/// peripheral factors at their conditional mean (or their mean when the
/// scenario does not propagate). The covariance is left unchanged.
pub fn conditional_stress<T: Scalar>(
    model: &FactorModel<T>,
    scenario: &StressScenario,
) -> Result<Array1<T>, StressError> {
    scenario.validate()?;
    let core = scenario.core_indices(model.factor_labels())?;
    let mu = model.factor_means();
    let sds = model.factor_sds();
    let core_values: Array1<T> = core
        .iter()
        .zip(&scenario.shifts_in_sd)
        .map(|(&i, &shift)| mu[i] + T::lit(shift) * sds[i])
        .collect();
    match scenario.propagation {
        Propagation::ConditionalGaussian => {
            conditional_mean(mu.view(), model.factor_covariance().view(), &core, core_values.view())
        }
        Propagation::None => {
            let mut out = mu.clone();
            for (&i, &v) in core.iter().zip(&core_values) {
                out[i] = v;
            }
            Ok(out)
        }
        Propagation::AeDecoder => Err(StressError::Propagation(Propagation::AeDecoder)),
    }
}

/// Worst case of the portfolio's linear factor map over
/// `{ s : (s − μ)' Σ⁻¹ (s − μ) ≤ radius² }` on a factor subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidScenario {
    pub labels: Vec<String>,
    pub radius: f64,
    pub solution: Vec<f64>,
    /// `(s* − μ) / sd` per subset factor.
    pub solution_in_sd: Vec<f64>,
    pub binding: bool,
    /// Portfolio value `Σ w_i α_i + w̄ · s*` of the subset map.
    pub objective: f64,
    pub mahalanobis: f64,
}

/// Inputs of the ellipsoid problem restricted to a factor subset.
#[derive(Debug, Clone)]
pub struct EllipsoidProblem<T> {
    pub mean: Array1<T>,
    pub covariance: Array2<T>,
    /// Weighted mean beta vector `w̄`.
    pub direction: Array1<T>,
    /// `Σ w_i α_i`.
    pub offset: T,
    pub radius: T,
}

impl<T: Scalar> EllipsoidProblem<T> {
    pub fn objective(&self, s: ArrayView1<T>) -> T {
        self.offset + self.direction.dot(&s)
    }

    pub fn mahalanobis(&self, s: ArrayView1<T>) -> Result<T, StressError> {
        let l = linalg::cholesky(self.covariance.view()).map_err(|_| StressError::Degenerate)?;
        let d = (&s - &self.mean).insert_axis(Axis(1));
        let solved = linalg::cholesky_solve(l.view(), d.view());
        Ok(d.t().dot(&solved)[[0, 0]].max(T::zero()).sqrt())
    }

    /// Closed-form minimiser `μ − r Σw̄ / √(w̄'Σw̄)`; returns `(s*, binding)`.
    pub fn solve(&self) -> Result<(Array1<T>, bool), StressError> {
        linalg::cholesky(self.covariance.view()).map_err(|_| StressError::Degenerate)?;
        let sigma_w = self.covariance.dot(&self.direction);
        let quad = self.direction.dot(&sigma_w);
        let scale = self
            .direction
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()));
        let diag_scale = self
            .covariance
            .diag()
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = T::epsilon() * T::lit(16.0);
        if scale == T::zero() || !(quad > tiny * tiny * scale * scale * diag_scale) {
            return Ok((self.mean.clone(), false));
        }
        let s = &self.mean - &sigma_w.mapv(|v| v * self.radius / quad.sqrt());
        Ok((s, true))
    }

    /// Smallest objective over `points` boundary points `μ + r L u` with
    /// `L L' = Σ`. In two dimensions `u` runs over an even angular grid;
    /// otherwise `u` is drawn uniformly on the unit sphere.
    pub fn boundary_search<R: Rng>(&self, points: usize, rng: &mut R) -> Result<T, StressError> {
        let l = linalg::cholesky(self.covariance.view()).map_err(|_| StressError::Degenerate)?;
        let k = self.mean.len();
        let mut best = T::infinity();
        for i in 0..points {
            let u: Array1<T> = if k == 2 {
                let theta = std::f64::consts::TAU * i as f64 / points as f64;
                Array1::from(vec![T::lit(theta.cos()), T::lit(theta.sin())])
            } else {
                let g: Array1<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let n = g.dot(&g).sqrt();
                g.mapv(|v| T::lit(v / n))
            };
            let s = &self.mean + &l.dot(&u).mapv(|v| v * self.radius);
            best = best.min(self.objective(s.view()));
        }
        Ok(best)
    }
}

fn check_weights<T: Scalar>(weights: ArrayView1<T>, p: usize) -> Result<(), StressError> {
    let sum = weights.sum().as_f64();
    if weights.len() != p || (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !w.is_finite()) {
        return Err(StressError::Weights {
            expected: p,
            len: weights.len(),
            sum,
        });
    }
    Ok(())
}

/// Builds the ellipsoid problem on `subset` for the given asset weights.
pub fn ellipsoid_problem<T: Scalar>(
    model: &FactorModel<T>,
    subset: &[String],
    radius: f64,
    weights: ArrayView1<T>,
) -> Result<EllipsoidProblem<T>, StressError> {
    if subset.is_empty() {
        return Err(StressError::NoCoreFactors("ellipsoid".into()));
    }
    if weights.len() != model.n_assets() || weights.iter().any(|w| !w.is_finite()) {
        return Err(StressError::Weights {
            expected: model.n_assets(),
            len: weights.len(),
            sum: weights.sum().as_f64(),
        });
    }
    let mut idx = Vec::with_capacity(subset.len());
    for label in subset {
        let i = model
            .factor_index(label)
            .map_err(|_| StressError::UnknownFactor(label.clone()))?;
        if idx.contains(&i) {
            return Err(StressError::DuplicateFactor(label.clone()));
        }
        idx.push(i);
    }
    let betas = model.betas().select(Axis(1), &idx);
    Ok(EllipsoidProblem {
        mean: model.factor_means().select(Axis(0), &idx),
        covariance: model.factor_covariance().select(Axis(0), &idx).select(Axis(1), &idx),
        direction: betas.t().dot(&weights),
        offset: weights.dot(model.alphas()),
        radius: T::lit(radius),
    })
}

/// Closed-form worst case on the ellipsoid of Mahalanobis radius `radius`.
pub fn worst_case_ellipsoid<T: Scalar>(
    model: &FactorModel<T>,
    subset: &[String],
    radius: f64,
    weights: ArrayView1<T>,
) -> Result<EllipsoidScenario, StressError> {
    let problem = ellipsoid_problem(model, subset, radius, weights)?;
    let (s, binding) = problem.solve()?;
    let idx: Vec<usize> = subset
        .iter()
        .map(|l| model.factor_index(l).expect("checked"))
        .collect();
    let sds = model.factor_sds();
    Ok(EllipsoidScenario {
        labels: subset.to_vec(),
        radius,
        solution: s.iter().map(|v| v.as_f64()).collect(),
        solution_in_sd: s
            .iter()
            .zip(&idx)
            .map(|(&v, &i)| ((v - model.factor_means()[i]) / sds[i]).as_f64())
            .collect(),
        binding,
        objective: problem.objective(s.view()).as_f64(),
        mahalanobis: problem.mahalanobis(s.view())?.as_f64(),
    })
}

/// Full factor vector of an ellipsoid scenario: subset factors at `s*`,
/// the others at their means.
pub fn ellipsoid_factor_vector<T: Scalar>(
    model: &FactorModel<T>,
    scenario: &EllipsoidScenario,
) -> Result<Array1<T>, StressError> {
    let mut out = model.factor_means().clone();
    for (label, &v) in scenario.labels.iter().zip(&scenario.solution) {
        let i = model
            .factor_index(label)
            .map_err(|_| StressError::UnknownFactor(label.clone()))?;
        out[i] = T::lit(v);
    }
    Ok(out)
}

/// Shape of the stress network derived from a joint decoder: hidden widths
/// scaled by `outputs / d` (at least 1), same activation.
pub fn stress_network_spec<T: Scalar>(decoder: &Mlp<T>, outputs: usize) -> HiddenSpec {
    let d = decoder.output_size();
    let hidden = &decoder.layers[..decoder.layers.len() - 1];
    let widths = hidden
        .iter()
        .map(|l| (((l.spec.output * outputs) as f64 / d as f64).round() as usize).max(1))
        .collect();
    HiddenSpec {
        widths,
        activation: hidden.first().map_or(Activation::Identity, |l| l.spec.activation),
        bias: decoder.layers[0].spec.bias,
    }
}

/// Outcome of network-based propagation.
#[derive(Debug, Clone)]
pub struct NetworkPropagation<T> {
    pub vector: Array1<T>,
    pub code_means: Array1<T>,
    pub code_sds: Array1<T>,
    pub full_mse: T,
}

/// Trains `core codes → peripheral codes` on the historical code series and
/// evaluates it at the shocked core values. Codes are standardised by their
/// own history for training; shocks are in units of each code's own sd.
pub fn propagate_with_network<T: Scalar>(
    codes: ArrayView2<T>,
    labels: &[String],
    scenario: &StressScenario,
    hidden: &HiddenSpec,
    config: &TrainConfig,
) -> Result<NetworkPropagation<T>, StressError> {
    scenario.validate()?;
    if labels.len() != codes.ncols() {
        return Err(StressError::Shape("one label per code column expected".into()));
    }
    let needed = 2 * config.batch_size.max(1);
    if codes.nrows() < needed {
        return Err(StressError::InsufficientHistory {
            needed,
            got: codes.nrows(),
        });
    }
    let core = scenario.core_indices(labels)?;
    let periph = complement(labels.len(), &core);
    let stats = ColumnStats::of(codes);
    let mut vector = stats.mean.clone();
    for (&i, &shift) in core.iter().zip(&scenario.shifts_in_sd) {
        vector[i] = stats.mean[i] + T::lit(shift) * stats.std_dev[i];
    }
    if periph.is_empty() {
        return Ok(NetworkPropagation {
            vector,
            code_means: stats.mean,
            code_sds: stats.std_dev,
            full_mse: T::zero(),
        });
    }
    if stats.std_dev.iter().any(|&s| !(s > T::zero())) {
        return Err(StressError::Degenerate);
    }
    let z = stats.apply(codes);
    let x = z.select(Axis(1), &core);
    let y = z.select(Axis(1), &periph);
    let cfg = config.substream(&format!("stress/{}", scenario.name));
    let mut rng = substream_rng(cfg.seed, "init");
    let net = Mlp::dense(core.len(), &hidden.widths, hidden.activation, periph.len(), hidden.bias, &mut rng)?;
    let trained = nnet::train_mapping(&net, x.view(), y.view(), &cfg)?;
    let shocked: Array1<T> = scenario.shifts_in_sd.iter().map(|&v| T::lit(v)).collect();
    let pred = trained.network.predict(shocked.insert_axis(Axis(0)).view())?;
    for (col, &u) in periph.iter().enumerate() {
        vector[u] = stats.mean[u] + pred[[0, col]] * stats.std_dev[u];
    }
    Ok(NetworkPropagation {
        vector,
        code_means: stats.mean,
        code_sds: stats.std_dev,
        full_mse: trained.full_mse,
    })
}

/// Network propagation on the codes of a clustered autoencoder, using a
/// stress network shaped like its joint decoder.
pub fn ae_stress_propagation<T: Scalar>(
    cae: &ClusteredAe<T>,
    rows: ArrayView2<T>,
    scenario: &StressScenario,
    config: &TrainConfig,
) -> Result<NetworkPropagation<T>, StressError> {
    let codes = nnet::encode_clustered(cae, rows)?;
    let n_out = cae.n_codes().saturating_sub(scenario.core_labels.len()).max(1);
    let spec = stress_network_spec(cae.decoder(), n_out);
    propagate_with_network(codes.view(), cae.code_labels(), scenario, &spec, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioImpact<T> {
    pub per_asset: Array1<T>,
    pub portfolio: T,
}

/// `α + B f` per asset and its weighted sum; residuals at their mean 0.
pub fn portfolio_impact<T: Scalar>(
    model: &FactorModel<T>,
    factors: ArrayView1<T>,
    weights: ArrayView1<T>,
) -> Result<PortfolioImpact<T>, StressError> {
    if factors.len() != model.n_factors() {
        return Err(StressError::Shape(format!(
            "{} factor values for {} factors",
            factors.len(),
            model.n_factors()
        )));
    }
    check_weights(weights, model.n_assets())?;
    let per_asset = model.alphas() + &model.betas().dot(&factors);
    let portfolio = weights.dot(&per_asset);
    Ok(PortfolioImpact {
        per_asset,
        portfolio,
    })
}

pub fn equal_weights<T: Scalar>(p: usize) -> Array1<T> {
    Array1::from_elem(p, T::one() / T::from_count(p.max(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFrequency {
    pub fraction: f64,
    pub days_per_year: f64,
}

impl TailFrequency {
    fn from_fraction(fraction: f64) -> Self {
        Self {
            fraction,
            days_per_year: fraction * TRADING_DAYS,
        }
    }
}

fn in_tail(v: f64, mean: f64, sd: f64, threshold: f64) -> bool {
    let level = mean + threshold * sd;
    if threshold <= 0.0 {
        v <= level
    } else {
        v >= level
    }
}

/// Share of observations at or beyond `mean + threshold·sd` (lower tail for
/// `threshold <= 0`, upper tail otherwise), using the series' own moments.
pub fn tail_frequency<T: Scalar>(
    series: ArrayView1<T>,
    threshold: f64,
) -> Result<TailFrequency, StressError> {
    joint_tail_frequency(series.insert_axis(Axis(1)), &[threshold])
}

/// Share of rows in which every column is at least as extreme as its
/// threshold.
pub fn joint_tail_frequency<T: Scalar>(
    series: ArrayView2<T>,
    thresholds: &[f64],
) -> Result<TailFrequency, StressError> {
    if series.nrows() == 0 {
        return Err(StressError::EmptySeries);
    }
    if series.ncols() != thresholds.len() {
        return Err(StressError::Shape("one threshold per column expected".into()));
    }
    let stats = ColumnStats::of(series);
    let sd = |j: usize| {
        let s = stats.std_dev[j].as_f64();
        if s.is_finite() { s } else { 0.0 }
    };
    let hits = series
        .rows()
        .into_iter()
        .filter(|row| {
            row.iter().enumerate().all(|(j, v)| {
                in_tail(v.as_f64(), stats.mean[j].as_f64(), sd(j), thresholds[j])
            })
        })
        .count();
    Ok(TailFrequency::from_fraction(hits as f64 / series.nrows() as f64))
}

/// Everything reported for one evaluated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub kind: String,
    pub factor_labels: Vec<String>,
    pub full_factor_vector: Vec<f64>,
    pub full_factor_vector_in_sd: Vec<f64>,
    pub asset_labels: Vec<String>,
    pub per_asset_impact: Vec<f64>,
    pub portfolio_impact: f64,
    pub tail_frequency: Option<TailFrequency>,
    pub ellipsoid: Option<EllipsoidScenario>,
}

impl ScenarioResult {
    pub fn assemble<T: Scalar>(
        name: &str,
        kind: &str,
        model: &FactorModel<T>,
        vector: ArrayView1<T>,
        impact: &PortfolioImpact<T>,
    ) -> Self {
        let mu = model.factor_means();
        let sds = model.factor_sds();
        Self {
            name: name.to_string(),
            kind: kind.to_string(),
            factor_labels: model.factor_labels().to_vec(),
            full_factor_vector: vector.iter().map(|v| v.as_f64()).collect(),
            full_factor_vector_in_sd: vector
                .iter()
                .zip(mu.iter().zip(sds))
                .map(|(&v, (&m, &s))| ((v - m) / s).as_f64())
                .collect(),
            asset_labels: model.asset_labels().to_vec(),
            per_asset_impact: impact.per_asset.iter().map(|v| v.as_f64()).collect(),
            portfolio_impact: impact.portfolio.as_f64(),
            tail_frequency: None,
            ellipsoid: None,
        }
    }

    /// `(label, impact)` pairs in ascending order of impact, ties by label.
    pub fn sorted_impacts(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .asset_labels
            .iter()
            .cloned()
            .zip(self.per_asset_impact.iter().copied())
            .collect();
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }
}
