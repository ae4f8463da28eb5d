//! Shared state of one CLI run. Intermediate results (clusters, factor
//! series, trained networks, factor models) are computed on first use and
//! reused by later stages of the same run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array1;
use riskagg::cluster::{self, ClusterAssignment, Dendrogram};
use riskagg::factors::{self, AggregatedFactors, ClusteredPcaModel, FactorModel, Provenance};
use riskagg::nnet::{self, ClusteredAeFit, TrainConfig};
use riskagg::panel::{self, LoadOptions, ReturnPanel, StandardizedPanel, StatsSource};
use riskagg::pca::{self, PcaModel};
use riskagg::stress;

use crate::config::{InputKind, LoadedConfig, ModelKind};
use crate::error::CliError;

pub struct Run {
    pub config: LoadedConfig,
    pub seed: u64,
    pub factors: ReturnPanel<f64>,
    pub categories: Option<BTreeMap<String, String>>,
    pub standardized: StandardizedPanel<f64>,
    assets: Option<ReturnPanel<f64>>,
    dendrogram: Option<Dendrogram>,
    assignment: Option<Option<ClusterAssignment>>,
    global_pca: Option<PcaModel<f64>>,
    clustered_pca: Option<ClusteredPcaModel<f64>>,
    clustered_ae: Option<ClusteredAeFit<f64>>,
    aggregated: BTreeMap<ModelKind, AggregatedFactors<f64>>,
    models: BTreeMap<ModelKind, FactorModel<f64>>,
}

impl Run {
    pub fn new(config: LoadedConfig, seed: u64) -> Result<Self, CliError> {
        let data = &config.config.data;
        let factors = load(&config, &config.resolve(&data.factors))?;
        let categories = match &data.categories {
            Some(p) => {
                let path = config.resolve(p);
                let cats = panel::load_categories_path(&path).map_err(|e| CliError::input(&path, e))?;
                if let Some(missing) = factors.labels().iter().find(|l| !cats.contains_key(*l)) {
                    return Err(CliError::input(&path, format!("no category for factor {missing:?}")));
                }
                Some(cats)
            }
            None => None,
        };
        let standardized = panel::standardize(&factors, StatsSource::SelfWindow)
            .map_err(|e| CliError::Numeric(format!("standardising the factor panel: {e}")))?;
        Ok(Self {
            config,
            seed,
            factors,
            categories,
            standardized,
            assets: None,
            dendrogram: None,
            assignment: None,
            global_pca: None,
            clustered_pca: None,
            clustered_ae: None,
            aggregated: BTreeMap::new(),
            models: BTreeMap::new(),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        self.config.config.train.train_config(self.seed)
    }

    pub fn dendrogram(&mut self) -> Result<&Dendrogram, CliError> {
        if self.dendrogram.is_none() {
            self.dendrogram = Some(cluster::ward_cluster(&self.standardized)?);
        }
        Ok(self.dendrogram.as_ref().expect("set above"))
    }

    /// Column grouping: a Ward cut when `model.clusters` is set, otherwise
    /// the categories, otherwise none.
    pub fn assignment(&mut self) -> Result<Option<ClusterAssignment>, CliError> {
        if let Some(a) = &self.assignment {
            return Ok(a.clone());
        }
        let d = self.factors.n_cols();
        let a = match (self.config.config.model.clusters, &self.categories) {
            (Some(k), _) => {
                if k > d {
                    return Err(CliError::Config(format!(
                        "model.clusters = {k} exceeds the {d} factor columns"
                    )));
                }
                if k == d {
                    let raw: Vec<usize> = (0..d).collect();
                    Some(ClusterAssignment::from_raw(self.factors.labels().to_vec(), &raw, None))
                } else {
                    let dendrogram = self.dendrogram()?.clone();
                    Some(cluster::cut(&dendrogram, k)?)
                }
            }
            (None, Some(cats)) => Some(
                ClusterAssignment::from_categories(self.factors.labels(), cats)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            ),
            (None, None) => None,
        };
        self.assignment = Some(a.clone());
        Ok(a)
    }

    fn require_assignment(&mut self, kind: ModelKind) -> Result<ClusterAssignment, CliError> {
        self.assignment()?.ok_or_else(|| {
            CliError::Config(format!(
                "the {kind} model needs data.categories or model.clusters"
            ))
        })
    }

    pub fn global_pca(&mut self) -> Result<&PcaModel<f64>, CliError> {
        if self.global_pca.is_none() {
            self.global_pca = Some(pca::fit_pca(&self.standardized)?);
        }
        Ok(self.global_pca.as_ref().expect("set above"))
    }

    /// Global components kept: `model.components`, else one per cluster,
    /// else the Kaiser–Guttman count.
    pub fn pca_components(&mut self) -> Result<usize, CliError> {
        let d = self.factors.n_cols();
        let k = match self.config.config.model.components {
            Some(k) => k,
            None => match self.assignment()? {
                Some(a) => a.n_clusters(),
                None => pca::kaiser_guttman(self.global_pca()?).max(1),
            },
        };
        if k > d {
            return Err(CliError::Config(format!(
                "{k} principal components requested from {d} factor columns"
            )));
        }
        Ok(k)
    }

    pub fn clustered_pca(&mut self) -> Result<&ClusteredPcaModel<f64>, CliError> {
        if self.clustered_pca.is_none() {
            let a = self.require_assignment(ModelKind::ClusteredPca)?;
            self.clustered_pca = Some(factors::fit_clustered_pca(&self.standardized, &a)?);
        }
        Ok(self.clustered_pca.as_ref().expect("set above"))
    }

    pub fn clustered_ae(&mut self) -> Result<&ClusteredAeFit<f64>, CliError> {
        if self.clustered_ae.is_none() {
            let a = self.require_assignment(ModelKind::ClusteredAe)?;
            let train = &self.config.config.train;
            let (enc, dec) = (train.encoder()?, train.decoder()?);
            let cfg = self.train_config()?;
            let fit = nnet::fit_clustered_ae(self.standardized.values(), &a, &enc, &dec, &cfg)?;
            self.clustered_ae = Some(fit);
        }
        Ok(self.clustered_ae.as_ref().expect("set above"))
    }

    /// Full-history factor series of the given model.
    pub fn aggregate(&mut self, kind: ModelKind) -> Result<AggregatedFactors<f64>, CliError> {
        if let Some(f) = self.aggregated.get(&kind) {
            return Ok(f.clone());
        }
        let dates = self.standardized.dates().to_vec();
        let f = match kind {
            ModelKind::Pca => {
                let k = self.pca_components()?;
                factors::global_pca_factors(self.global_pca()?, &dates, k)?
            }
            ModelKind::ClusteredPca => self.clustered_pca()?.factors().clone(),
            ModelKind::ClusteredAe => {
                let rows = self.standardized.values().to_owned();
                let model = &self.clustered_ae()?.model;
                let codes = nnet::encode_clustered(model, rows.view())?;
                AggregatedFactors::new(model.code_labels().to_vec(), dates, codes, Provenance::ClusteredAe)?
            }
        };
        self.aggregated.insert(kind, f.clone());
        Ok(f)
    }

    pub fn assets(&mut self) -> Result<&ReturnPanel<f64>, CliError> {
        if self.assets.is_none() {
            let p = self
                .config
                .config
                .data
                .assets
                .clone()
                .ok_or_else(|| CliError::Config("data.assets is required for calibration".into()))?;
            self.assets = Some(load(&self.config, &self.config.resolve(&p))?);
        }
        Ok(self.assets.as_ref().expect("set above"))
    }

    /// Factor model on the most recent `calibrate.window` dates shared by
    /// the asset panel and the factor series. Shock scales stay those of the
    /// full factor history.
    pub fn factor_model(&mut self, kind: ModelKind) -> Result<FactorModel<f64>, CliError> {
        if let Some(m) = self.models.get(&kind) {
            return Ok(m.clone());
        }
        let factors = self.aggregate(kind)?;
        let window = self.config.config.calibrate.window;
        let assets = self.assets()?;
        let available: BTreeSet<_> = factors.dates().iter().copied().collect();
        let common: Vec<_> = assets
            .dates()
            .iter()
            .copied()
            .filter(|d| available.contains(d))
            .collect();
        let needed = factors.n_factors() + 2;
        if common.len() < needed {
            return Err(CliError::Config(format!(
                "assets and factors share {} dates; the {kind} model needs at least {needed}",
                common.len()
            )));
        }
        let recent: BTreeSet<_> = common[common.len().saturating_sub(window)..].iter().copied().collect();
        let model = factors::fit_factor_model(
            &assets.restrict_to_dates(&recent),
            &factors.restrict_to_dates(&recent),
        )?;
        self.models.insert(kind, model.clone());
        Ok(model)
    }

    /// Portfolio weights from `calibrate.weights`, or `1/p` each.
    pub fn weights(&mut self, model: &FactorModel<f64>) -> Result<Array1<f64>, CliError> {
        let Some(p) = self.config.config.calibrate.weights.clone() else {
            return Ok(stress::equal_weights(model.n_assets()));
        };
        let path = self.config.resolve(&p);
        let table = panel::load_categories_path(&path).map_err(|e| CliError::input(&path, e))?;
        let mut w = Array1::zeros(model.n_assets());
        for (i, label) in model.asset_labels().iter().enumerate() {
            let raw = table
                .get(label)
                .ok_or_else(|| CliError::input(&path, format!("no weight for asset {label:?}")))?;
            w[i] = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::input(&path, format!("weight {raw:?} of {label:?} is not a number")))?;
        }
        if (w.sum() - 1.0).abs() > 1e-9 {
            return Err(CliError::input(&path, format!("weights sum to {}, not 1", w.sum())));
        }
        Ok(w)
    }
}

fn load(config: &LoadedConfig, path: &Path) -> Result<ReturnPanel<f64>, CliError> {
    let data = &config.config.data;
    let options = LoadOptions {
        date_format: data.date_format.clone(),
        ..LoadOptions::default()
    };
    let (raw, report) = panel::load_panel_path::<f64>(path, &options).map_err(|e| CliError::input(path, e))?;
    if report.dropped_rows > 0 {
        eprintln!("{}: dropped {} incomplete rows", path.display(), report.dropped_rows);
    }
    match data.input {
        InputKind::Returns => Ok(raw),
        InputKind::Prices => {
            panel::to_returns(&raw, data.return_method()?).map_err(|e| CliError::input(path, e))
        }
    }
}
