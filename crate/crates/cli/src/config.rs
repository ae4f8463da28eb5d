//! Run configuration: a TOML document with one table per pipeline stage.
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use riskagg::nnet::{Activation, HiddenSpec, TrainConfig};
use riskagg::panel::{ReturnMethod, Stride, WindowSpec};
use riskagg::stress::Propagation;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub calibrate: CalibrateConfig,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    #[default]
    Returns,
    Prices,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Risk factor panel (indices whose co-movement is aggregated).
    pub factors: PathBuf,
    /// Asset panel for factor model calibration and stress.
    pub assets: Option<PathBuf>,
    /// `label,category` sidecar for the factor panel.
    pub categories: Option<PathBuf>,
    #[serde(default)]
    pub input: InputKind,
    #[serde(default = "default_return_method")]
    pub return_method: String,
    #[serde(default = "default_date_format")]
    pub date_format: String,
}

fn default_return_method() -> String {
    "log".into()
}

fn default_date_format() -> String {
    "%Y-%m-%d".into()
}

impl DataConfig {
    pub fn return_method(&self) -> Result<ReturnMethod, CliError> {
        match self.return_method.as_str() {
            "log" => Ok(ReturnMethod::Log),
            "arithmetic" => Ok(ReturnMethod::Arithmetic),
            other => Err(CliError::Config(format!(
                "data.return_method must be \"log\" or \"arithmetic\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StrideValue {
    Rows(usize),
    Named(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_stride")]
    pub stride: StrideValue,
}

fn default_width() -> usize {
    250
}

fn default_stride() -> StrideValue {
    StrideValue::Named("month-end".into())
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            stride: default_stride(),
        }
    }
}

impl WindowConfig {
    pub fn spec(&self) -> Result<WindowSpec, CliError> {
        let stride = match &self.stride {
            StrideValue::Rows(r) => Stride::Rows(*r),
            StrideValue::Named(s) if s == "month-end" => Stride::MonthEnd,
            StrideValue::Named(s) => {
                return Err(CliError::Config(format!(
                    "window.stride must be a row count or \"month-end\", got {s:?}"
                )))
            }
        };
        let spec = WindowSpec {
            width: self.width,
            stride,
        };
        spec.validate().map_err(|e| CliError::Config(format!("window: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pca,
    #[default]
    ClusteredPca,
    ClusteredAe,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pca => "pca",
            ModelKind::ClusteredPca => "clustered-pca",
            ModelKind::ClusteredAe => "clustered-ae",
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// Cut the Ward dendrogram at this many clusters instead of grouping by
    /// category.
    pub clusters: Option<usize>,
    /// Global principal components kept by the `pca` model.
    pub components: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub l2: f64,
    /// Chronological hold-out share; 0 trains on every row.
    pub validation_fraction: f64,
    /// Early stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    pub refit_on_full: bool,
    pub encoder_widths: Vec<usize>,
    pub encoder_activation: String,
    pub decoder_widths: Vec<usize>,
    pub decoder_activation: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let enc = HiddenSpec::clustered_encoder_default();
        let dec = HiddenSpec::clustered_decoder_default();
        Self {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            step_size: t.step_size,
            l2: t.l2,
            validation_fraction: t.validation_fraction.unwrap_or(0.0),
            patience: t.early_stop_patience.unwrap_or(0),
            refit_on_full: t.refit_on_full,
            encoder_widths: enc.widths,
            encoder_activation: enc.activation.to_string(),
            decoder_widths: dec.widths,
            decoder_activation: dec.activation.to_string(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            step_size: self.step_size,
            l2: self.l2,
            validation_fraction: (self.validation_fraction > 0.0).then_some(self.validation_fraction),
            early_stop_patience: (self.patience > 0).then_some(self.patience),
            refit_on_full: self.refit_on_full,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(cfg)
    }

    fn hidden(widths: &[usize], activation: &str, what: &str) -> Result<HiddenSpec, CliError> {
        let act: Activation = activation
            .parse()
            .map_err(|e| CliError::Config(format!("train.{what}_activation: {e}")))?;
        if widths.contains(&0) {
            return Err(CliError::Config(format!("train.{what}_widths must be positive")));
        }
        Ok(HiddenSpec::new(widths.to_vec(), act))
    }

    pub fn encoder(&self) -> Result<HiddenSpec, CliError> {
        Self::hidden(&self.encoder_widths, &self.encoder_activation, "encoder")
    }

    pub fn decoder(&self) -> Result<HiddenSpec, CliError> {
        Self::hidden(&self.decoder_widths, &self.decoder_activation, "decoder")
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Principal components reported per window (default: up to 6).
    pub components: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Most recent rows of the asset panel used for the regressions.
    #[serde(default = "default_calibration_window")]
    pub window: usize,
    /// `label,weight` file; equal weights when absent.
    pub weights: Option<PathBuf>,
}

fn default_calibration_window() -> usize {
    750
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            window: default_calibration_window(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Bump,
    Ellipsoid,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Bump => "bump",
            ScenarioKind::Ellipsoid => "ellipsoid",
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub kind: ScenarioKind,
    /// Core factors of a bump, or the factor subset of an ellipsoid search.
    pub factors: Vec<String>,
    #[serde(default)]
    pub shifts: Vec<f64>,
    #[serde(default = "default_propagation")]
    pub propagation: String,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Factor frame the scenario is evaluated in; defaults to `model.kind`.
    pub model: Option<ModelKind>,
}

fn default_propagation() -> String {
    "conditional-gaussian".into()
}

fn default_radius() -> f64 {
    2.0
}

impl ScenarioConfig {
    pub fn propagation(&self) -> Result<Propagation, CliError> {
        self.propagation
            .parse()
            .map_err(|e| CliError::Config(format!("scenario {:?}: {e}", self.name)))
    }
}

/// A parsed config together with the digest of its source text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(text.as_bytes());
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let loaded = Self {
            config,
            sha256,
            base_dir,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let must_exist = |label: &str, p: &Path| {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{label}: {} does not exist", full.display())))
            }
        };
        must_exist("data.factors", &c.data.factors)?;
        if let Some(p) = &c.data.assets {
            must_exist("data.assets", p)?;
        }
        if let Some(p) = &c.data.categories {
            must_exist("data.categories", p)?;
        }
        if let Some(p) = &c.calibrate.weights {
            must_exist("calibrate.weights", p)?;
        }
        c.data.return_method()?;
        c.window.spec()?;
        if c.model.clusters == Some(0) {
            return Err(CliError::Config("model.clusters must be >= 1".into()));
        }
        if c.model.components == Some(0) {
            return Err(CliError::Config("model.components must be >= 1".into()));
        }
        if c.diagnose.components == Some(0) {
            return Err(CliError::Config("diagnose.components must be >= 1".into()));
        }
        if c.calibrate.window < 3 {
            return Err(CliError::Config("calibrate.window must be >= 3".into()));
        }
        c.train.train_config(c.seed)?;
        c.train.encoder()?;
        c.train.decoder()?;
        let mut names = BTreeSet::new();
        for s in &c.scenarios {
            let valid_name = !s.name.is_empty()
                && s.name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_');
            if !valid_name {
                return Err(CliError::Config(format!(
                    "scenario name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                    s.name
                )));
            }
            if !names.insert(s.name.as_str()) {
                return Err(CliError::Config(format!("duplicate scenario name {:?}", s.name)));
            }
            if s.factors.is_empty() {
                return Err(CliError::Config(format!("scenario {:?} lists no factors", s.name)));
            }
            let propagation = s.propagation()?;
            match s.kind {
                ScenarioKind::Bump if s.shifts.len() != s.factors.len() => {
                    return Err(CliError::Config(format!(
                        "scenario {:?}: {} factors but {} shifts",
                        s.name,
                        s.factors.len(),
                        s.shifts.len()
                    )))
                }
                ScenarioKind::Ellipsoid if !(s.radius > 0.0 && s.radius.is_finite()) => {
                    return Err(CliError::Config(format!(
                        "scenario {:?}: radius must be positive",
                        s.name
                    )))
                }
                _ => {}
            }
            let model = s.model.unwrap_or(c.model.kind);
            if propagation == Propagation::AeDecoder && model != ModelKind::ClusteredAe {
                return Err(CliError::Config(format!(
                    "scenario {:?}: ae-decoder propagation needs the clustered-ae model",
                    s.name
                )));
            }
        }
        if !c.scenarios.is_empty() && c.data.assets.is_none() {
            return Err(CliError::Config("scenarios need data.assets".into()));
        }
        Ok(())
    }
}
