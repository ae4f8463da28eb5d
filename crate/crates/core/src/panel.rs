//! Dated return panels: CSV ingestion, price-to-return conversion,
//! standardisation and rolling windows.
//!
//! A panel is an `n x d` matrix whose rows are strictly increasing calendar
//! dates and whose columns are uniquely labelled series. Standard deviations
//! use the `n - 1` denominator throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("line {line}: cannot parse date {value:?}")]
    UnparseableDate { line: u64, value: String },
    #[error("duplicate column label {0:?}")]
    DuplicateLabel(String),
    #[error("only {usable} usable rows; at least 2 are required")]
    TooFewRows { usable: usize },
    #[error("first column must be {expected:?}, found {found:?}")]
    MissingDateColumn { expected: String, found: String },
    #[error("panel has no value columns")]
    NoColumns,
    #[error("dates must be strictly increasing ({previous} then {next})")]
    UnorderedDates { previous: NaiveDate, next: NaiveDate },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in column {0:?}")]
    NonFinite(String),
    #[error("label {0:?} has no category")]
    MissingCategory(String),
    #[error("column {0:?} has zero variance")]
    ZeroVariance(String),
    #[error("non-positive price {value} in column {label:?} under log returns")]
    NonPositivePrice { label: String, value: f64 },
    #[error("panel has {rows} rows, shorter than window width {width}")]
    ShorterThanWindow { rows: usize, width: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("unknown column {0:?}")]
    UnknownLabel(String),
    #[error("category file line {line}: {message}")]
    CategoryFormat { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dated matrix of per-period returns with column labels and optional
/// category tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel<T> {
    dates: Vec<NaiveDate>,
    labels: Vec<String>,
    categories: Option<BTreeMap<String, String>>,
    values: Array2<T>,
}

impl<T: Scalar> ReturnPanel<T> {
    pub fn new(
        dates: Vec<NaiveDate>,
        labels: Vec<String>,
        values: Array2<T>,
    ) -> Result<Self, PanelError> {
        if values.nrows() != dates.len() {
            return Err(PanelError::Shape(format!(
                "{} dates for {} rows",
                dates.len(),
                values.nrows()
            )));
        }
        if values.ncols() != labels.len() {
            return Err(PanelError::Shape(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        if labels.is_empty() {
            return Err(PanelError::NoColumns);
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(PanelError::DuplicateLabel(label.clone()));
            }
        }
        for pair in dates.windows(2) {
            if pair[1] <= pair[0] {
                return Err(PanelError::UnorderedDates {
                    previous: pair[0],
                    next: pair[1],
                });
            }
        }
        for (j, col) in values.columns().into_iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(PanelError::NonFinite(labels[j].clone()));
            }
        }
        Ok(Self {
            dates,
            labels,
            categories: None,
            values,
        })
    }

    /// Attaches category tags; every label must receive exactly one.
    /// Entries for labels not in the panel are ignored.
    pub fn with_categories(
        mut self,
        categories: &BTreeMap<String, String>,
    ) -> Result<Self, PanelError> {
        let mut own = BTreeMap::new();
        for label in &self.labels {
            let cat = categories
                .get(label)
                .ok_or_else(|| PanelError::MissingCategory(label.clone()))?;
            own.insert(label.clone(), cat.clone());
        }
        self.categories = Some(own);
        Ok(self)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn categories(&self) -> Option<&BTreeMap<String, String>> {
        self.categories.as_ref()
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Contiguous block of rows.
    pub fn rows(&self, range: Range<usize>) -> ReturnPanel<T> {
        ReturnPanel {
            dates: self.dates[range.clone()].to_vec(),
            labels: self.labels.clone(),
            categories: self.categories.clone(),
            values: self.values.slice(ndarray::s![range, ..]).to_owned(),
        }
    }

    /// Last `count` rows (or all rows if fewer).
    pub fn tail(&self, count: usize) -> ReturnPanel<T> {
        let n = self.n_rows();
        self.rows(n.saturating_sub(count)..n)
    }

    /// Sub-panel of the given columns, in the given order.
    pub fn columns(&self, indices: &[usize]) -> ReturnPanel<T> {
        let labels: Vec<String> = indices.iter().map(|&j| self.labels[j].clone()).collect();
        let categories = self.categories.as_ref().map(|cats| {
            labels
                .iter()
                .map(|l| (l.clone(), cats[l].clone()))
                .collect::<BTreeMap<_, _>>()
        });
        ReturnPanel {
            dates: self.dates.clone(),
            labels,
            categories,
            values: self.values.select(Axis(1), indices),
        }
    }

    /// Rows whose dates appear in `dates` (which need not be sorted).
    pub fn restrict_to_dates(&self, dates: &BTreeSet<NaiveDate>) -> ReturnPanel<T> {
        let keep: Vec<usize> = self
            .dates
            .iter()
            .enumerate()
            .filter(|(_, d)| dates.contains(d))
            .map(|(i, _)| i)
            .collect();
        ReturnPanel {
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            labels: self.labels.clone(),
            categories: self.categories.clone(),
            values: self.values.select(Axis(0), &keep),
        }
    }
}

/// Restricts two panels to their common dates.
pub fn align_on_dates<T: Scalar>(
    a: &ReturnPanel<T>,
    b: &ReturnPanel<T>,
) -> (ReturnPanel<T>, ReturnPanel<T>) {
    let da: BTreeSet<NaiveDate> = a.dates.iter().copied().collect();
    let common: BTreeSet<NaiveDate> = b.dates.iter().copied().filter(|d| da.contains(d)).collect();
    (a.restrict_to_dates(&common), b.restrict_to_dates(&common))
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Expected header of the first column.
    pub date_column: String,
    pub delimiter: u8,
    /// `chrono` format string for the date column.
    pub date_format: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            date_column: "date".to_string(),
            delimiter: b',',
            date_format: "%Y-%m-%d".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_rows: usize,
}

/// Reads a panel from CSV: a `date` column followed by numeric columns.
/// Rows with a blank, non-numeric or non-finite cell are dropped and counted.
pub fn load_panel<T: Scalar, R: Read>(
    reader: R,
    options: &LoadOptions,
) -> Result<(ReturnPanel<T>, LoadReport), PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let first = headers.get(0).unwrap_or("").to_string();
    if first != options.date_column {
        return Err(PanelError::MissingDateColumn {
            expected: options.date_column.clone(),
            found: first,
        });
    }
    let labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if labels.is_empty() {
        return Err(PanelError::NoColumns);
    }
    let mut seen = BTreeSet::new();
    for label in &labels {
        if !seen.insert(label.as_str()) {
            return Err(PanelError::DuplicateLabel(label.clone()));
        }
    }

    let d = labels.len();
    let mut dates = Vec::new();
    let mut flat: Vec<T> = Vec::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let raw_date = record.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, &options.date_format).map_err(|_| {
            PanelError::UnparseableDate {
                line,
                value: raw_date.to_string(),
            }
        })?;
        let parsed: Option<Vec<T>> = record
            .iter()
            .skip(1)
            .map(|cell| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .and_then(T::from_f64)
            })
            .collect();
        match parsed {
            Some(row) => {
                dates.push(date);
                flat.extend(row);
            }
            None => dropped += 1,
        }
    }
    if dates.len() < 2 {
        return Err(PanelError::TooFewRows { usable: dates.len() });
    }
    let values = Array2::from_shape_vec((dates.len(), d), flat)
        .map_err(|e| PanelError::Shape(e.to_string()))?;
    let panel = ReturnPanel::new(dates, labels, values)?;
    Ok((
        panel,
        LoadReport {
            dropped_rows: dropped,
        },
    ))
}

pub fn load_panel_path<T: Scalar>(
    path: &Path,
    options: &LoadOptions,
) -> Result<(ReturnPanel<T>, LoadReport), PanelError> {
    let file = std::fs::File::open(path)?;
    load_panel(std::io::BufReader::new(file), options)
}

/// Reads `label,category` lines. A header line `label,category` is optional.
pub fn load_categories<R: Read>(reader: R) -> Result<BTreeMap<String, String>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(PanelError::CategoryFormat {
                line,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let (label, cat) = (&record[0], &record[1]);
        if i == 0 && label == "label" && cat == "category" {
            continue;
        }
        if out.insert(label.to_string(), cat.to_string()).is_some() {
            return Err(PanelError::CategoryFormat {
                line,
                message: format!("label {label:?} listed twice"),
            });
        }
    }
    Ok(out)
}

pub fn load_categories_path(path: &Path) -> Result<BTreeMap<String, String>, PanelError> {
    load_categories(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Formats a value with 17 significant digits, enough to round-trip `f64`.
pub fn format_value<T: Scalar>(v: T) -> String {
    format!("{v:.16e}")
}

/// Writes the panel in the same CSV layout `load_panel` reads.
pub fn write_panel<T: Scalar, W: Write>(panel: &ReturnPanel<T>, writer: W) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.labels.iter().cloned());
    wtr.write_record(&header)?;
    for (i, date) in panel.dates.iter().enumerate() {
        let mut row = vec![date.format("%Y-%m-%d").to_string()];
        row.extend(panel.values.row(i).iter().map(|&v| format_value(v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReturnMethod {
    #[default]
    Log,
    Arithmetic,
}

/// Converts a price panel into one-period returns; the first date is lost.
pub fn to_returns<T: Scalar>(
    prices: &ReturnPanel<T>,
    method: ReturnMethod,
) -> Result<ReturnPanel<T>, PanelError> {
    let n = prices.n_rows();
    if n < 3 {
        return Err(PanelError::TooFewRows {
            usable: n.saturating_sub(1),
        });
    }
    if method == ReturnMethod::Log {
        for (j, col) in prices.values.columns().into_iter().enumerate() {
            if let Some(&bad) = col.iter().find(|&&p| p <= T::zero()) {
                return Err(PanelError::NonPositivePrice {
                    label: prices.labels[j].clone(),
                    value: bad.as_f64(),
                });
            }
        }
    }
    let d = prices.n_cols();
    let mut out = Array2::<T>::zeros((n - 1, d));
    for t in 1..n {
        for j in 0..d {
            let (p0, p1) = (prices.values[[t - 1, j]], prices.values[[t, j]]);
            out[[t - 1, j]] = match method {
                ReturnMethod::Log => (p1 / p0).ln(),
                ReturnMethod::Arithmetic => p1 / p0 - T::one(),
            };
        }
    }
    let mut panel = ReturnPanel::new(prices.dates[1..].to_vec(), prices.labels.clone(), out)?;
    panel.categories = prices.categories.clone();
    Ok(panel)
}

/// Per-column mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats<T> {
    pub mean: Array1<T>,
    pub std_dev: Array1<T>,
}

impl<T: Scalar> ColumnStats<T> {
    pub fn of(values: ArrayView2<T>) -> Self {
        Self {
            mean: linalg::column_means(values),
            std_dev: linalg::column_std_devs(values),
        }
    }

    /// Applies `(x - mean) / sd` column-wise to raw rows.
    pub fn apply(&self, values: ArrayView2<T>) -> Array2<T> {
        (&values - &self.mean) / &self.std_dev
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StatsSource<'a, T> {
    /// Statistics from the panel being standardised.
    SelfWindow,
    /// Statistics estimated elsewhere, e.g. on a longer history.
    External(&'a ColumnStats<T>),
}

/// A panel together with the standardisation that was applied to it.
#[derive(Debug, Clone)]
pub struct StandardizedPanel<T> {
    base: ReturnPanel<T>,
    stats: ColumnStats<T>,
    values: Array2<T>,
}

impl<T: Scalar> StandardizedPanel<T> {
    pub fn base(&self) -> &ReturnPanel<T> {
        &self.base
    }

    pub fn stats(&self) -> &ColumnStats<T> {
        &self.stats
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn labels(&self) -> &[String] {
        self.base.labels()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.base.dates()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// The standardised values viewed as a panel of their own.
    pub fn as_panel(&self) -> ReturnPanel<T> {
        ReturnPanel {
            dates: self.base.dates.clone(),
            labels: self.base.labels.clone(),
            categories: self.base.categories.clone(),
            values: self.values.clone(),
        }
    }

    /// Sub-panel of the given columns, keeping each column's statistics.
    pub fn columns(&self, indices: &[usize]) -> StandardizedPanel<T> {
        StandardizedPanel {
            base: self.base.columns(indices),
            stats: ColumnStats {
                mean: self.stats.mean.select(Axis(0), indices),
                std_dev: self.stats.std_dev.select(Axis(0), indices),
            },
            values: self.values.select(Axis(1), indices),
        }
    }
}

pub fn standardize<T: Scalar>(
    panel: &ReturnPanel<T>,
    source: StatsSource<'_, T>,
) -> Result<StandardizedPanel<T>, PanelError> {
    let stats = match source {
        StatsSource::SelfWindow => ColumnStats::of(panel.values()),
        StatsSource::External(s) => {
            if s.mean.len() != panel.n_cols() || s.std_dev.len() != panel.n_cols() {
                return Err(PanelError::Shape(format!(
                    "statistics for {} columns, panel has {}",
                    s.mean.len(),
                    panel.n_cols()
                )));
            }
            s.clone()
        }
    };
    for (j, &sd) in stats.std_dev.iter().enumerate() {
        if !(sd > T::zero()) || !sd.is_finite() {
            return Err(PanelError::ZeroVariance(panel.labels[j].clone()));
        }
    }
    let values = stats.apply(panel.values());
    Ok(StandardizedPanel {
        base: panel.clone(),
        stats,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stride {
    /// Advance by a fixed number of observations.
    Rows(usize),
    /// One window ending at the last available date of each calendar month.
    MonthEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub width: usize,
    pub stride: Stride,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), PanelError> {
        if self.width < 2 {
            return Err(PanelError::InvalidWindow(format!(
                "width {} < 2",
                self.width
            )));
        }
        if self.stride == Stride::Rows(0) {
            return Err(PanelError::InvalidWindow("stride 0".to_string()));
        }
        Ok(())
    }
}

/// Row ranges of the windows `spec` selects from a panel with these dates.
pub fn window_ranges(dates: &[NaiveDate], spec: &WindowSpec) -> Result<Vec<Range<usize>>, PanelError> {
    spec.validate()?;
    let n = dates.len();
    if n < spec.width {
        return Err(PanelError::ShorterThanWindow {
            rows: n,
            width: spec.width,
        });
    }
    let ranges = match spec.stride {
        Stride::Rows(stride) => (0..)
            .map(|k| k * stride)
            .take_while(|start| start + spec.width <= n)
            .map(|start| start..start + spec.width)
            .collect(),
        Stride::MonthEnd => (0..n)
            .filter(|&i| {
                i + 1 == n || (dates[i + 1].year(), dates[i + 1].month()) != (dates[i].year(), dates[i].month())
            })
            .filter(|&end| end + 1 >= spec.width)
            .map(|end| end + 1 - spec.width..end + 1)
            .collect(),
    };
    Ok(ranges)
}

/// Rolling windows as `(window end date, sub-panel)` pairs.
pub fn rolling_windows<T: Scalar>(
    panel: &ReturnPanel<T>,
    spec: &WindowSpec,
) -> Result<Vec<(NaiveDate, ReturnPanel<T>)>, PanelError> {
    Ok(window_ranges(panel.dates(), spec)?
        .into_iter()
        .map(|r| (panel.dates[r.end - 1], panel.rows(r)))
        .collect())
}
