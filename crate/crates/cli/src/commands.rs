use std::collections::BTreeMap;

use ndarray::Axis;
use riskagg::nnet;
use riskagg::panel::{self, format_value, StatsSource};
use riskagg::pca::{self, Verdict};
use riskagg::stress::{self, Propagation, ScenarioResult, StressScenario, TailFrequency};
use serde::Serialize;

use crate::config::{ModelKind, ScenarioConfig, ScenarioKind};
use crate::error::CliError;
use crate::output::OutDir;
use crate::pipeline::Run;

/// Rolling-window PCA diagnostics: spectrum, Kaiser–Guttman count,
/// participation ratios, |correlation| heatmaps and category verdicts.
pub fn diagnose(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    let spec = run.config.config.window.spec()?;
    let n = run.factors.n_rows();
    if spec.width > n {
        return Err(CliError::Config(format!(
            "window width {} exceeds the {n} rows of the factor panel",
            spec.width
        )));
    }
    let d = run.factors.n_cols();
    let m = run.config.config.diagnose.components.unwrap_or(6).min(d);
    let windows = panel::rolling_windows(&run.factors, &spec)?;

    let mut diag_rows = Vec::new();
    let mut heat_rows = Vec::new();
    let mut verdict_rows = Vec::new();
    let mut verdict_doc = Vec::new();
    for (date, window) in &windows {
        let context = |e: &dyn std::fmt::Display| CliError::Numeric(format!("window ending {date}: {e}"));
        let z = panel::standardize(window, StatsSource::SelfWindow).map_err(|e| context(&e))?;
        let model = pca::fit_pca(&z).map_err(|e| context(&e))?;
        let kg = pca::kaiser_guttman(&model);
        let shares = model.explained_shares();
        for pc in 1..=m {
            let (ipr, pr) = pca::participation_ratio(&model, pc)?;
            diag_rows.push(vec![
                date.to_string(),
                pc.to_string(),
                format_value(model.eigenvalues()[pc - 1]),
                format_value(shares[pc - 1]),
                kg.to_string(),
                u8::from(pc <= kg).to_string(),
                format_value(ipr),
                format_value(pr),
            ]);
        }
        let corr = pca::factor_correlations(&model, true);
        for (j, label) in model.labels().iter().enumerate() {
            let mut row = vec![date.to_string(), label.clone()];
            row.extend((0..m).map(|i| format_value(corr[[j, i]])));
            heat_rows.push(row);
        }
        if let Some(cats) = &run.categories {
            let mut per_pc = Vec::new();
            for pc in 1..=m {
                let verdicts = pca::classify_categories(&model, pc, cats)?;
                for (cat, v) in &verdicts.0 {
                    verdict_rows.push(vec![
                        date.to_string(),
                        pc.to_string(),
                        cat.clone(),
                        v.as_str().to_string(),
                    ]);
                }
                per_pc.push(PcVerdicts {
                    pc,
                    verdicts: verdicts.0,
                });
            }
            verdict_doc.push(WindowVerdicts {
                date: date.to_string(),
                components: per_pc,
            });
        }
    }

    out.table(
        "diagnostics.csv",
        &["date", "pc", "eigenvalue", "share", "kg_count", "kg_significant", "ipr", "pr"],
        &diag_rows,
    )?;
    let mut header = vec!["date".to_string(), "label".to_string()];
    header.extend((1..=m).map(|i| format!("PC{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.table("heatmap.csv", &header, &heat_rows)?;
    if run.categories.is_some() {
        out.table("verdicts.csv", &["date", "pc", "category", "verdict"], &verdict_rows)?;
        out.json("verdicts.json", &VerdictDocument { windows: verdict_doc })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PcVerdicts {
    pc: usize,
    verdicts: BTreeMap<String, Verdict>,
}

#[derive(Serialize)]
struct WindowVerdicts {
    date: String,
    components: Vec<PcVerdicts>,
}

#[derive(Serialize)]
struct VerdictDocument {
    windows: Vec<WindowVerdicts>,
}

/// Ward dendrogram of the factor columns and, when a grouping is
/// configured, the cluster assignment.
pub fn cluster(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    let dendrogram = run.dendrogram()?.clone();
    out.csv("dendrogram.csv", |w| dendrogram.write_csv(w))?;
    let k = run
        .config
        .config
        .model
        .clusters
        .or_else(|| run.categories.as_ref().map(|c| {
            let used: std::collections::BTreeSet<_> =
                run.factors.labels().iter().map(|l| &c[l]).collect();
            used.len()
        }));
    if let Some(k) = k {
        if k > dendrogram.n_leaves() {
            return Err(CliError::Config(format!(
                "cannot cut {} columns into {k} clusters",
                dendrogram.n_leaves()
            )));
        }
        let cut = riskagg::cluster::cut(&dendrogram, k)?;
        out.csv("assignment.csv", |w| cut.write_csv(w))?;
    }
    Ok(())
}

/// Factor series of the configured model plus a reconstruction-MSE table
/// comparing PCA, clustered PCA and the clustered autoencoder.
pub fn aggregate(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    let kind = run.config.config.model.kind;
    let factors = run.aggregate(kind)?;
    out.csv("factors.csv", |w| factors.write_csv(w))?;

    let z = run.standardized.values().to_owned();
    let mut rows = Vec::new();
    let k = run.pca_components()?;
    let (_, pca_mse) = pca::reconstruct(run.global_pca()?, k)?;
    rows.push(vec![
        "pca".to_string(),
        format!("{k} global components"),
        String::new(),
        String::new(),
        format_value(pca_mse),
    ]);
    if let Some(a) = run.assignment()? {
        let (_, cpca_mse) = run.clustered_pca()?.reconstruct(z.view());
        rows.push(vec![
            "clustered-pca".to_string(),
            format!("{} clusters, first component each", a.n_clusters()),
            String::new(),
            String::new(),
            format_value(cpca_mse),
        ]);
        let train = run.config.config.train.clone();
        let spec = format!(
            "{} clusters, encoder {}, decoder {}",
            a.n_clusters(),
            train.encoder()?.describe(),
            train.decoder()?.describe()
        );
        let fit = run.clustered_ae()?;
        rows.push(vec![
            "clustered-ae".to_string(),
            spec,
            format_value(train.l2),
            train.batch_size.to_string(),
            format_value(fit.full_mse),
        ]);
        let doc = fit.model.to_document();
        let log = fit.decoder_log.clone();
        out.json("clustered_ae.json", &doc)?;
        out.csv("clustered_ae_decoder_log.csv", |w| nnet::write_epoch_log(&log, w))?;
    }
    out.table(
        "mse_table.csv",
        &["model", "specification", "l2", "batch_size", "mse"],
        &rows,
    )?;
    Ok(())
}

pub fn calibrate(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    let model = run.factor_model(run.config.config.model.kind)?;
    out.json("factor_model.json", &model.to_document())
}

#[derive(Serialize)]
struct ScenarioDocument<'a> {
    model: String,
    propagation: String,
    #[serde(flatten)]
    result: &'a ScenarioResult,
}

/// Evaluates every configured scenario on its factor model.
pub fn stress(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    let scenarios = run.config.config.scenarios.clone();
    let mut summary = Vec::new();
    for sc in &scenarios {
        let kind = sc.model.unwrap_or(run.config.config.model.kind);
        let (result, propagation) = evaluate(run, sc, kind)?;
        let doc = ScenarioDocument {
            model: kind.to_string(),
            propagation: propagation.to_string(),
            result: &result,
        };
        out.json(&format!("scenario_{}.json", sc.name), &doc)?;
        let impacts: Vec<Vec<String>> = result
            .sorted_impacts()
            .into_iter()
            .map(|(label, v)| vec![label, format_value(v)])
            .collect();
        out.table(&format!("scenario_{}.csv", sc.name), &["asset", "impact"], &impacts)?;
        let tail = result.tail_frequency;
        summary.push(vec![
            sc.name.clone(),
            kind.to_string(),
            sc.kind.to_string(),
            propagation.to_string(),
            format_value(result.portfolio_impact),
            result
                .ellipsoid
                .as_ref()
                .map(|e| e.binding.to_string())
                .unwrap_or_default(),
            tail.map(|t| format_value(t.fraction)).unwrap_or_default(),
            tail.map(|t| format_value(t.days_per_year)).unwrap_or_default(),
        ]);
    }
    out.table(
        "stress_summary.csv",
        &[
            "scenario",
            "model",
            "kind",
            "propagation",
            "portfolio_impact",
            "binding",
            "tail_fraction",
            "tail_days_per_year",
        ],
        &summary,
    )
}

fn evaluate(
    run: &mut Run,
    sc: &ScenarioConfig,
    kind: ModelKind,
) -> Result<(ScenarioResult, Propagation), CliError> {
    let model = run.factor_model(kind)?;
    let history = run.aggregate(kind)?;
    for label in &sc.factors {
        if model.factor_index(label).is_err() {
            return Err(CliError::Config(format!(
                "scenario {:?}: unknown factor {label:?}; the {kind} model has {:?}",
                sc.name,
                model.factor_labels()
            )));
        }
    }
    let weights = run.weights(&model)?;
    let (vector, ellipsoid, propagation, thresholds) = match sc.kind {
        ScenarioKind::Bump => {
            let propagation = sc.propagation()?;
            let scenario = StressScenario::new(sc.name.clone(), sc.factors.clone(), sc.shifts.clone(), propagation)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let vector = match propagation {
                Propagation::AeDecoder => {
                    let rows = run.standardized.values().to_owned();
                    let cfg = run.train_config()?;
                    let fit = run.clustered_ae()?;
                    let prop = stress::ae_stress_propagation(&fit.model, rows.view(), &scenario, &cfg)?;
                    // move from the codes' full-history frame to the model's
                    model.factor_means() + &(&prop.vector - &prop.code_means)
                }
                _ => stress::conditional_stress(&model, &scenario)?,
            };
            (vector, None, propagation, sc.shifts.clone())
        }
        ScenarioKind::Ellipsoid => {
            let es = stress::worst_case_ellipsoid(&model, &sc.factors, sc.radius, weights.view())?;
            let vector = stress::ellipsoid_factor_vector(&model, &es)?;
            let thresholds = es.solution_in_sd.clone();
            (vector, Some(es), Propagation::None, thresholds)
        }
    };
    let impact = stress::portfolio_impact(&model, vector.view(), weights.view())?;
    let mut result = ScenarioResult::assemble(&sc.name, &sc.kind.to_string(), &model, vector.view(), &impact);
    result.ellipsoid = ellipsoid;
    result.tail_frequency = joint_tail(&history, &sc.factors, &thresholds)?;
    Ok((result, propagation))
}

/// Historical share of days on which every shocked factor was at least as
/// extreme as its shock; factors with a zero shock are ignored.
fn joint_tail(
    history: &riskagg::factors::AggregatedFactors<f64>,
    labels: &[String],
    thresholds: &[f64],
) -> Result<Option<TailFrequency>, CliError> {
    let (cols, thr): (Vec<usize>, Vec<f64>) = labels
        .iter()
        .zip(thresholds)
        .filter(|(_, &t)| t != 0.0)
        .filter_map(|(l, &t)| history.index_of(l).map(|i| (i, t)))
        .unzip();
    if cols.is_empty() {
        return Ok(None);
    }
    let series = history.series().select(Axis(1), &cols);
    Ok(Some(stress::joint_tail_frequency(series.view(), &thr)?))
}

/// The whole pipeline into one directory.
pub fn report(run: &mut Run, out: &mut OutDir) -> Result<(), CliError> {
    diagnose(run, out)?;
    cluster(run, out)?;
    aggregate(run, out)?;
    if run.config.config.data.assets.is_some() {
        calibrate(run, out)?;
    }
    stress(run, out)
}
