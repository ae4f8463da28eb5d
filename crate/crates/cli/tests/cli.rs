mod common;

use std::fs;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskagg::synthetic;

fn path_str(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn global_factor_panel_has_one_significant_component_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bp = synthetic::block_panel(1000, &[4, 4, 4], 0.5, 0.5, &mut rng);
    write_csv_panel(&dir.path().join("factors.csv"), &synthetic::to_panel(bp.values, "F"));
    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"factors.csv\"\n[window]\nwidth = 250\nstride = 50\n",
    );
    let out = riskagg(&["diagnose", "--config", path_str(&cfg)]);
    assert_success(&out);
    let rows = data_rows(&dir.path().join("out/diagnostics.csv"));
    // 16 windows of 6 components
    assert_eq!(rows.len(), 16 * 6);
    assert!(rows.iter().all(|r| r[4] == "1"));
    assert!(rows.iter().all(|r| (r[1] == "1") == (r[5] == "1")));
    assert!(!dir.path().join("out/verdicts.csv").exists());
    let heat = header(&dir.path().join("out/heatmap.csv"));
    assert_eq!(heat, ["date", "label", "PC1", "PC2", "PC3", "PC4", "PC5", "PC6"]);
}

#[test]
fn verdicts_have_one_row_per_category_per_component_per_window() {
    let dir = tempfile::tempdir().unwrap();
    write_universe(dir.path(), 600, &[5, 5, 5, 4, 4, 4], 0.7, 0.2, 3, 2);
    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"factors.csv\"\ncategories = \"categories.csv\"\n[window]\nwidth = 250\nstride = \"month-end\"\n",
    );
    let out = riskagg(&["diagnose", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("d"))]);
    assert_success(&out);
    let diag = data_rows(&dir.path().join("d/diagnostics.csv"));
    let windows: std::collections::BTreeSet<_> = diag.iter().map(|r| r[0].clone()).collect();
    let verdicts = data_rows(&dir.path().join("d/verdicts.csv"));
    assert_eq!(verdicts.len(), windows.len() * 6 * 6);
    let doc = json(&dir.path().join("d/verdicts.json"));
    assert_eq!(doc["windows"].as_array().unwrap().len(), windows.len());
    assert_eq!(doc["windows"][0]["components"][0]["verdicts"].as_object().unwrap().len(), 6);
}

#[test]
fn window_wider_than_panel_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_universe(dir.path(), 100, &[3, 3], 0.7, 0.1, 2, 3);
    let cfg = write_config(dir.path(), "[data]\nfactors = \"factors.csv\"\n[window]\nwidth = 250\n");
    let out = riskagg(&["diagnose", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window width 250"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = riskagg(&["cluster", "--config", path_str(&dir.path().join("none.toml"))]);
    assert_eq!(missing.status.code(), Some(2));

    write_universe(dir.path(), 300, &[3, 3], 0.7, 0.1, 2, 4);
    let cfg = write_config(dir.path(), "[data]\nfactors = \"nope.csv\"\n");
    assert_eq!(riskagg(&["cluster", "--config", path_str(&cfg)]).status.code(), Some(2));

    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"factors.csv\"\nassets = \"assets.csv\"\ncategories = \"categories.csv\"\n\
         [[scenario]]\nname = \"bad\"\nfactors = [\"nosuch\"]\nshifts = [-2.0]\n",
    );
    let out = riskagg(&["stress", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cluster_writes_dendrogram_and_assignment() {
    let dir = tempfile::tempdir().unwrap();
    write_universe(dir.path(), 800, &[4, 5, 3], 0.8, 0.05, 2, 5);
    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"factors.csv\"\n[model]\nclusters = 3\n",
    );
    assert_success(&riskagg(&["cluster", "--config", path_str(&cfg)]));
    let merges = data_rows(&dir.path().join("out/dendrogram.csv"));
    assert_eq!(merges.len(), 11);
    let assignment = data_rows(&dir.path().join("out/assignment.csv"));
    let ids: Vec<&str> = assignment.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(ids, ["1", "1", "1", "1", "2", "2", "2", "2", "2", "3", "3", "3"]);
}

fn aggregate_config(dir: &std::path::Path) -> std::path::PathBuf {
    write_universe(dir, 600, &[4, 5, 3, 6, 4, 5], 0.8, 0.05, 3, 6);
    write_config(
        dir,
        &format!(
            "seed = 11\n[data]\nfactors = \"factors.csv\"\ncategories = \"categories.csv\"\n\
             [model]\nkind = \"clustered-pca\"\n{QUICK_TRAIN}"
        ),
    )
}

#[test]
fn aggregate_writes_factors_and_comparable_mse_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = aggregate_config(dir.path());
    assert_success(&riskagg(&["aggregate", "--config", path_str(&cfg)]));
    let factors = header(&dir.path().join("out/factors.csv"));
    assert_eq!(factors, ["date", "cat1", "cat2", "cat3", "cat4", "cat5", "cat6"]);
    let table = data_rows(&dir.path().join("out/mse_table.csv"));
    let models: Vec<&str> = table.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["pca", "clustered-pca", "clustered-ae"]);
    for row in &table {
        let mse: f64 = row[4].parse().unwrap();
        assert!(mse > 0.0 && mse < 1.0, "{row:?}");
    }
    let model = json(&dir.path().join("out/clustered_ae.json"));
    assert_eq!(model["meta"]["seed"], 11);
    assert_eq!(model["encoders"].as_array().unwrap().len(), 6);
}

#[test]
fn aggregate_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = aggregate_config(dir.path());
    let run = |out: &str, seed: &str| {
        let o = dir.path().join(out);
        assert_success(&riskagg(&["aggregate", "--config", path_str(&cfg), "--out", path_str(&o), "--seed", seed]));
        fs::read(o.join("mse_table.csv")).unwrap()
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let stamp = String::from_utf8(a).unwrap();
    assert!(stamp.lines().next().unwrap().ends_with("seed=3"));
}

fn stress_dir(scenarios: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_universe(dir.path(), 1200, &[4, 4, 4], 0.8, 0.3, 5, 7);
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nfactors = \"factors.csv\"\nassets = \"assets.csv\"\ncategories = \"categories.csv\"\n{QUICK_TRAIN}\n{scenarios}"
        ),
    );
    (dir, cfg)
}

#[test]
fn empty_scenario_list_gives_empty_summary() {
    let (dir, cfg) = stress_dir("");
    assert_success(&riskagg(&["stress", "--config", path_str(&cfg)]));
    assert!(data_rows(&dir.path().join("out/stress_summary.csv")).is_empty());
}

#[test]
fn ellipsoid_scenario_is_binding_with_equal_weights() {
    let (dir, cfg) = stress_dir(
        "[[scenario]]\nname = \"global\"\nkind = \"ellipsoid\"\nfactors = [\"cat1\", \"cat2\"]\nradius = 2.0\n",
    );
    assert_success(&riskagg(&["stress", "--config", path_str(&cfg)]));
    let doc = json(&dir.path().join("out/scenario_global.json"));
    assert_eq!(doc["ellipsoid"]["binding"], true);
    let m: f64 = doc["ellipsoid"]["mahalanobis"].as_f64().unwrap();
    assert!((m - 2.0).abs() <= 1e-6);
    let per_asset: Vec<f64> = doc["per_asset_impact"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let mean = per_asset.iter().sum::<f64>() / per_asset.len() as f64;
    let portfolio = doc["portfolio_impact"].as_f64().unwrap();
    assert!((portfolio - mean).abs() <= 1e-15 * per_asset.len() as f64);

    let sorted = data_rows(&dir.path().join("out/scenario_global.csv"));
    let impacts: Vec<f64> = sorted.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(impacts.windows(2).all(|w| w[0] <= w[1]));
    let summary = data_rows(&dir.path().join("out/stress_summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][5], "true");
}

#[test]
fn bump_scenarios_across_models() {
    let (dir, cfg) = stress_dir(
        "[[scenario]]\nname = \"gauss\"\nfactors = [\"cat1\"]\nshifts = [-2.0]\n\
         [[scenario]]\nname = \"pc\"\nmodel = \"pca\"\nfactors = [\"PC1\"]\nshifts = [-2.0]\n\
         [[scenario]]\nname = \"decoder\"\nmodel = \"clustered-ae\"\npropagation = \"ae-decoder\"\nfactors = [\"cat1\"]\nshifts = [-2.0]\n",
    );
    let out = riskagg(&["stress", "--config", path_str(&cfg)]);
    assert_success(&out);
    let summary = data_rows(&dir.path().join("out/stress_summary.csv"));
    let models: Vec<&str> = summary.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(models, ["clustered-pca", "pca", "clustered-ae"]);
    for row in &summary {
        let impact: f64 = row[4].parse().unwrap();
        assert!(impact < 0.0, "{row:?}");
        let tail: f64 = row[6].parse().unwrap();
        assert!(tail > 0.0 && tail < 0.1, "{row:?}");
    }
    let doc = json(&dir.path().join("out/scenario_gauss.json"));
    let in_sd = doc["full_factor_vector_in_sd"].as_array().unwrap();
    assert!((in_sd[0].as_f64().unwrap() + 2.0).abs() < 0.2);
    // correlated categories move with the bumped one
    assert!(in_sd[1].as_f64().unwrap() < -0.1);
    assert_eq!(doc["propagation"], "conditional-gaussian");
}

#[test]
fn every_output_is_stamped() {
    let (dir, cfg) = stress_dir("[[scenario]]\nname = \"s\"\nfactors = [\"cat2\"]\nshifts = [1.5]\n");
    let cfg_text = fs::read(&cfg).unwrap();
    use sha2::Digest;
    let digest: String = sha2::Sha256::digest(&cfg_text).iter().map(|b| format!("{b:02x}")).collect();
    let out = dir.path().join("all");
    assert_success(&riskagg(&["report", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", "9"]));
    let mut n = 0;
    for entry in fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                assert_eq!(text.lines().next().unwrap(), format!("# config_sha256={digest} seed=9"));
            }
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["meta"]["config_sha256"], digest.as_str());
                assert_eq!(v["meta"]["seed"], 9);
            }
            _ => panic!("unexpected output {}", path.display()),
        }
        n += 1;
    }
    // diagnostics, heatmap, verdicts (2), dendrogram, assignment, factors,
    // mse table, AE model + log, factor model, scenario json + csv, summary
    assert_eq!(n, 14);
}

#[test]
fn prices_are_converted_to_returns() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = synthetic::gaussian_matrix(400, 4, &mut rng) * 0.01;
    let mut prices = r.clone();
    for j in 0..4 {
        let mut level = 100.0;
        for i in 0..400 {
            level *= f64::exp(r[[i, j]]);
            prices[[i, j]] = level;
        }
    }
    write_csv_panel(&dir.path().join("prices.csv"), &synthetic::to_panel(prices, "P"));
    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"prices.csv\"\ninput = \"prices\"\n[model]\nkind = \"pca\"\ncomponents = 2\n",
    );
    assert_success(&riskagg(&["aggregate", "--config", path_str(&cfg)]));
    assert_eq!(data_rows(&dir.path().join("out/factors.csv")).len(), 399);
}

#[test]
fn partial_train_section_falls_back_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_universe(dir.path(), 400, &[3, 3], 0.7, 0.1, 2, 12);
    let cfg = write_config(
        dir.path(),
        "[data]\nfactors = \"factors.csv\"\ncategories = \"categories.csv\"\n\
         [train]\nmax_epochs = 5\nencoder_widths = [3]\ndecoder_widths = [6]\n",
    );
    let out = riskagg(&["aggregate", "--config", path_str(&cfg)]);
    assert_success(&out);
    let rows = data_rows(&dir.path().join("out/mse_table.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[2][1].contains("encoder 3 / swish"), "{:?}", rows[2]);
}
