#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskagg::panel::{write_panel, ReturnPanel};
use riskagg::synthetic::{self, SyntheticUniverse};

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_riskagg")
}

pub fn riskagg(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("spawn riskagg")
}

pub fn write_csv_panel(path: &Path, panel: &ReturnPanel<f64>) {
    write_panel(panel, fs::File::create(path).unwrap()).unwrap();
}

pub fn write_categories(path: &Path, cats: &BTreeMap<String, String>) {
    let body: String = cats.iter().map(|(l, c)| format!("{l},{c}\n")).collect();
    fs::write(path, format!("label,category\n{body}")).unwrap();
}

/// Writes `factors.csv`, `categories.csv` and `assets.csv` for a synthetic
/// universe into `dir`.
pub fn write_universe(
    dir: &Path,
    n: usize,
    sizes: &[usize],
    rho_within: f64,
    rho_between: f64,
    assets: usize,
    seed: u64,
) -> SyntheticUniverse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = synthetic::universe(n, sizes, rho_within, rho_between, assets, 0.5, &mut rng);
    write_csv_panel(&dir.join("factors.csv"), &u.factors);
    write_csv_panel(&dir.join("assets.csv"), &u.assets);
    write_categories(&dir.join("categories.csv"), &u.categories);
    u
}

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

/// A fast training section for tests.
pub const QUICK_TRAIN: &str = "
[train]
max_epochs = 30
batch_size = 64
step_size = 0.003
l2 = 0.0
validation_fraction = 0.2
patience = 10
refit_on_full = true
encoder_widths = [4]
encoder_activation = \"swish\"
decoder_widths = [12]
decoder_activation = \"swish\"
";

/// Data rows of a stamped CSV (stamp and header removed).
pub fn data_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="), "{}", path.display());
    lines.next().expect("header");
    let body = lines.collect::<Vec<_>>().join("\n");
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(body.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

pub fn header(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().nth(1).unwrap().split(',').map(str::to_string).collect()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}
