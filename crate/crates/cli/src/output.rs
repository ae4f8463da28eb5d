//! Stamped output files: every CSV starts with a `# config_sha256=… seed=…`
//! comment line and every JSON document carries a `meta` object.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    meta: &'a Stamp,
    #[serde(flatten)]
    body: &'a T,
}

/// Output directory plus the stamp applied to every file written into it.
#[derive(Debug)]
pub struct OutDir {
    dir: PathBuf,
    stamp: Stamp,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: PathBuf, stamp: Stamp) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::output(&dir, e))?;
        Ok(Self {
            dir,
            stamp,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes a CSV whose body is produced by `fill`, after the stamp line.
    pub fn csv<E, F>(&mut self, name: &str, fill: F) -> Result<(), CliError>
    where
        E: std::fmt::Display,
        F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    {
        let path = self.dir.join(name);
        let mut w = open(&path)?;
        writeln!(
            w,
            "# config_sha256={} seed={}",
            self.stamp.config_sha256, self.stamp.seed
        )
        .map_err(|e| CliError::output(&path, e))?;
        fill(&mut w).map_err(|e| CliError::output(&path, e))?;
        w.flush().map_err(|e| CliError::output(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Writes `rows` under `header` with the csv crate.
    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        self.csv(name, |w| -> Result<(), csv::Error> {
            let mut wtr = csv::Writer::from_writer(w);
            wtr.write_record(header)?;
            for row in rows {
                wtr.write_record(row)?;
            }
            wtr.flush()?;
            Ok(())
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = open(&path)?;
        let doc = Stamped {
            meta: &self.stamp,
            body,
        };
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::output(&path, e))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::output(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::output(path, e))
}
