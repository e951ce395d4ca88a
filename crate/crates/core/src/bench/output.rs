//! CSV tables and the JSON manifest written for each experiment.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ExperimentSpec;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A named CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

impl Table {
    pub fn from_rows<T: Serialize>(name: &str, rows: &[T]) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in rows {
            writer.serialize(row)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::InvalidState(format!("csv buffer: {e}")))?;
        Ok(Table {
            name: name.to_string(),
            csv: String::from_utf8(bytes).map_err(|e| Error::InvalidState(e.to_string()))?,
        })
    }

    pub fn raw(name: &str, csv: String) -> Self {
        Table { name: name.to_string(), csv }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest<'a> {
    pub schema_version: u32,
    pub crate_version: &'static str,
    pub kind: &'static str,
    pub seed: u64,
    pub scale: usize,
    pub spec: &'a ExperimentSpec,
    pub files: Vec<String>,
    pub summary: serde_json::Value,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<kind>_<table>.csv` files and `<kind>_manifest.json` into `dir`.
pub fn write_experiment(
    dir: &Path,
    spec: &ExperimentSpec,
    scale: usize,
    tables: &[Table],
    summary: serde_json::Value,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let kind = spec.kind();
    let mut files = Vec::new();
    for t in tables {
        let name = format!("{kind}_{}", t.file_name());
        write(&dir.join(&name), &t.csv)?;
        files.push(name);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        kind,
        seed: spec.seed(),
        scale,
        spec,
        files,
        summary,
    };
    let path = dir.join(format!("{kind}_manifest.json"));
    write(&path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
