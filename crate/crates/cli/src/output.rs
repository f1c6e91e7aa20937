//! `results.json` and CSV tables of one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::RunError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Results {
    pub schema_version: u32,
    pub subcommand: String,
    pub fingerprint: String,
    pub conventions: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// Non-finite numbers serialize as `null`.
    pub values: BTreeMap<String, f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub files: Vec<FileEntry>,
}

/// Collects tables and scalars for one run, then writes them.
pub struct RunWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
    pub values: BTreeMap<String, f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
}

impl RunWriter {
    pub fn create(dir: PathBuf) -> Result<Self, RunError> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            files: Vec::new(),
            values: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
            flags: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn value(&mut self, key: impl Into<String>, v: f64) {
        self.values.insert(key.into(), v);
    }

    pub fn flag(&mut self, key: impl Into<String>, v: bool) {
        self.flags.insert(key.into(), v);
    }

    pub fn diagnostics(&mut self, prefix: &str, map: &BTreeMap<String, f64>) {
        for (k, v) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            self.diagnostics.insert(key, *v);
        }
    }

    /// Writes an RFC-4180 table with a header row.
    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| RunError::Io(e.into());
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::Io(e.into_error()))?;
        self.raw(name, &bytes)
    }

    /// Writes a file produced by a core `write_csv` method.
    pub fn dump(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut Vec<u8>) -> hartree_core::Result<()>,
    ) -> Result<(), RunError> {
        let mut bytes = Vec::new();
        crate::Context::context(write(&mut bytes), name)?;
        self.raw(name, &bytes)
    }

    fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn finish(
        self,
        subcommand: &str,
        fingerprint: String,
        config: serde_json::Value,
    ) -> Result<(PathBuf, Results), RunError> {
        let conventions = BTreeMap::from([
            (
                "chi_otimes_prefactor".to_string(),
                "none: chi(f) = inf J + <W - f, rho> + 4 pi alpha |rho|_2^2".to_string(),
            ),
            ("mc_tilt_weight".to_string(), "exp(beta N <f, mean occupation>)".to_string()),
            ("generator".to_string(), "Laplacian (increments of variance 2 dt)".to_string()),
        ]);
        let results = Results {
            schema_version: SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            fingerprint,
            conventions,
            config,
            values: self.values,
            diagnostics: self.diagnostics,
            flags: self.flags,
            files: self.files,
        };
        let mut text = serde_json::to_string_pretty(&results).expect("results serialize");
        text.push('\n');
        fs::write(self.dir.join("results.json"), text)?;
        Ok((self.dir, results))
    }
}
