//! Output directory layout, atomic writes, CSV encoding and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xva_core::autodiff::Container;
use xva_core::stochastic::derive_seed;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Model file of each layer, in training order.
pub const MODEL_FILES: [&str; 4] = ["clean.model", "margin.model", "adjustments.model", "funding.model"];

pub fn curve_file(layer: usize) -> String {
    format!("curves_layer{layer}.csv")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    tmp.write_all(bytes).map_err(CliError::io(path))?;
    tmp.as_file().sync_all().map_err(CliError::io(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Shortest representation that parses back to the same float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// In-memory CSV table written in one piece.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(header.iter().map(|s| s.as_ref()))
            .expect("in-memory write");
        Self { writer }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        self.writer
            .write_record(fields.iter().map(|s| s.as_ref()))
            .expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub portfolio_sha256: String,
    pub seed: u64,
    /// Derived seed of every pipeline stage.
    pub seeds: BTreeMap<String, u64>,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

pub const STAGES: [&str; 7] = [
    "simulate",
    "layer1",
    "layer2",
    "layer3",
    "layer4",
    "report",
    "reference",
];

impl Manifest {
    pub fn new(config: &[u8], portfolio: &[u8], seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config),
            portfolio_sha256: sha256_hex(portfolio),
            seed,
            seeds: STAGES.iter().map(|s| (s.to_string(), derive_seed(seed, s))).collect(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn same_run(&self, other: &Manifest) -> bool {
        self.config_sha256 == other.config_sha256
            && self.portfolio_sha256 == other.portfolio_sha256
            && self.seed == other.seed
    }
}

/// Output directory with its manifest.
pub struct Store {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Store {
    /// Opens `dir` for a run. Artifacts recorded under a different
    /// configuration or seed are dropped from the manifest.
    pub fn open(dir: &Path, fresh: Manifest) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(MANIFEST);
        let manifest = match std::fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice::<Manifest>(&bytes) {
                Ok(old) if old.same_run(&fresh) => Manifest {
                    artifacts: old.artifacts,
                    ..fresh
                },
                _ => fresh,
            },
            Err(_) => fresh,
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Reads an artifact produced earlier in this run.
    pub fn read(&self, name: &str) -> Result<Vec<u8>, CliError> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|_| CliError::Missing(path.clone()))?;
        match self.manifest.artifacts.get(name) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(CliError::Config(format!(
                "{} was modified after it was recorded",
                path.display()
            ))),
            None => Err(CliError::Missing(path)),
        }
    }

    pub fn read_container(&self, name: &str) -> Result<Container, CliError> {
        let bytes = self.read(name)?;
        Container::from_bytes(&bytes).map_err(|e| CliError::Config(format!("{name}: {e}")))
    }

    pub fn require(&self, names: &[&str]) -> Result<(), CliError> {
        for name in names {
            self.read(name)?;
        }
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)?;
        self.manifest.artifacts.insert(name.to_string(), sha256_hex(bytes));
        self.save_manifest()
    }

    pub fn forget(&mut self, names: &[&str]) -> Result<(), CliError> {
        for name in names {
            self.manifest.artifacts.remove(*name);
        }
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&self.path(MANIFEST), &bytes)
    }
}
