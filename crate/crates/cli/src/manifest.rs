use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{hex, PipelineConfig};
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance of one subcommand run. Holds no timestamps or absolute paths so
/// reruns produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub root_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub params: BTreeMap<String, Value>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(skip)]
    root: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

impl Manifest {
    pub fn new(command: &str, config: &PipelineConfig, root: &Path) -> Self {
        let versions = BTreeMap::from([("fairexpo", fairexpo::VERSION), ("fairexpo-cli", env!("CARGO_PKG_VERSION"))]);
        Self {
            command: command.into(),
            versions,
            root_seed: config.seed,
            seeds: BTreeMap::new(),
            config_sha256: config.hash(),
            config: config.clone(),
            params: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            root: root.to_path_buf(),
        }
    }

    pub fn seed(&mut self, component: &str, value: u64) {
        self.seeds.insert(component.into(), value);
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        self.params.insert(key.into(), serde_json::to_value(value).expect("param serializes"));
    }

    fn entry(&self, path: &Path) -> Result<FileEntry, CliError> {
        let (sha256, bytes) = sha256_file(path)?;
        let shown = path.strip_prefix(&self.root).unwrap_or(path);
        Ok(FileEntry { path: shown.to_string_lossy().replace('\\', "/"), sha256, bytes })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let e = self.entry(path)?;
        self.inputs.push(e);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let e = self.entry(path).map_err(|e| anyhow::anyhow!("hashing output: {e}"))?;
        self.outputs.push(e);
        Ok(())
    }

    /// Writes `<dir>/<name>.manifest.json`.
    pub fn write(&self, dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{name}.manifest.json"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
