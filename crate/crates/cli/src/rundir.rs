//! Run directory `<out>/<name>/{manifest.json, checkpoints/, csv/}` and its manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use gfm_core::csv;
use gfm_core::nets::{CorrectorNet, VelocityNet};
use gfm_core::persistence::{self, Precision};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Config};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINTS: &str = "checkpoints";
pub const CSV: &str = "csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub config: Config,
    pub commands: BTreeSet<String>,
    /// Relative path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("gfm-cli".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
        ("gfm-core".to_owned(), gfm_core::VERSION.to_owned()),
        ("dataset-format".to_owned(), persistence::DATASET_VERSION.to_string()),
        ("checkpoint-format".to_owned(), persistence::CHECKPOINT_VERSION.to_string()),
    ])
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens `<out>/<name>`, creating it; an existing manifest must carry the same config digest.
    pub fn open(out: &Path, cfg: &Config) -> Result<Self, CliError> {
        let root = out.join(&cfg.name);
        fs::create_dir_all(root.join(CHECKPOINTS))?;
        fs::create_dir_all(root.join(CSV))?;
        let digest = cfg.digest();
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| CliError::Config(format!("unreadable manifest {}: {e}", path.display())))?;
            if m.config_sha256 != digest {
                return Err(CliError::Config(format!(
                    "{} was created by a different config (sha256 {})",
                    root.display(),
                    m.config_sha256
                )));
            }
            m
        } else {
            Manifest {
                name: cfg.name.clone(),
                seed: cfg.seed,
                config_sha256: digest,
                versions: versions(),
                config: cfg.clone(),
                commands: BTreeSet::new(),
                outputs: BTreeMap::new(),
            }
        };
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.path(rel))?;
        self.manifest.outputs.insert(rel.to_owned(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        let rel = format!("{CSV}/{name}");
        csv::write_rows(self.path(&rel).as_path(), header, rows)?;
        self.record(&rel)
    }

    pub fn write_json(&mut self, rel: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(rel), text)?;
        self.record(rel)
    }

    pub fn save_corrector(&mut self, name: &str, net: &CorrectorNet) -> Result<(), CliError> {
        let rel = format!("{CHECKPOINTS}/{name}");
        net.save(&self.path(&rel), Precision::F64)?;
        self.record(&rel)
    }

    pub fn save_velocity(&mut self, name: &str, net: &VelocityNet) -> Result<(), CliError> {
        let rel = format!("{CHECKPOINTS}/{name}");
        net.save(&self.path(&rel), Precision::F64)?;
        self.record(&rel)
    }

    /// Loads a checkpoint another command produced; `hint` names that command.
    pub fn load_corrector(&self, name: &str, hint: &str) -> Result<CorrectorNet, CliError> {
        let path = self.path(&format!("{CHECKPOINTS}/{name}"));
        if !path.exists() {
            return Err(CliError::Config(format!("{} is missing; run `{hint}` first", path.display())));
        }
        Ok(CorrectorNet::load(&path)?)
    }

    pub fn load_velocity(&self, name: &str, hint: &str) -> Result<VelocityNet, CliError> {
        let path = self.path(&format!("{CHECKPOINTS}/{name}"));
        if !path.exists() {
            return Err(CliError::Config(format!("{} is missing; run `{hint}` first", path.display())));
        }
        Ok(VelocityNet::load(&path)?)
    }

    pub fn read_csv(&self, name: &str, hint: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
        let path = self.path(&format!("{CSV}/{name}"));
        if !path.exists() {
            return Err(CliError::Config(format!("{} is missing; run `{hint}` first", path.display())));
        }
        Ok(csv::read_rows(&path)?)
    }

    pub fn has(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Marks `command` complete and rewrites the manifest.
    pub fn finish(&mut self, command: &str) -> Result<(), CliError> {
        self.manifest.commands.insert(command.to_owned());
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(())
    }
}
