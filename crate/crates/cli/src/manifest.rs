use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// Git's SHA-256 object id for a blob: `sha256("blob <len>\0" ++ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// Records what a command read and wrote.
#[derive(Debug, Default)]
pub struct Manifest {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    /// Writes `<dir>/<command>.manifest.toml` and returns its path.
    pub fn write(&self, command: &str, cfg: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
        let mut doc = toml::Table::new();
        doc.insert("command".into(), command.into());
        doc.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        doc.insert("hash".into(), "sha256 git blob".into());
        let section = |paths: &[PathBuf]| -> Result<toml::Value, CliError> {
            let mut t = toml::Table::new();
            for p in paths {
                t.insert(p.display().to_string(), hash_file(p)?.into());
            }
            Ok(t.into())
        };
        doc.insert("inputs".into(), section(&self.inputs)?);
        doc.insert("outputs".into(), section(&self.outputs)?);
        let config: toml::Table = toml::from_str(&cfg.to_toml()).expect("config reparses");
        doc.insert("config".into(), config.into());
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(format!("{command}.manifest.toml"));
        let text = toml::to_string(&doc).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
