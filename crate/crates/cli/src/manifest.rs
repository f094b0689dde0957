//! `manifest.json` and the output directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SeedSource;
use crate::{CliError, CliResult};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub core_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub config_sha256: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub seed_source: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> CliResult<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        source: edgeflow::Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// A sidecar JSON and the blob it names.
pub fn with_blob(sidecar: &Path) -> Vec<PathBuf> {
    let mut out = vec![sidecar.to_path_buf()];
    let blob = std::fs::read_to_string(sidecar)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("blob").and_then(|b| b.as_str()).map(str::to_string));
    if let Some(b) = blob {
        out.push(sidecar.parent().unwrap_or_else(|| Path::new(".")).join(b));
    }
    out
}

/// Every regular file directly inside `dir`, sorted.
pub fn dir_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

pub struct ManifestBuilder<'a> {
    pub command: &'a str,
    pub argv: &'a [std::ffi::OsString],
    pub config: Option<(&'a Path, &'a [u8])>,
    pub inputs: Vec<PathBuf>,
    pub seed: u64,
    pub seed_source: SeedSource,
}

impl ManifestBuilder<'_> {
    pub fn build(&self) -> CliResult<Manifest> {
        let inputs = self.inputs.iter().map(|p| digest_file(p)).collect::<CliResult<_>>()?;
        let source = serde_json::to_value(self.seed_source).expect("enum serializes");
        Ok(Manifest {
            version: MANIFEST_VERSION,
            tool: "edgeflow".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            core_version: edgeflow::VERSION.into(),
            command: self.command.into(),
            args: self.argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
            config: self.config.map(|(p, _)| p.display().to_string()),
            config_sha256: self.config.map(|(_, b)| sha256_hex(b)),
            inputs,
            seed: self.seed,
            seed_source: source.as_str().unwrap_or_default().to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }
}

/// Output directory of one run.
pub struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Outputs> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Write {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Write {
            path: path.clone(),
            source: e,
        })?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write(name, text + "\n")
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> CliResult<PathBuf> {
        self.write_json("manifest.json", manifest)
    }
}
