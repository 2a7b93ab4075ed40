//! Atomic file output, content digests and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use riim::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA: &str = "riim-report/v1";
pub const MANIFEST_SCHEMA: &str = "riim-manifest/v1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let data = fs::read(path)?;
    let hash = Sha256::digest(&data);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        bytes: data.len() as u64,
    })
}

/// Writes `data` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(data)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub options: Map<String, Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub tool_version: &'static str,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, options: Map<String, Value>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            argv: std::env::args().collect(),
            options,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: VERSION,
            seed,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<FileDigest> {
        let d = digest(path)?;
        self.inputs.push(d.clone());
        Ok(d)
    }

    /// `<out>.manifest.json`.
    pub fn path_for(out: &Path) -> PathBuf {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    pub fn write_beside(&mut self, out: &Path) -> Result<()> {
        let path = Self::path_for(out);
        self.outputs.push(path.display().to_string());
        write_atomic(&path, to_json(self)?.as_bytes())
    }
}
