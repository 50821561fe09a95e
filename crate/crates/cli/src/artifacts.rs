//! File output: atomic writes, content hashes and run bookkeeping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let write_err = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(write_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(write_err)?;
    tmp.write_all(bytes).map_err(write_err)?;
    // Temp files are created owner-only; artifacts should read like normal files.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(write_err)?;
    }
    tmp.as_file().sync_all().map_err(write_err)?;
    tmp.persist(path).map_err(|e| write_err(e.error))?;
    Ok(())
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize output: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Files written by one run, so that a failed run can take them back.
#[derive(Debug)]
pub struct ArtifactSet {
    root: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl ArtifactSet {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.records.iter().any(|r| r.path == rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path_of(rel), bytes)?;
        let record = ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        match self.records.iter_mut().find(|r| r.path == rel) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        self.write(rel, &json_bytes(value)?)
    }

    /// Removes every file this set wrote.
    pub fn rollback(&mut self) {
        for r in self.records.drain(..) {
            let path = self.root.join(&r.path);
            if let Err(e) = fs::remove_file(&path) {
                log::warn!("could not remove {}: {e}", path.display());
            }
        }
    }

    pub fn records(&self) -> Vec<ArtifactRecord> {
        let mut out = self.records.clone();
        out.sort_by(|a, b| a.path.cmp(&b.path));
        out
    }
}

/// Serializes rows with a header line.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Config(format!("cannot encode CSV row: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Config(format!("cannot encode CSV: {e}")))
}
