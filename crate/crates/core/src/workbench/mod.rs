//! Datasets, checkpoints, configuration, collection storage, result files and
//! the `semlab` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod emit;
pub mod store;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::evaluation::EvalError;
use crate::nets::NetError;
use crate::threat::ThreatError;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{path}: truncated ({len} bytes)")]
    Truncated { path: PathBuf, len: usize },
    #[error("{path}: malformed: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no collection at {0} (run train-collection first)")]
    MissingCollection(PathBuf),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Eval(Box<EvalError>),
}

impl From<EvalError> for WorkbenchError {
    fn from(e: EvalError) -> Self {
        WorkbenchError::Eval(Box::new(e))
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkbenchError + '_ {
    move |source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkbenchError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| WorkbenchError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
