//! Error type shared across the toolkit.
//!
//! Contract violations (shape mismatches on in-memory tensors, out-of-range
//! ids, bad call arguments) panic with a message naming the offending values;
//! everything that depends on the outside world (files, checkpoints, training
//! runs) reports through [`Error`].

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("bad checkpoint magic: expected \"QGCK\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    BadVersion { found: u16, expected: u16 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("tensor {name} has shape {found_rows}x{found_cols}, config requires {want_rows}x{want_cols}")]
    ShapeAudit {
        name: String,
        want_rows: usize,
        want_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },

    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },

    #[error("reports are not comparable:\n{diff}")]
    ReportMismatch { diff: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
