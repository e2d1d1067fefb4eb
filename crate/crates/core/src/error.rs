use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("lexicon collision: {0:?} appears more than once")]
    LexiconCollision(String),
    #[error("frequency matching infeasible: residual imbalance {residual} in dimension {dim}")]
    FrequencyMatching { dim: String, residual: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("gradient check failed: max relative error {max_rel_err:.3e} at {location}")]
    GradientCheck { max_rel_err: f64, location: String },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("invalid battery: {0}")]
    Battery(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("stage {stage} failed for run {run}: {detail}")]
    Stage {
        run: String,
        stage: String,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// `std::fs` helpers that attach the path to errors.
pub(crate) mod fsx {
    use std::path::Path;

    use super::{Error, Result};

    pub fn read_to_string(path: &Path) -> Result<String> {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<u8>> {
        std::fs::read(path).map_err(|e| Error::io(path, e))
    }

    pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(parent) = path.parent() {
            create_dir_all(parent)?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Write to a sibling temp file, then rename over the target.
    pub fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        let tmp = path.with_extension("tmp");
        write(&tmp, bytes)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn create_dir_all(path: &Path) -> Result<()> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
    }

    pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        write(path, s)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
        let s = read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}
