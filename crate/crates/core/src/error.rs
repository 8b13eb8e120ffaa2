//! Error types for the user-facing surfaces (config, data, checkpoints,
//! training). Internal shape/contract violations panic instead; they are
//! programming errors, not run conditions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invariant(String),
    #[error("config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected IVTW, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("truncated dataset file")]
    Truncated,
    #[error("corrupt episode {index}: {msg}")]
    CorruptEpisode { index: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected IVCK, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch: file is corrupt")]
    Integrity,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("shape mismatch for tensors: {0:?}")]
    ShapeMismatch(Vec<String>),
    #[error("embedded config failed to parse: {0}")]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("NaN gradient in parameter `{param}`; step aborted")]
    NanGradient { param: String },
    #[error("non-finite loss {loss} at step {step}; run aborted")]
    NanLoss { step: u64, loss: f32 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
