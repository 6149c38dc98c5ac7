//! Error types shared across the pipeline.

use thiserror::Error;

/// Coarse failure class, used by callers (notably the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// File system / parsing problems.
    Io,
    /// Invalid configuration or precondition violations.
    Config,
    /// Numerical failures (divergence, degenerate statistics).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("input file contains no interactions")]
    EmptyFile,

    #[error("k-core filtering removed every interaction")]
    EmptyResult,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot encode an empty sequence")]
    EmptySequence,

    #[error("training loss became non-finite at step {step}")]
    DivergedLoss { step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("population of activations is empty")]
    EmptyPopulation,

    #[error("need at least {needed} samples per neuron, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("history is empty")]
    EmptyHistory,

    #[error("no neurons qualify for the requested selection")]
    NoQualifyingNeurons,

    #[error("the {side} item set is empty")]
    EmptyItemSet { side: &'static str },

    #[error("all effect sizes are zero; no steering plan can be normalized")]
    AllZeroEffectSizes,

    #[error("long list has {got} items, need at least {needed}")]
    ListTooShort { needed: usize, got: usize },

    #[error("total exposure is zero")]
    ZeroExposure,

    #[error("unsupported {kind} file version {got} (expected {expected})")]
    BadFileVersion {
        kind: &'static str,
        got: u32,
        expected: u32,
    },

    #[error("corrupt {kind} file: {reason}")]
    CorruptFile { kind: &'static str, reason: String },
}

impl Error {
    /// Class of this error, for exit-code mapping.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io(_) | MalformedRecord { .. } | EmptyFile | BadFileVersion { .. }
            | CorruptFile { .. } => ErrorClass::Io,
            InvalidConfig(_) | EmptySequence | DimensionMismatch { .. } | EmptyPopulation
            | InsufficientSamples { .. } | EmptyHistory | NoQualifyingNeurons
            | EmptyItemSet { .. } | ListTooShort { .. } | EmptyResult => ErrorClass::Config,
            DivergedLoss { .. } | AllZeroEffectSizes | ZeroExposure => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
