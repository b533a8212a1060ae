//! Desk-scale simulator for federated prompt tuning over a frozen two-modality
//! backbone, where clients differ in which modality their samples are missing.
//!
//! The crate is organised around a small reverse-mode autodiff tape
//! ([`tape`]) driving a frozen transformer-style encoder ([`backbone`]).
//! Trainable state is limited to prompt pools ([`pool`]) and a classification
//! head; the federated loop ([`run`]) alternates local updates ([`client`])
//! with server-side aggregation, which for retrieval-based methods means
//! alignment of client prompts via constrained clustering and a min-cost
//! assignment ([`server`], [`hungarian`]).
//!
//! Start with the `quickstart` example, or [`run::execute`] for the
//! programmatic entry point.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod hungarian;
pub mod metrics;
pub mod pool;
pub mod rng;
pub mod run;
pub mod selftest;
pub mod server;
pub mod tape;
pub mod tensor;

/// Errors surfaced by fallible public operations.
///
/// Dimension or contract misuse deep inside a tape program panics instead:
/// those are programming errors, not recoverable conditions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A non-finite value (NaN or infinity) entered a numeric boundary.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid run configuration, rejected before round 1.
    #[error("invalid config: {0}")]
    Config(String),
    /// Assignment problem cannot be satisfied (more rows than columns).
    #[error("infeasible assignment: {0}")]
    Infeasible(String),
    /// Checkpoint cannot be loaded or does not match the requested run.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
