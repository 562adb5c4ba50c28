use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid release stamp {0:?} (expected YYYYMMDD-HHMMSSZ)")]
    InvalidStamp(String),
    #[error("invalid commit id {0:?}: expected hexadecimal")]
    InvalidCommitId(String),
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("invalid image reference: {0}")]
    InvalidImage(String),
    #[error("builder image is not version-pinned: {0}")]
    UnpinnedImage(String),
}

/// Umbrella error for callers that drive several subsystems.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Exec(#[from] crate::executor::ExecError),
    #[error(transparent)]
    Build(#[from] crate::build::BuildError),
    #[error(transparent)]
    Package(#[from] crate::packaging::PackageError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Deploy(#[from] crate::deploy::DeployError),
    #[error(transparent)]
    Checkout(#[from] crate::orchestrator::CheckoutError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
