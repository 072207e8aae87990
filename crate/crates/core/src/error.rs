use std::io;

use crate::dataset::DatasetError;
use crate::fabric::{FabricError, RankFailure};
use crate::fptree::TreeError;
use crate::knn::{KnnError, RingError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error("dataset too large for the brute-force oracle: {0}")]
    TooLargeForOracle(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl From<RingError> for Error {
    fn from(e: RingError) -> Self {
        match e {
            RingError::Fabric(f) => Error::Fabric(f),
            RingError::Knn(k) => Error::Knn(k),
        }
    }
}

impl RankFailure for Error {
    fn is_injected_fault(&self) -> bool {
        matches!(self, Error::Fabric(FabricError::Killed))
    }
}

impl Error {
    /// A peer failed or a failure notice arrived; the caller should fall back
    /// to fault handling rather than abort.
    pub fn is_peer_failure(&self) -> bool {
        matches!(
            self,
            Error::Fabric(FabricError::RankDead(_)) | Error::Fabric(FabricError::Interrupted)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
