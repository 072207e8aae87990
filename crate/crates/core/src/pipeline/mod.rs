//! Per-rank programs: fault-tolerant FP-Growth and KNN.

pub mod fp;
pub mod knn;

use std::time::Duration;

use crate::checkpoint::CkptStats;
use crate::recovery::RecoveryStats;

/// What one rank reports back to the harness.
#[derive(Clone, Debug, Default)]
pub struct RankReport {
    /// Canonical result text; every surviving rank ends up with a copy.
    pub output: Option<String>,
    pub ckpt: CkptStats,
    pub recovery: RecoveryStats,
    pub total: Duration,
}
