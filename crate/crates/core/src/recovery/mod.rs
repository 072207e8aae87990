//! Recovery planning and workload redistribution. The drivers in
//! [`crate::pipeline`] execute the plans.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::checkpoint::MetadataRecord;
use crate::dataset::split_even;
use crate::fabric::RankId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpCase {
    /// No replica: the whole failed shard is recomputed from disk.
    NoCheckpoint,
    /// Tree replica only: transactions after the checkpoint come from disk.
    TreeOnly,
    /// Tree and the remaining transactions are both in memory.
    TreeAndTrans,
}

impl FpCase {
    pub fn name(self) -> &'static str {
        match self {
            FpCase::NoCheckpoint => "no-checkpoint",
            FpCase::TreeOnly => "tree-only",
            FpCase::TreeAndTrans => "tree+trans",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [FpCase::NoCheckpoint, FpCase::TreeOnly, FpCase::TreeAndTrans]
            .get(c as usize)
            .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransSource {
    Disk,
    Memory,
}

/// How a failed rank's test samples are recovered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KnnRecovery {
    /// The recovery rank takes over every recovered sample.
    #[default]
    Opr,
    /// Recovered samples are spread evenly over all survivors.
    Ppr,
}

impl KnnRecovery {
    pub fn name(self) -> &'static str {
        match self {
            KnnRecovery::Opr => "opr",
            KnnRecovery::Ppr => "ppr",
        }
    }
}

impl FromStr for KnnRecovery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "opr" => Ok(KnnRecovery::Opr),
            "ppr" => Ok(KnnRecovery::Ppr),
            other => Err(format!("unknown recovery mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub failed: RankId,
    pub recovery_rank: RankId,
    pub case: FpCase,
    pub trans_source: TransSource,
    /// Shard-relative index of the first transaction to re-execute.
    pub replay_from: u64,
}

pub const PLAN_BYTES: usize = 26;

impl RecoveryPlan {
    pub fn encode(&self) -> [u8; PLAN_BYTES] {
        let mut out = [0u8; PLAN_BYTES];
        out[0..8].copy_from_slice(&(self.failed.index() as u64).to_le_bytes());
        out[8..16].copy_from_slice(&(self.recovery_rank.index() as u64).to_le_bytes());
        out[16] = self.case.code();
        out[17] = u8::from(self.trans_source == TransSource::Memory);
        out[18..26].copy_from_slice(&self.replay_from.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        if buf.len() != PLAN_BYTES {
            return None;
        }
        let word = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        Some(Self {
            failed: RankId(word(0) as usize),
            recovery_rank: RankId(word(8) as usize),
            case: FpCase::from_code(buf[16])?,
            trans_source: if buf[17] == 1 {
                TransSource::Memory
            } else {
                TransSource::Disk
            },
            replay_from: word(18),
        })
    }
}

/// Choose the recovery case from the replica the recovery rank holds.
pub fn plan_fp_recovery(failed: RankId, recovery_rank: RankId, record: Option<&MetadataRecord>) -> RecoveryPlan {
    let (case, trans_source, replay_from) = match record {
        Some(r) if r.cfs > 0 && r.nct > 0 => (FpCase::TreeAndTrans, TransSource::Memory, r.ct + 1),
        Some(r) if r.cfs > 0 => (FpCase::TreeOnly, TransSource::Disk, r.ct + 1),
        _ => (FpCase::NoCheckpoint, TransSource::Disk, 0),
    };
    RecoveryPlan {
        failed,
        recovery_rank,
        case,
        trans_source,
        replay_from,
    }
}

/// Survivor → items assigned to it.
pub type RedistributionMap<T> = BTreeMap<RankId, Vec<T>>;

/// Round-robin in survivor order.
pub fn redistribute<T>(items: Vec<T>, survivors: &[RankId]) -> RedistributionMap<T> {
    assert!(!survivors.is_empty(), "no survivors");
    let mut map = RedistributionMap::new();
    for (i, item) in items.into_iter().enumerate() {
        map.entry(survivors[i % survivors.len()]).or_insert_with(Vec::new).push(item);
    }
    map
}

/// Contiguous even split of `n` recovered samples over survivors.
pub fn ppr_split(n: usize, survivors: &[RankId]) -> Vec<(RankId, usize, usize)> {
    survivors
        .iter()
        .zip(split_even(0, n, survivors.len()))
        .map(|(&r, (s, c))| (r, s, c))
        .collect()
}

/// One line of the recovery log.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryEvent {
    pub failed: RankId,
    pub recovery_rank: RankId,
    /// `no-checkpoint`, `tree-only`, `tree+trans`, `opr` or `ppr`.
    pub case: String,
    pub bytes_moved: u64,
    pub disk_reads: u64,
    /// Re-executed work units (transactions or test samples).
    pub replayed: u64,
    /// Recovered samples per survivor (KNN only).
    pub shares: Vec<(RankId, usize)>,
}

impl fmt::Display for RecoveryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "failed={} rank={} case={} bytes={} disk_reads={} replayed={}",
            self.failed, self.recovery_rank, self.case, self.bytes_moved, self.disk_reads, self.replayed
        )?;
        if !self.shares.is_empty() {
            let shares: Vec<String> = self.shares.iter().map(|(r, n)| format!("{r}:{n}")).collect();
            write!(f, " shares={}", shares.join(","))?;
        }
        Ok(())
    }
}

/// Per-rank recovery counters.
#[derive(Clone, Debug, Default)]
pub struct RecoveryStats {
    pub time: Duration,
    /// Dataset records this rank read from disk while recovering.
    pub disk_reads: u64,
    /// Checkpoint files read from disk.
    pub checkpoint_reads: u64,
    pub bytes: u64,
    pub events: Vec<RecoveryEvent>,
}
