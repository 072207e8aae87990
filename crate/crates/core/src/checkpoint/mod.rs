//! Checkpointing strategies: disk files (DFT), synchronous in-memory replicas
//! with a resize handshake (SMFT), and asynchronous one-sided replicas stored
//! in the target's already-processed transaction space (AMFT).

pub mod amft;
pub mod dft;
pub mod smft;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::fabric::{RankCtx, RankId, RankSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FtMode {
    None,
    Dft,
    Smft,
    Amft,
}

impl FtMode {
    pub const ALL: [FtMode; 4] = [FtMode::None, FtMode::Dft, FtMode::Smft, FtMode::Amft];

    pub fn name(self) -> &'static str {
        match self {
            FtMode::None => "none",
            FtMode::Dft => "dft",
            FtMode::Smft => "smft",
            FtMode::Amft => "amft",
        }
    }
}

impl fmt::Display for FtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FtMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FtMode::None),
            "dft" => Ok(FtMode::Dft),
            "smft" => Ok(FtMode::Smft),
            "amft" => Ok(FtMode::Amft),
            other => Err(format!("unknown fault-tolerance mode `{other}`")),
        }
    }
}

/// `c` checkpoints spread evenly over a shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointPolicy {
    pub c: usize,
    pub interval: usize,
}

impl CheckpointPolicy {
    pub fn new(shard_len: usize, c: usize) -> Self {
        assert!(c >= 1, "at least one checkpoint per phase");
        Self {
            c,
            interval: shard_len.div_ceil(c).max(1),
        }
    }

    pub fn should_checkpoint(&self, processed: usize) -> bool {
        processed > 0 && processed.is_multiple_of(self.interval)
    }

    /// 1-based index of the checkpoint taken at `processed`.
    pub fn epoch_of(&self, processed: usize) -> usize {
        processed / self.interval
    }
}

pub fn should_checkpoint(processed: usize, policy: &CheckpointPolicy) -> bool {
    policy.should_checkpoint(processed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Tree plus every not-yet-processed transaction.
    Complete,
    /// Tree only.
    Partial,
    None,
}

pub fn amft_decide(free_bytes: u64, tree_bytes: u64, remaining_bytes: u64, complete_done: bool) -> CheckpointKind {
    if !complete_done && free_bytes >= tree_bytes + remaining_bytes {
        CheckpointKind::Complete
    } else if free_bytes >= tree_bytes {
        CheckpointKind::Partial
    } else {
        CheckpointKind::None
    }
}

/// Where a rank's replica goes: the next alive rank in the ring, as far as
/// this rank knows.
pub fn ring_target(ctx: &RankCtx) -> Option<RankId> {
    let alive = RankSet::first(ctx.size()).minus(ctx.known_dead());
    alive.successor(ctx.rank(), ctx.size())
}

pub const RECORD_BYTES: usize = 88;

/// Descriptor of one source's replica on its holder. Offsets are byte
/// offsets into the holder's transaction window (AMFT) or into the
/// per-source windows (SMFT).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetadataRecord {
    pub source: Option<RankId>,
    pub seq: u64,
    /// Processed bytes the holder had released when the record was written.
    pub ls_ptr: u64,
    /// End of the checkpointed-transactions region; 0 when there is none.
    pub cf_ptr: u64,
    pub trans_bytes: u64,
    pub tree_ptr: u64,
    /// Serialized tree size.
    pub cfs: u64,
    /// Index of the source's last processed transaction, relative to the
    /// start of its shard.
    pub ct: u64,
    /// Shard-relative index of the first checkpointed transaction.
    pub sct: u64,
    /// Number of checkpointed transactions.
    pub nct: u64,
    pub round: u64,
}

impl MetadataRecord {
    pub fn encode(&self) -> [u8; RECORD_BYTES] {
        let fields = [
            self.source.map_or(0, |r| r.index() as u64 + 1),
            self.seq,
            self.ls_ptr,
            self.cf_ptr,
            self.trans_bytes,
            self.tree_ptr,
            self.cfs,
            self.ct,
            self.sct,
            self.nct,
            self.round,
        ];
        let mut out = [0u8; RECORD_BYTES];
        for (chunk, v) in out.chunks_exact_mut(8).zip(fields) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Self {
        let f = |i: usize| u64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
        Self {
            source: match f(0) {
                0 => None,
                s => Some(RankId(s as usize - 1)),
            },
            seq: f(1),
            ls_ptr: f(2),
            cf_ptr: f(3),
            trans_bytes: f(4),
            tree_ptr: f(5),
            cfs: f(6),
            ct: f(7),
            sct: f(8),
            nct: f(9),
            round: f(10),
        }
    }

    pub fn trans_region(&self) -> Option<(u64, u64)> {
        (self.nct > 0).then(|| (self.cf_ptr - self.trans_bytes, self.trans_bytes))
    }

    pub fn tree_region(&self) -> Option<(u64, u64)> {
        (self.cfs > 0).then_some((self.tree_ptr, self.cfs))
    }
}

/// Per-rank checkpoint counters.
#[derive(Clone, Debug, Default)]
pub struct CkptStats {
    pub time: Duration,
    pub bytes: u64,
    pub taken: u64,
    pub complete: u64,
    pub partial: u64,
    pub skipped: u64,
    pub critical: u64,
    pub log: Vec<String>,
}

impl CkptStats {
    pub fn note(&mut self, line: String) {
        self.log.push(line);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_schedule() {
        let p = CheckpointPolicy::new(100, 4);
        let at: Vec<usize> = (0..=100).filter(|&n| should_checkpoint(n, &p)).collect();
        assert_eq!(at, vec![25, 50, 75, 100]);
        let p = CheckpointPolicy::new(100, 1);
        let at: Vec<usize> = (0..=100).filter(|&n| should_checkpoint(n, &p)).collect();
        assert_eq!(at, vec![100]);
        assert!(!should_checkpoint(0, &p));
        assert_eq!(CheckpointPolicy::new(100, 4).epoch_of(75), 3);
    }

    #[test]
    fn decide_rule() {
        assert_eq!(amft_decide(100, 60, 30, false), CheckpointKind::Complete);
        assert_eq!(amft_decide(80, 60, 30, false), CheckpointKind::Partial);
        assert_eq!(amft_decide(50, 60, 30, false), CheckpointKind::None);
        assert_eq!(amft_decide(500, 60, 30, true), CheckpointKind::Partial);
    }

    #[test]
    fn record_roundtrip() {
        let r = MetadataRecord {
            source: Some(RankId(3)),
            seq: 2,
            ls_ptr: 700,
            cf_ptr: 340,
            trans_bytes: 300,
            tree_ptr: 340,
            cfs: 120,
            ct: 79,
            sct: 50,
            nct: 50,
            round: 0,
        };
        assert_eq!(MetadataRecord::decode(&r.encode()), r);
        assert_eq!(r.trans_region(), Some((40, 300)));
        assert_eq!(MetadataRecord::decode(&[0u8; RECORD_BYTES]).source, None);
        assert_eq!(MetadataRecord::default().trans_region(), None);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("AMFT".parse::<FtMode>().unwrap(), FtMode::Amft);
        assert!("raid".parse::<FtMode>().is_err());
    }
}
