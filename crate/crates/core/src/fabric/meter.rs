use std::sync::Mutex;

use super::RankId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpaceSample {
    /// Bytes of checkpoint data (including metadata) hosted by the rank.
    pub resident_ckpt: u64,
    /// Bytes of transactions the rank still has to absorb.
    pub unprocessed: u64,
    /// Largest `resident_ckpt + unprocessed` observed.
    pub peak_total: u64,
    /// Largest `resident_ckpt` observed.
    pub peak_ckpt: u64,
    /// Bytes of the rank's initial shard.
    pub initial_shard: u64,
}

/// Instrumentation for the checkpoint space bound. Updated from whichever rank
/// changes a quantity (a source reserving space on a target updates the
/// target's entry), so peaks are exact rather than sampled.
#[derive(Debug)]
pub struct SpaceMeter {
    cells: Mutex<Vec<SpaceSample>>,
}

impl SpaceMeter {
    pub fn new(p: usize) -> Self {
        Self {
            cells: Mutex::new(vec![SpaceSample::default(); p]),
        }
    }

    fn update(&self, rank: RankId, f: impl FnOnce(&mut SpaceSample)) {
        let mut cells = self.cells.lock().unwrap();
        let c = &mut cells[rank.index()];
        f(c);
        c.peak_total = c.peak_total.max(c.resident_ckpt + c.unprocessed);
        c.peak_ckpt = c.peak_ckpt.max(c.resident_ckpt);
    }

    pub fn set_initial_shard(&self, rank: RankId, bytes: u64) {
        self.update(rank, |c| {
            c.initial_shard = bytes;
            c.unprocessed = bytes;
        });
    }

    pub fn set_unprocessed(&self, rank: RankId, bytes: u64) {
        self.update(rank, |c| c.unprocessed = bytes);
    }

    pub fn set_resident(&self, rank: RankId, bytes: u64) {
        self.update(rank, |c| c.resident_ckpt = bytes);
    }

    pub fn raise_resident(&self, rank: RankId, bytes: u64) {
        self.update(rank, |c| c.resident_ckpt = c.resident_ckpt.max(bytes));
    }

    pub fn snapshot(&self) -> Vec<SpaceSample> {
        self.cells.lock().unwrap().clone()
    }
}
