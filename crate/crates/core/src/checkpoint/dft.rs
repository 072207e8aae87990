//! Disk checkpoints: `<dir>/rank{r}/epoch{e}.{ext}` plus a 16-byte
//! `epoch{e}.meta` (epoch, ct, crc32 of the payload, flag), each written to a
//! temporary name and renamed into place, payload first. Two epochs are kept.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::fabric::RankId;

pub const META_BYTES: usize = 16;
const FLAG_VALID: u32 = 1;
const KEEP_EPOCHS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiskCheckpoint {
    pub epoch: u32,
    pub ct: u32,
    pub flag: u32,
    pub payload: Vec<u8>,
}

impl DiskCheckpoint {
    /// Caller-defined bits stored next to the validity bit.
    pub fn user_flag(&self) -> u32 {
        self.flag >> 8
    }
}

#[derive(Clone, Debug)]
pub struct DiskStore {
    dir: PathBuf,
    read_latency: Duration,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

impl DiskStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            read_latency: Duration::ZERO,
        }
    }

    /// Simulated delay per file read during recovery.
    pub fn with_read_latency(mut self, latency: Duration) -> Self {
        self.read_latency = latency;
        self
    }

    pub fn rank_dir(&self, rank: RankId) -> PathBuf {
        self.dir.join(format!("rank{}", rank.index()))
    }

    fn path(&self, rank: RankId, epoch: u32, ext: &str) -> PathBuf {
        self.rank_dir(rank).join(format!("epoch{epoch}.{ext}"))
    }

    /// Remove every checkpoint of `rank`.
    pub fn reset(&self, rank: RankId) -> Result<()> {
        let dir = self.rank_dir(rank);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(())
    }

    pub fn write_payload(&self, rank: RankId, ext: &str, epoch: u32, payload: &[u8]) -> Result<()> {
        fs::create_dir_all(self.rank_dir(rank))?;
        write_atomic(&self.path(rank, epoch, ext), payload)?;
        Ok(())
    }

    pub fn commit_meta(&self, rank: RankId, ext: &str, epoch: u32, ct: u32, user_flag: u32, payload: &[u8]) -> Result<()> {
        let mut meta = [0u8; META_BYTES];
        meta[0..4].copy_from_slice(&epoch.to_le_bytes());
        meta[4..8].copy_from_slice(&ct.to_le_bytes());
        meta[8..12].copy_from_slice(&crc32fast::hash(payload).to_le_bytes());
        meta[12..16].copy_from_slice(&(FLAG_VALID | user_flag << 8).to_le_bytes());
        write_atomic(&self.path(rank, epoch, "meta"), &meta)?;
        if epoch >= KEEP_EPOCHS {
            let old = epoch - KEEP_EPOCHS;
            let _ = fs::remove_file(self.path(rank, old, ext));
            let _ = fs::remove_file(self.path(rank, old, "meta"));
        }
        Ok(())
    }

    /// Write payload then metadata; returns bytes written.
    pub fn write(&self, rank: RankId, ext: &str, epoch: u32, ct: u32, user_flag: u32, payload: &[u8]) -> Result<u64> {
        self.write_payload(rank, ext, epoch, payload)?;
        self.commit_meta(rank, ext, epoch, ct, user_flag, payload)?;
        Ok((payload.len() + META_BYTES) as u64)
    }

    fn read(&self, path: &Path) -> Option<Vec<u8>> {
        let bytes = fs::read(path).ok()?;
        if !self.read_latency.is_zero() {
            thread::sleep(self.read_latency);
        }
        Some(bytes)
    }

    /// Newest epoch whose metadata and payload are both present and agree.
    pub fn latest(&self, rank: RankId, ext: &str) -> Result<Option<DiskCheckpoint>> {
        let dir = self.rank_dir(rank);
        let Ok(entries) = fs::read_dir(&dir) else {
            return Ok(None);
        };
        let mut epochs: Vec<u32> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("epoch")?.strip_suffix(".meta")?.parse().ok()
            })
            .collect();
        epochs.sort_unstable_by(|a, b| b.cmp(a));
        for epoch in epochs {
            let Some(meta) = self.read(&self.path(rank, epoch, "meta")) else {
                continue;
            };
            if meta.len() != META_BYTES {
                continue;
            }
            let word = |i: usize| u32::from_le_bytes(meta[i * 4..i * 4 + 4].try_into().unwrap());
            let (m_epoch, ct, crc, flag) = (word(0), word(1), word(2), word(3));
            if m_epoch != epoch || flag & FLAG_VALID == 0 {
                continue;
            }
            let Some(payload) = self.read(&self.path(rank, epoch, ext)) else {
                continue;
            };
            if crc32fast::hash(&payload) != crc {
                continue;
            }
            return Ok(Some(DiskCheckpoint {
                epoch,
                ct,
                flag,
                payload,
            }));
        }
        Ok(None)
    }
}

pub fn corrupt(what: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(what.into())
}
