//! Synthetic datasets and the indexed on-disk store.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic [4] | version u32 | n_records u64 | width u64 | offsets u64 * n | records
//! ```
//!
//! `width` is the item universe for transaction files and the dimensionality
//! for point files. A transaction record is `len u32` followed by `len` sorted
//! `u32` items; a point record is `width` `f64` values.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::fabric::RankId;

pub type ItemId = u32;

/// Sorted, duplicate-free item list.
pub type Transaction = Vec<ItemId>;

const TRANS_MAGIC: [u8; 4] = *b"FTTX";
const POINT_MAGIC: [u8; 4] = *b"FTPT";
const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;

pub const DEFAULT_ZIPF_EXPONENT: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("records [{start}, {start}+{count}) outside dataset of {n}")]
    OutOfBounds { start: usize, count: usize, n: usize },
    #[error("malformed dataset {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },
    #[error("{path} holds {found} records, expected {expected}")]
    WrongKind {
        path: PathBuf,
        found: &'static str,
        expected: &'static str,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Transactions,
    Points,
}

impl RecordKind {
    fn magic(self) -> [u8; 4] {
        match self {
            RecordKind::Transactions => TRANS_MAGIC,
            RecordKind::Points => POINT_MAGIC,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RecordKind::Transactions => "transaction",
            RecordKind::Points => "point",
        }
    }
}

/// Encoded size of a transaction; the unit of transaction-window accounting.
pub fn transaction_bytes(t: &[ItemId]) -> usize {
    4 + 4 * t.len()
}

pub fn encode_transaction(t: &[ItemId], out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for item in t {
        out.extend_from_slice(&item.to_le_bytes());
    }
}

/// Decode one transaction from the front of `buf`, returning it and the bytes consumed.
pub fn decode_transaction(buf: &[u8]) -> Option<(Transaction, usize)> {
    let len = u32::from_le_bytes(buf.get(..4)?.try_into().ok()?) as usize;
    let end = 4 + 4 * len;
    let body = buf.get(4..end)?;
    let items = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some((items, end))
}

/// Decode a buffer holding back-to-back transactions.
pub fn decode_transactions(mut buf: &[u8]) -> Option<Vec<Transaction>> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (t, used) = decode_transaction(buf)?;
        out.push(t);
        buf = &buf[used..];
    }
    Some(out)
}

/// Counters shared by every reader of a dataset file.
#[derive(Debug, Default)]
pub struct IoStats {
    pub records_read: AtomicU64,
    pub bytes_read: AtomicU64,
}

/// An immutable, indexed dataset file open for concurrent reads.
#[derive(Debug)]
pub struct DatasetFile {
    path: PathBuf,
    kind: RecordKind,
    width: usize,
    index: Vec<u64>,
    end: u64,
    file: File,
    latency: Duration,
    stats: IoStats,
}

impl DatasetFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let bad = |reason: &str| DatasetError::BadFormat {
            path: path.clone(),
            reason: reason.into(),
        };
        let mut header = [0u8; HEADER_BYTES as usize];
        file.read_exact_at(&mut header, 0)
            .map_err(|_| bad("short header"))?;
        let kind = match header[..4].try_into().unwrap() {
            TRANS_MAGIC => RecordKind::Transactions,
            POINT_MAGIC => RecordKind::Points,
            _ => return Err(bad("bad magic")),
        };
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let width = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; n * 8];
        file.read_exact_at(&mut raw, HEADER_BYTES)
            .map_err(|_| bad("short index"))?;
        let index: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let end = file.metadata()?.len();
        if index.windows(2).any(|w| w[0] > w[1]) || index.last().is_some_and(|&o| o > end) {
            return Err(bad("index out of order"));
        }
        Ok(Self {
            path,
            kind,
            width,
            index,
            end,
            file,
            latency: Duration::ZERO,
            stats: IoStats::default(),
        })
    }

    /// Simulated per-record read delay.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kind(&self) -> RecordKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Item universe size (transactions) or dimensionality (points).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stats(&self) -> &IoStats {
        &self.stats
    }

    pub fn records_read(&self) -> u64 {
        self.stats.records_read.load(Ordering::Relaxed)
    }

    fn expect(&self, kind: RecordKind) -> Result<(), DatasetError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(DatasetError::WrongKind {
                path: self.path.clone(),
                found: self.kind.name(),
                expected: kind.name(),
            })
        }
    }

    fn raw_range(&self, start: usize, count: usize) -> Result<Vec<u8>, DatasetError> {
        if start.checked_add(count).is_none_or(|e| e > self.len()) {
            return Err(DatasetError::OutOfBounds {
                start,
                count,
                n: self.len(),
            });
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let from = self.index[start];
        let to = self.index.get(start + count).copied().unwrap_or(self.end);
        let mut buf = vec![0u8; (to - from) as usize];
        self.file.read_exact_at(&mut buf, from)?;
        if !self.latency.is_zero() {
            thread::sleep(self.latency * count as u32);
        }
        self.stats.records_read.fetch_add(count as u64, Ordering::Relaxed);
        self.stats.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(buf)
    }

    pub fn read_range(&self, start: usize, count: usize) -> Result<Vec<Transaction>, DatasetError> {
        self.expect(RecordKind::Transactions)?;
        let buf = self.raw_range(start, count)?;
        decode_transactions(&buf)
            .filter(|v| v.len() == count)
            .ok_or_else(|| DatasetError::BadFormat {
                path: self.path.clone(),
                reason: format!("corrupt transactions in [{start}, {})", start + count),
            })
    }

    pub fn read_points(&self, start: usize, count: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
        self.expect(RecordKind::Points)?;
        let buf = self.raw_range(start, count)?;
        if buf.len() != count * self.width * 8 {
            return Err(DatasetError::BadFormat {
                path: self.path.clone(),
                reason: "point record size".into(),
            });
        }
        Ok(buf
            .chunks_exact((self.width * 8).max(1))
            .take(count)
            .map(|rec| {
                rec.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect())
    }

    pub fn read_all(&self) -> Result<Vec<Transaction>, DatasetError> {
        self.read_range(0, self.len())
    }
}

fn write_file(path: &Path, kind: RecordKind, width: usize, records: &[Vec<u8>]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&kind.magic())?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    w.write_all(&(width as u64).to_le_bytes())?;
    let mut offset = HEADER_BYTES + 8 * records.len() as u64;
    for r in records {
        w.write_all(&offset.to_le_bytes())?;
        offset += r.len() as u64;
    }
    for r in records {
        w.write_all(r)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Parameters of the market-basket generator.
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionSpec {
    pub n_trans: usize,
    pub n_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
}

impl TransactionSpec {
    pub fn new(n_trans: usize, n_items: usize, min_len: usize, max_len: usize) -> Self {
        Self {
            n_trans,
            n_items,
            min_len,
            max_len,
            zipf_exponent: DEFAULT_ZIPF_EXPONENT,
        }
    }
}

/// Draw transactions with Zipf-skewed item popularity (item 0 most popular).
pub fn synth_transactions(spec: &TransactionSpec, seed: u64) -> Result<Vec<Transaction>, DatasetError> {
    let TransactionSpec {
        n_trans,
        n_items,
        min_len,
        max_len,
        zipf_exponent,
    } = *spec;
    if n_items == 0 || min_len == 0 || min_len > max_len || max_len > n_items {
        return Err(DatasetError::InvalidRange(format!(
            "lengths [{min_len}, {max_len}] must lie within [1, {n_items}]"
        )));
    }
    let zipf = Zipf::new(n_items as f64, zipf_exponent)
        .map_err(|e| DatasetError::InvalidRange(format!("zipf: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_trans);
    let mut seen = vec![false; n_items];
    for _ in 0..n_trans {
        let len = rng.random_range(min_len..=max_len);
        let mut t: Transaction = if len == n_items {
            (0..n_items as ItemId).collect()
        } else {
            let mut t = Vec::with_capacity(len);
            while t.len() < len {
                let item = zipf.sample(&mut rng) as usize - 1;
                if !seen[item] {
                    seen[item] = true;
                    t.push(item as ItemId);
                }
            }
            for &i in &t {
                seen[i as usize] = false;
            }
            t
        };
        t.sort_unstable();
        out.push(t);
    }
    Ok(out)
}

pub fn write_transactions(path: impl AsRef<Path>, n_items: usize, trans: &[Transaction]) -> Result<(), DatasetError> {
    let records: Vec<Vec<u8>> = trans
        .iter()
        .map(|t| {
            let mut r = Vec::with_capacity(transaction_bytes(t));
            encode_transaction(t, &mut r);
            r
        })
        .collect();
    write_file(path.as_ref(), RecordKind::Transactions, n_items, &records)
}

pub fn generate_transactions(
    path: impl AsRef<Path>,
    spec: &TransactionSpec,
    seed: u64,
) -> Result<DatasetFile, DatasetError> {
    let trans = synth_transactions(spec, seed)?;
    write_transactions(&path, spec.n_items, &trans)?;
    DatasetFile::open(path)
}

/// Uniform points in `[-1, 1]^dims`.
pub fn synth_points(n: usize, dims: usize, seed: u64) -> Result<Vec<Vec<f64>>, DatasetError> {
    if dims == 0 {
        return Err(DatasetError::InvalidRange("dims must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect())
}

pub fn write_points(path: impl AsRef<Path>, dims: usize, points: &[Vec<f64>]) -> Result<(), DatasetError> {
    let records: Vec<Vec<u8>> = points
        .iter()
        .map(|p| p.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    write_file(path.as_ref(), RecordKind::Points, dims, &records)
}

pub fn generate_points(path: impl AsRef<Path>, n: usize, dims: usize, seed: u64) -> Result<DatasetFile, DatasetError> {
    let points = synth_points(n, dims, seed)?;
    write_points(&path, dims, &points)?;
    DatasetFile::open(path)
}

/// Training and test files of a KNN dataset share a prefix.
pub fn knn_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".train"), with(".test"))
}

/// Contiguous split of `n` records into `parts` ranges, remainder to the
/// lowest parts.
pub fn split_even(start: usize, n: usize, parts: usize) -> Vec<(usize, usize)> {
    assert!(parts >= 1, "split into zero parts");
    let base = n / parts;
    let extra = n % parts;
    let mut at = start;
    (0..parts)
        .map(|i| {
            let count = base + usize::from(i < extra);
            let range = (at, count);
            at += count;
            range
        })
        .collect()
}

/// Rank → (start, count) over a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionManifest {
    ranges: Vec<(usize, usize)>,
}

impl PartitionManifest {
    pub fn new(n: usize, p: usize) -> Self {
        Self {
            ranges: split_even(0, n, p),
        }
    }

    pub fn range(&self, r: RankId) -> (usize, usize) {
        self.ranges[r.index()]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.1).collect()
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

pub fn partition(n_records: usize, p: usize) -> PartitionManifest {
    PartitionManifest::new(n_records, p)
}

/// Slice of a failed shard that one survivor reads itself.
pub fn failed_slice(start: usize, count: usize, survivors: &[RankId], me: RankId) -> Option<(usize, usize)> {
    let pos = survivors.iter().position(|&s| s == me)?;
    Some(split_even(start, count, survivors.len())[pos])
}

/// Every survivor's slice of `[start, start+count)`, read from disk.
pub fn parallel_read_failed(
    file: &DatasetFile,
    start: usize,
    count: usize,
    survivors: &[RankId],
) -> Result<Vec<(RankId, Vec<Transaction>)>, DatasetError> {
    if survivors.is_empty() {
        return Err(DatasetError::InvalidRange("no survivors".into()));
    }
    survivors
        .iter()
        .zip(split_even(start, count, survivors.len()))
        .map(|(&r, (s, c))| Ok((r, file.read_range(s, c)?)))
        .collect()
}
