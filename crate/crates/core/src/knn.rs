//! Exact k-nearest-neighbor search with training shards rotating around a ring.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::fabric::{FabricError, RankCtx, RankId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KnnError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("queues have different capacities: {0} vs {1}")]
    CapacityMismatch(usize, usize),
    #[error("corrupt queue or block encoding: {0}")]
    Corrupt(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
}

/// Euclidean distance.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, KnnError> {
    if a.len() != b.len() {
        return Err(KnnError::DimMismatch(a.len(), b.len()));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(d2.sqrt())
}

/// Candidate neighbor, ordered by (distance, id).
#[derive(Clone, Copy, Debug)]
pub struct Neighbor {
    pub dist: f64,
    pub id: u64,
}

impl PartialEq for Neighbor {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates seen.
#[derive(Clone, Debug)]
pub struct NeighborQueue {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl NeighborQueue {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn enqueue(&mut self, dist: f64, id: u64) {
        let cand = Neighbor { dist, id };
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if cand < *top {
                *top = cand;
            }
        }
    }

    /// Entries in ascending (distance, id) order.
    pub fn sorted(&self) -> Vec<Neighbor> {
        let mut v: Vec<_> = self.heap.iter().copied().collect();
        v.sort();
        v
    }

    /// `k` smallest of the union; duplicate entries collapse.
    pub fn merge(&self, other: &NeighborQueue) -> Result<NeighborQueue, KnnError> {
        if self.k != other.k {
            return Err(KnnError::CapacityMismatch(self.k, other.k));
        }
        let mut all: Vec<Neighbor> = self.heap.iter().chain(other.heap.iter()).copied().collect();
        all.sort();
        all.dedup();
        let mut out = NeighborQueue::new(self.k);
        for n in all.into_iter().take(self.k) {
            out.heap.push(n);
        }
        Ok(out)
    }
}

impl PartialEq for NeighborQueue {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.sorted() == other.sorted()
    }
}

/// Offer every (test, train) pair of the block to the test's queue.
pub fn process_block(tests: &[Sample], block: &[Sample], queues: &mut [NeighborQueue]) -> Result<(), KnnError> {
    debug_assert_eq!(tests.len(), queues.len());
    for (t, q) in tests.iter().zip(queues.iter_mut()) {
        for s in block {
            q.enqueue(distance(&t.features, &s.features)?, s.id);
        }
    }
    Ok(())
}

const QV_HEADER: usize = 16;
const ENTRY_BYTES: usize = 16;

/// Per-rank neighbor state, as checkpointed.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueVector {
    pub owner: RankId,
    pub iteration_tag: u32,
    pub queues: Vec<NeighborQueue>,
}

impl QueueVector {
    /// Encoded size for `n` queues of capacity `k`; independent of contents.
    pub fn encoded_size(n: usize, k: usize) -> usize {
        QV_HEADER + n * (4 + k * ENTRY_BYTES)
    }

    pub fn k(&self) -> usize {
        self.queues.first().map_or(0, NeighborQueue::k)
    }

    pub fn encode(&self, k: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_size(self.queues.len(), k));
        out.extend_from_slice(&(self.owner.index() as u32).to_le_bytes());
        out.extend_from_slice(&self.iteration_tag.to_le_bytes());
        out.extend_from_slice(&(self.queues.len() as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for q in &self.queues {
            let entries = q.sorted();
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for i in 0..k {
                let n = entries.get(i).copied().unwrap_or(Neighbor { dist: 0.0, id: 0 });
                out.extend_from_slice(&n.id.to_le_bytes());
                out.extend_from_slice(&n.dist.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, KnnError> {
        if buf.len() < QV_HEADER {
            return Err(KnnError::Corrupt("short queue vector"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let (owner, tag, n, k) = (u32_at(0), u32_at(4), u32_at(8), u32_at(12));
        if buf.len() != Self::encoded_size(n, k) {
            return Err(KnnError::Corrupt("queue vector length"));
        }
        let mut queues = Vec::with_capacity(n);
        let mut at = QV_HEADER;
        for _ in 0..n {
            let len = u32_at(at);
            if len > k {
                return Err(KnnError::Corrupt("queue longer than k"));
            }
            let mut q = NeighborQueue::new(k);
            for i in 0..len {
                let o = at + 4 + i * ENTRY_BYTES;
                let id = u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
                let dist = f64::from_le_bytes(buf[o + 8..o + 16].try_into().unwrap());
                q.enqueue(dist, id);
            }
            queues.push(q);
            at += 4 + k * ENTRY_BYTES;
        }
        Ok(Self {
            owner: RankId(owner),
            iteration_tag: tag as u32,
            queues,
        })
    }
}

pub fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let dims = samples.first().map_or(0, |s| s.features.len());
    let mut out = Vec::with_capacity(8 + samples.len() * (8 + 8 * dims));
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_samples(buf: &[u8]) -> Result<Vec<Sample>, KnnError> {
    if buf.len() < 8 {
        return Err(KnnError::Corrupt("short sample block"));
    }
    let n = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let rec = 8 + 8 * dims;
    if buf.len() != 8 + n * rec {
        return Err(KnnError::Corrupt("sample block length"));
    }
    Ok(buf[8..]
        .chunks_exact(rec)
        .map(|r| Sample {
            id: u64::from_le_bytes(r[..8].try_into().unwrap()),
            features: r[8..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
        .collect())
}

pub fn samples_from(points: Vec<Vec<f64>>, first_id: usize) -> Vec<Sample> {
    points
        .into_iter()
        .enumerate()
        .map(|(i, features)| Sample {
            id: (first_id + i) as u64,
            features,
        })
        .collect()
}

const RING_TAG: u64 = 0x4b4e_4e00;

#[derive(Debug, thiserror::Error)]
pub enum RingError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

impl crate::fabric::RankFailure for RingError {
    fn is_injected_fault(&self) -> bool {
        matches!(self, RingError::Fabric(FabricError::Killed))
    }
}

/// Send the local block to the ring successor and take the predecessor's.
pub fn ring_step(ctx: &mut RankCtx, step: u64, block: &[Sample]) -> Result<Vec<Sample>, RingError> {
    let alive = ctx.alive();
    let p = ctx.size();
    let (Some(succ), Some(pred)) = (alive.successor(ctx.rank(), p), alive.predecessor(ctx.rank(), p)) else {
        return Ok(block.to_vec());
    };
    ctx.send(succ, RING_TAG + step, encode_samples(block))?;
    let got = ctx.recv(pred, RING_TAG + step)?;
    Ok(decode_samples(&got)?)
}

/// Fault-free ring KNN. `on_iteration` runs after each processed block with
/// the updated queues (tagged with the number of completed iterations).
pub fn run_knn<E>(
    ctx: &mut RankCtx,
    tests: &[Sample],
    train: Vec<Sample>,
    k: usize,
    mut on_iteration: impl FnMut(&mut RankCtx, &QueueVector) -> Result<(), E>,
) -> Result<QueueVector, E>
where
    E: From<RingError>,
{
    let p = ctx.size();
    let mut qv = QueueVector {
        owner: ctx.rank(),
        iteration_tag: 0,
        queues: vec![NeighborQueue::new(k); tests.len()],
    };
    let mut block = train;
    for i in 0..p {
        process_block(tests, &block, &mut qv.queues).map_err(RingError::from)?;
        qv.iteration_tag = (i + 1) as u32;
        on_iteration(ctx, &qv)?;
        if i + 1 < p {
            block = ring_step(ctx, i as u64, &block)?;
        }
    }
    Ok(qv)
}

/// One result row: test id and its neighbors as (train id, distance).
pub type NeighborRow = (u64, Vec<(u64, f64)>);

pub fn rows_from(tests: &[Sample], queues: &[NeighborQueue]) -> Vec<NeighborRow> {
    tests
        .iter()
        .zip(queues)
        .map(|(t, q)| (t.id, q.sorted().into_iter().map(|n| (n.id, n.dist)).collect()))
        .collect()
}

/// Result-file text: `test_id<TAB>train_id:distance,...`, sorted by test id.
pub fn format_neighbors(rows: &[NeighborRow]) -> String {
    let mut rows: Vec<&NeighborRow> = rows.iter().collect();
    rows.sort_by_key(|r| r.0);
    let mut s = String::new();
    for (test, ns) in rows {
        let cells: Vec<String> = ns.iter().map(|(id, d)| format!("{id}:{d}")).collect();
        let _ = writeln!(s, "{test}\t{}", cells.join(","));
    }
    s
}

pub fn parse_neighbors(text: &str) -> Result<Vec<NeighborRow>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let err = |what: &str| format!("line {}: {what}", n + 1);
            let (test, rest) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let test = test.parse().map_err(|_| err("bad test id"))?;
            let ns = rest
                .split(',')
                .filter(|c| !c.is_empty())
                .map(|cell| {
                    let (id, d) = cell.split_once(':').ok_or_else(|| err("bad neighbor"))?;
                    Ok((
                        id.parse().map_err(|_| err("bad train id"))?,
                        d.parse().map_err(|_| err("bad distance"))?,
                    ))
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok((test, ns))
        })
        .collect()
}
