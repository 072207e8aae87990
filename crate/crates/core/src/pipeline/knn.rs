//! Fault-tolerant ring KNN. Work proceeds in phases: a phase rotates the
//! training shards that some test group still misses around the ring of
//! alive ranks, checkpointing the queues to the ring successor after every
//! step. A failure aborts the phase; the failed rank's test groups are
//! restored from its replica (or recomputed) on survivors and the next phase
//! covers whatever each group has not seen.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::checkpoint::{amft, dft::DiskStore, smft, CkptStats, FtMode, MetadataRecord};
use crate::dataset::{partition, DatasetFile, PartitionManifest};
use crate::error::{Error, Result};
use crate::fabric::{Progress, RankCtx, RankId, RankSet};
use crate::knn::{
    decode_samples, encode_samples, format_neighbors, parse_neighbors, process_block, rows_from, run_knn,
    NeighborQueue, NeighborRow, QueueVector, Sample,
};
use crate::pipeline::RankReport;
use crate::recovery::{ppr_split, KnnRecovery, RecoveryEvent, RecoveryStats};

const TAG_RING: u64 = 0x4b46_0000_0000_0000;
const TAG_PPR: u64 = 0x4b50_0000_0000_0000;
const TAG_KIND: u64 = 0xffff_0000_0000_0000;
const KNN_EXT: &str = "knn";
const GROUP_HEADER: usize = 32;

#[derive(Clone, Debug)]
pub struct KnnJob {
    pub train: PathBuf,
    pub test: PathBuf,
    pub k: usize,
    pub ft: FtMode,
    pub recovery: KnnRecovery,
    pub ckpt_dir: PathBuf,
    /// Simulated delay per record or checkpoint file read during recovery.
    pub disk_latency: Duration,
}

/// A contiguous run of test samples with their queues and the training
/// shards already offered to them.
#[derive(Clone, Debug)]
struct Group {
    start: usize,
    done: u64,
    samples: Vec<Sample>,
    queues: Vec<NeighborQueue>,
}

impl Group {
    fn fresh(start: usize, samples: Vec<Sample>, k: usize) -> Self {
        Self {
            start,
            done: 0,
            queues: vec![NeighborQueue::new(k); samples.len()],
            samples,
        }
    }

    fn count(&self) -> usize {
        self.queues.len()
    }
}

/// Group state as stored in a replica or shipped to another rank.
struct GroupState {
    start: usize,
    done: u64,
    queues: QueueVector,
    samples: Option<Vec<Sample>>,
}

fn encode_groups(groups: &[Group], owner: RankId, tag: u32, k: usize, with_samples: bool) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        let qv = QueueVector {
            owner,
            iteration_tag: tag,
            queues: g.queues.clone(),
        }
        .encode(k);
        for v in [g.start as u64, g.count() as u64, g.done, qv.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&qv);
        if with_samples {
            let s = encode_samples(&g.samples);
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(&s);
        }
    }
    out
}

fn decode_groups(buf: &[u8], with_samples: bool) -> Result<Vec<GroupState>> {
    let bad = || Error::CorruptCheckpoint("queue group encoding".into());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(at..at + n).ok_or_else(bad)?;
        at += n;
        Ok(s)
    };
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut word = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let (start, count, done, qv_len) = (word()?, word()?, word()?, word()?);
        let queues = QueueVector::decode(take(qv_len as usize)?)?;
        if queues.queues.len() as u64 != count {
            return Err(bad());
        }
        let samples = if with_samples {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            Some(decode_samples(take(len)?)?)
        } else {
            None
        };
        out.push(GroupState {
            start: start as usize,
            done,
            queues,
            samples,
        });
    }
    if at != buf.len() {
        return Err(bad());
    }
    Ok(out)
}

/// Bytes of a replica holding groups of these sizes.
fn replica_size(counts: &[usize], k: usize) -> usize {
    4 + counts
        .iter()
        .map(|&c| GROUP_HEADER + QueueVector::encoded_size(c, k))
        .sum::<usize>()
}

fn encode_bundle(bundle: &[(usize, Vec<Sample>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (shard, samples) in bundle {
        let s = encode_samples(samples);
        out.extend_from_slice(&(*shard as u32).to_le_bytes());
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend_from_slice(&s);
    }
    out
}

fn decode_bundle(buf: &[u8]) -> Result<Vec<(usize, Vec<Sample>)>> {
    let bad = || Error::Run("malformed training bundle".into());
    let n = u32::from_le_bytes(buf.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let head = buf.get(at..at + 12).ok_or_else(bad)?;
        let shard = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(head[4..].try_into().unwrap()) as usize;
        at += 12;
        out.push((shard, decode_samples(buf.get(at..at + len).ok_or_else(bad)?)?));
        at += len;
    }
    Ok(out)
}

/// Per-rank group layout: (start, count, done) triples.
type Layout = Vec<Vec<(usize, usize, u64)>>;

fn encode_layout(groups: &[Group]) -> Vec<u8> {
    groups
        .iter()
        .flat_map(|g| [g.start as u64, g.count() as u64, g.done])
        .flat_map(u64::to_le_bytes)
        .collect()
}

fn decode_layout(all: &[Option<Vec<u8>>]) -> Layout {
    all.iter()
        .map(|c| {
            c.as_deref()
                .unwrap_or_default()
                .chunks_exact(24)
                .map(|r| {
                    let w = |i: usize| u64::from_le_bytes(r[i * 8..i * 8 + 8].try_into().unwrap());
                    (w(0) as usize, w(1) as usize, w(2))
                })
                .collect()
        })
        .collect()
}

fn ring_tag(phase: u32, step: usize) -> u64 {
    TAG_RING | (phase as u64) << 16 | step as u64
}

struct Knn<'a> {
    job: &'a KnnJob,
    me: RankId,
    p: usize,
    train_manifest: PartitionManifest,
    test_disk: DatasetFile,
    train_disk: DatasetFile,
    own_train: Vec<Sample>,
    groups: Vec<Group>,
    phase: u32,
    steps_done: usize,
    seq: u64,
    store: DiskStore,
    stats: CkptStats,
    rstats: RecoveryStats,
}

impl Knn<'_> {
    fn full_mask(&self) -> u64 {
        if self.p == 64 {
            u64::MAX
        } else {
            (1u64 << self.p) - 1
        }
    }

    fn checkpoint(&mut self, ctx: &mut RankCtx, succ: Option<RankId>) -> Result<()> {
        if self.job.ft == FtMode::None {
            return Ok(());
        }
        let t0 = Instant::now();
        self.seq += 1;
        let payload = encode_groups(&self.groups, self.me, self.steps_done as u32, self.job.k, false);
        let moved = match (self.job.ft, succ) {
            (FtMode::Dft, _) => self.store.write(
                self.me,
                KNN_EXT,
                self.seq as u32,
                self.steps_done as u32,
                self.phase,
                &payload,
            )?,
            (FtMode::Smft, Some(t)) => {
                let rec = MetadataRecord {
                    source: Some(self.me),
                    seq: self.seq,
                    cfs: payload.len() as u64,
                    ct: self.steps_done as u64,
                    round: self.phase as u64,
                    ..Default::default()
                };
                smft::checkpoint(ctx, t, &payload, None, rec)?
            }
            (FtMode::Amft, Some(t)) => amft::checkpoint_knn(ctx, t, self.phase, self.seq, &payload)?,
            _ => 0,
        };
        self.stats.bytes += moved;
        self.stats.taken += 1;
        self.stats.complete += 1;
        self.stats.time += t0.elapsed();
        Ok(())
    }

    fn shard_samples(&mut self, shard: usize) -> Result<Vec<Sample>> {
        if shard == self.me.index() {
            return Ok(self.own_train.clone());
        }
        let (s, c) = self.train_manifest.range(RankId(shard));
        let before = self.train_disk.records_read();
        let points = self.train_disk.read_points(s, c)?;
        self.rstats.disk_reads += self.train_disk.records_read() - before;
        Ok(crate::knn::samples_from(points, s))
    }

    fn process(&mut self, bundle: &[(usize, Vec<Sample>)]) -> Result<()> {
        for g in &mut self.groups {
            for (shard, samples) in bundle {
                let bit = 1u64 << shard;
                if g.done & bit == 0 {
                    process_block(&g.samples, samples, &mut g.queues)?;
                    g.done |= bit;
                }
            }
        }
        Ok(())
    }

    /// One phase over the ring `alive`. Peer failures surface as errors.
    fn ring(&mut self, ctx: &mut RankCtx, alive: RankSet, mut bundle: Vec<(usize, Vec<Sample>)>) -> Result<()> {
        let succ = alive.successor(self.me, self.p);
        let pred = alive.predecessor(self.me, self.p);
        if self.phase > 0 {
            self.checkpoint(ctx, succ)?;
            self.stats.critical += 1;
        }
        let m = alive.len();
        for j in 0..m {
            ctx.fault_point(Progress::Iterations {
                done: self.steps_done,
                total: self.p,
            })?;
            self.process(&bundle)?;
            self.steps_done += 1;
            self.checkpoint(ctx, succ)?;
            if j + 1 < m {
                let (succ, pred) = (succ.unwrap(), pred.unwrap());
                let tag = ring_tag(self.phase, j);
                ctx.send(succ, tag, encode_bundle(&bundle))?;
                bundle = decode_bundle(&ctx.recv(pred, tag)?)?;
            }
        }
        ctx.fault_point(Progress::Iterations {
            done: self.steps_done,
            total: self.p,
        })?;
        Ok(())
    }

    /// Run one phase; returns the layout every rank agreed on at its start.
    fn run_phase(&mut self, ctx: &mut RankCtx) -> Result<Layout> {
        let all = ctx.allgather(encode_layout(&self.groups))?;
        let layout = decode_layout(&all);
        let alive = RankSet::first(self.p).minus(ctx.known_dead());
        let needed = layout
            .iter()
            .flatten()
            .fold(0u64, |acc, &(_, _, done)| acc | (!done & self.full_mask()));
        let mut bundle = Vec::new();
        for shard in (0..self.p).filter(|&s| needed & (1 << s) != 0) {
            let owner = RankId(shard);
            let contributor = if alive.contains(owner) {
                Some(owner)
            } else {
                alive.successor(owner, self.p)
            };
            if contributor == Some(self.me) {
                bundle.push((shard, self.shard_samples(shard)?));
            }
        }
        if self.job.ft == FtMode::Amft {
            if self.phase > 0 {
                for r in (0..self.p).map(RankId) {
                    amft::release_knn(ctx, r, self.phase - 1);
                }
            }
            if let Some(pred) = alive.predecessor(self.me, self.p) {
                let counts: Vec<usize> = layout[pred.index()].iter().map(|g| g.1).collect();
                let bytes = replica_size(&counts, self.job.k);
                amft::reserve_knn(ctx, pred, self.phase, bytes)?;
                ctx.meter().set_resident(self.me, (bytes + 16) as u64);
            }
        }
        ctx.set_interruptible(true);
        let res = self.ring(ctx, alive, bundle);
        ctx.set_interruptible(false);
        match res {
            Err(e) if e.is_peer_failure() => {}
            other => other?,
        }
        Ok(layout)
    }

    /// Latest replica of `f` this rank holds: (sequence number, payload).
    fn held_replica(&mut self, ctx: &mut RankCtx, f: RankId) -> Result<Option<(u64, Vec<u8>)>> {
        Ok(match self.job.ft {
            FtMode::Amft => amft::read_knn(ctx, f, self.phase)?,
            FtMode::Smft => match smft::read_record(ctx, f)? {
                Some(rec) => Some((rec.seq, smft::read_tree(ctx, f, &rec)?)),
                None => None,
            },
            FtMode::Dft | FtMode::None => None,
        })
    }

    fn read_tests(&mut self, start: usize, count: usize) -> Result<Vec<Sample>> {
        let before = self.test_disk.records_read();
        let points = self.test_disk.read_points(start, count)?;
        self.rstats.disk_reads += self.test_disk.records_read() - before;
        Ok(crate::knn::samples_from(points, start))
    }

    /// Restore the groups of every newly failed rank on the survivors.
    fn recover(&mut self, ctx: &mut RankCtx, failed: RankSet, layout: &Layout) -> Result<()> {
        let me = self.me;
        let p = self.p;
        let alive = RankSet::first(p).minus(ctx.known_dead());
        let survivors: Vec<RankId> = alive.iter().collect();

        let mut held = BTreeMap::new();
        let mut contribution = Vec::new();
        for f in failed.iter() {
            if let Some((seq, payload)) = self.held_replica(ctx, f)? {
                contribution.extend((f.index() as u64).to_le_bytes());
                contribution.extend(seq.to_le_bytes());
                held.insert(f, payload);
            }
        }
        let all = ctx.in_scope("recovery", |ctx| ctx.allgather(contribution))?;
        let mut best: BTreeMap<RankId, (u64, RankId)> = BTreeMap::new();
        for (h, c) in all.iter().enumerate() {
            for e in c.iter().flat_map(|c| c.chunks_exact(16)) {
                let f = RankId(u64::from_le_bytes(e[..8].try_into().unwrap()) as usize);
                let seq = u64::from_le_bytes(e[8..].try_into().unwrap());
                if best.get(&f).is_none_or(|&(s, _)| seq > s) {
                    best.insert(f, (seq, RankId(h)));
                }
            }
        }

        for f in failed.iter() {
            let recovery_rank = match self.job.ft {
                FtMode::Dft => survivors[0],
                _ => best
                    .get(&f)
                    .map(|b| b.1)
                    .unwrap_or_else(|| alive.successor(f, p).expect("a survivor exists")),
            };
            let tag = TAG_PPR | (self.phase as u64) << 16 | f.index() as u64;
            if recovery_rank != me {
                if self.job.recovery == KnnRecovery::Ppr {
                    let raw = ctx.in_scope("recovery", |ctx| ctx.recv(recovery_rank, tag))?;
                    self.adopt(decode_groups(&raw, true)?)?;
                }
                continue;
            }

            let replica = match self.job.ft {
                FtMode::Dft => match self.store.latest(f, KNN_EXT)? {
                    Some(ck) => {
                        self.rstats.checkpoint_reads += 1;
                        Some(ck.payload)
                    }
                    None => None,
                },
                _ => held.remove(&f).filter(|_| best.get(&f).is_some_and(|b| b.1 == me)),
            };
            let mut moved = replica.as_ref().map_or(0, |r| r.len() as u64);
            let reads_before = self.rstats.disk_reads;
            let mut recovered = Vec::new();
            match replica {
                Some(bytes) => {
                    for g in decode_groups(&bytes, false)? {
                        let count = g.queues.queues.len();
                        recovered.push(Group {
                            start: g.start,
                            done: g.done,
                            samples: self.read_tests(g.start, count)?,
                            queues: g.queues.queues,
                        });
                    }
                }
                None => {
                    for &(start, count, _) in &layout[f.index()] {
                        let samples = self.read_tests(start, count)?;
                        recovered.push(Group::fresh(start, samples, self.job.k));
                    }
                }
            }
            let total: usize = recovered.iter().map(Group::count).sum();
            let shares = match self.job.recovery {
                KnnRecovery::Opr => {
                    self.groups.extend(recovered);
                    vec![(me, total)]
                }
                KnnRecovery::Ppr => {
                    let mut shares = Vec::new();
                    for (r, s, c) in ppr_split(total, &survivors) {
                        let piece = slice_groups(&recovered, s, c);
                        shares.push((r, c));
                        if r == me {
                            self.groups.extend(piece);
                        } else {
                            let buf = encode_groups(&piece, f, 0, self.job.k, true);
                            moved += buf.len() as u64;
                            ctx.in_scope("recovery", |ctx| ctx.send(r, tag, buf))?;
                        }
                    }
                    shares
                }
            };
            self.rstats.bytes += moved;
            self.rstats.events.push(RecoveryEvent {
                failed: f,
                recovery_rank: me,
                case: self.job.recovery.name().into(),
                bytes_moved: moved,
                disk_reads: self.rstats.disk_reads - reads_before,
                replayed: total as u64,
                shares,
            });
        }
        Ok(())
    }

    fn adopt(&mut self, states: Vec<GroupState>) -> Result<()> {
        for g in states {
            let samples = g.samples.ok_or_else(|| Error::Run("shipped group without samples".into()))?;
            if samples.len() != g.queues.queues.len() {
                return Err(Error::Run("shipped group size mismatch".into()));
            }
            self.groups.push(Group {
                start: g.start,
                done: g.done,
                samples,
                queues: g.queues.queues,
            });
        }
        Ok(())
    }
}

/// Samples `[s, s + c)` of the concatenation of `groups`, as groups.
fn slice_groups(groups: &[Group], s: usize, c: usize) -> Vec<Group> {
    let mut out = Vec::new();
    let mut at = 0;
    for g in groups {
        let (lo, hi) = (s.max(at), (s + c).min(at + g.count()));
        if lo < hi {
            let (a, b) = (lo - at, hi - at);
            out.push(Group {
                start: g.start + a,
                done: g.done,
                samples: g.samples[a..b].to_vec(),
                queues: g.queues[a..b].to_vec(),
            });
        }
        at += g.count();
    }
    out
}

fn gather_rows(ctx: &mut RankCtx, rows: &[NeighborRow], n_test: usize) -> Result<String> {
    let all = ctx.allgather(format_neighbors(rows).into_bytes())?;
    let mut merged = Vec::with_capacity(n_test);
    for c in all.into_iter().flatten() {
        let text = String::from_utf8(c).map_err(|_| Error::Run("result is not utf-8".into()))?;
        merged.extend(parse_neighbors(&text).map_err(Error::Run)?);
    }
    if merged.len() != n_test {
        return Err(Error::Run(format!("{} of {n_test} test samples answered", merged.len())));
    }
    Ok(format_neighbors(&merged))
}

pub fn run_knn_job(ctx: &mut RankCtx, job: &KnnJob) -> Result<RankReport> {
    let started = Instant::now();
    let me = ctx.rank();
    let p = ctx.size();
    let train_file = DatasetFile::open(&job.train)?;
    let test_file = DatasetFile::open(&job.test)?;
    if train_file.width() != test_file.width() {
        return Err(crate::knn::KnnError::DimMismatch(train_file.width(), test_file.width()).into());
    }
    let train_manifest = partition(train_file.len(), p);
    let test_manifest = partition(test_file.len(), p);
    let (tr_s, tr_c) = train_manifest.range(me);
    let (te_s, te_c) = test_manifest.range(me);
    let own_train = crate::knn::samples_from(train_file.read_points(tr_s, tr_c)?, tr_s);
    let tests = crate::knn::samples_from(test_file.read_points(te_s, te_c)?, te_s);

    if job.ft == FtMode::None {
        let qv = run_knn(ctx, &tests, own_train, job.k, |_, _| Ok::<(), Error>(()))?;
        let output = gather_rows(ctx, &rows_from(&tests, &qv.queues), test_file.len())?;
        return Ok(RankReport {
            output: Some(output),
            total: started.elapsed(),
            ..Default::default()
        });
    }

    let store = DiskStore::new(&job.ckpt_dir).with_read_latency(job.disk_latency);
    match job.ft {
        FtMode::Dft => store.reset(me)?,
        FtMode::Smft => smft::install(ctx),
        _ => {}
    }
    let mut st = Knn {
        job,
        me,
        p,
        train_manifest,
        test_disk: DatasetFile::open(&job.test)?.with_latency(job.disk_latency),
        train_disk: DatasetFile::open(&job.train)?.with_latency(job.disk_latency),
        own_train,
        groups: vec![Group::fresh(te_s, tests, job.k)],
        phase: 0,
        steps_done: 0,
        seq: 0,
        store,
        stats: CkptStats::default(),
        rstats: RecoveryStats::default(),
    };

    loop {
        let dead_before = ctx.known_dead();
        let layout = st.run_phase(ctx)?;
        let dead = ctx.ft_barrier(|_| Ok::<(), Error>(()))?;
        ctx.purge(|t| t & TAG_KIND == TAG_RING);
        let failed = dead.minus(dead_before);
        if failed.is_empty() {
            break;
        }
        let t0 = Instant::now();
        st.recover(ctx, failed, &layout)?;
        st.rstats.time += t0.elapsed();
        st.phase += 1;
    }

    let full = st.full_mask();
    if let Some(g) = st.groups.iter().find(|g| g.done != full) {
        return Err(Error::Run(format!(
            "test samples from {} missed training shards {:#x}",
            g.start,
            full & !g.done
        )));
    }
    let rows: Vec<NeighborRow> = st.groups.iter().flat_map(|g| rows_from(&g.samples, &g.queues)).collect();
    let output = gather_rows(ctx, &rows, test_file.len())?;
    Ok(RankReport {
        output: Some(output),
        ckpt: st.stats,
        recovery: st.rstats,
        total: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(start: usize, n: usize, k: usize) -> Group {
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                id: (start + i) as u64,
                features: vec![i as f64],
            })
            .collect();
        let mut g = Group::fresh(start, samples, k);
        for (i, q) in g.queues.iter_mut().enumerate() {
            q.enqueue(i as f64, 7);
        }
        g.done = 0b101;
        g
    }

    #[test]
    fn replica_size_is_exact() {
        let groups = vec![group(0, 3, 2), group(10, 5, 2)];
        let buf = encode_groups(&groups, RankId(1), 4, 2, false);
        assert_eq!(buf.len(), replica_size(&[3, 5], 2));
        let back = decode_groups(&buf, false).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!((back[1].start, back[1].done), (10, 0b101));
        assert_eq!(back[1].queues.queues, groups[1].queues);
    }

    #[test]
    fn groups_with_samples_roundtrip() {
        let groups = vec![group(4, 2, 3)];
        let back = decode_groups(&encode_groups(&groups, RankId(0), 0, 3, true), true).unwrap();
        assert_eq!(back[0].samples.as_ref().unwrap(), &groups[0].samples);
        assert!(decode_groups(&[1, 0, 0], false).is_err());
    }

    #[test]
    fn slicing_spans_groups() {
        let groups = vec![group(0, 3, 1), group(10, 4, 1)];
        let piece = slice_groups(&groups, 2, 3);
        let ids: Vec<u64> = piece.iter().flat_map(|g| g.samples.iter().map(|s| s.id)).collect();
        assert_eq!(ids, vec![2, 10, 11]);
        assert_eq!(piece[1].start, 10);
        assert!(slice_groups(&groups, 7, 0).is_empty());
    }

    #[test]
    fn bundle_roundtrip() {
        let b = vec![(2, group(0, 2, 1).samples), (5, Vec::new())];
        let back = decode_bundle(&encode_bundle(&b)).unwrap();
        assert_eq!(back, b);
    }
}
