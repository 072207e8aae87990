//! FP-Growth over a partitioned transaction file. Each rank builds a local
//! tree from its shard, checkpointing every `interval` transactions; after
//! the build, survivors recover the shards of failed ranks, the trees are
//! merged along a chain toward the master, and the master mines.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::checkpoint::{
    amft, dft::DiskStore, ring_target, smft, CheckpointKind, CheckpointPolicy, CkptStats, FtMode, MetadataRecord,
    RECORD_BYTES,
};
use crate::dataset::{
    decode_transactions, encode_transaction, failed_slice, partition, DatasetFile, PartitionManifest, Transaction,
};
use crate::error::{Error, Result};
use crate::fabric::{FabricError, Progress, RankCtx, RankId, RankSet};
use crate::fptree::{count_local, format_itemsets, mine, global_frequent, min_support_count, FpTree, ItemOrder};
use crate::pipeline::RankReport;
use crate::recovery::{
    plan_fp_recovery, redistribute, RecoveryEvent, RecoveryPlan, RecoveryStats, TransSource, PLAN_BYTES,
};

const TAG_REDIST: u64 = 0x4650_5200_0000_0000;
const TAG_MERGE: u64 = 0x4650_4d00_0000_0001;
const TREE_EXT: &str = "tree";

#[derive(Clone, Debug)]
pub struct FpJob {
    pub data: PathBuf,
    pub theta: f64,
    pub ft: FtMode,
    pub ckpts: usize,
    pub ckpt_dir: PathBuf,
    /// Simulated delay per record or checkpoint file read during recovery.
    pub disk_latency: Duration,
}

struct Builder<'a> {
    job: &'a FpJob,
    me: RankId,
    trans: Vec<Transaction>,
    bytes: Vec<u8>,
    /// `offsets[i]` is where transaction `i` starts in `bytes`.
    offsets: Vec<usize>,
    order: ItemOrder,
    tree: FpTree,
    policy: CheckpointPolicy,
    processed: usize,
    /// Rank holding this rank's latest in-memory replica.
    holder: Option<RankId>,
    /// Holder of the one-time transaction copy and the fields describing it.
    trans_copy: Option<(RankId, MetadataRecord)>,
    published: usize,
    seq: u64,
    store: DiskStore,
    stats: CkptStats,
}

impl Builder<'_> {
    fn n(&self) -> usize {
        self.trans.len()
    }

    fn remaining(&self) -> &[u8] {
        &self.bytes[self.offsets[self.processed]..]
    }

    fn checkpoint(&mut self, ctx: &mut RankCtx, finished: bool) -> Result<()> {
        if self.job.ft == FtMode::None || self.processed == 0 {
            return Ok(());
        }
        let t0 = Instant::now();
        let res = self.checkpoint_inner(ctx, finished);
        self.stats.time += t0.elapsed();
        res
    }

    fn checkpoint_inner(&mut self, ctx: &mut RankCtx, finished: bool) -> Result<()> {
        let tree = self.tree.serialize();
        self.seq += 1;
        if self.job.ft == FtMode::Dft {
            let ct = (self.processed - 1) as u32;
            self.stats.bytes += self.store.write(self.me, TREE_EXT, self.seq as u32, ct, 0, &tree)?;
            self.stats.taken += 1;
            self.stats.partial += 1;
            return Ok(());
        }
        loop {
            let Some(target) = ring_target(ctx) else {
                self.stats.note("no live checkpoint target; replica invariant degraded".into());
                return Ok(());
            };
            let critical = self.holder.is_some_and(|h| h != target);
            let res = match self.job.ft {
                FtMode::Smft => self.smft(ctx, target, &tree),
                _ => self.amft(ctx, target, &tree, finished),
            };
            match res {
                Ok(kind) => {
                    if kind != CheckpointKind::None {
                        self.holder = Some(target);
                        if critical {
                            self.stats.critical += 1;
                            self.stats
                                .note(format!("critical checkpoint of {} to {target}", self.me));
                        }
                    }
                    return Ok(());
                }
                Err(FabricError::RankDead(_)) => {
                    ctx.poll_faults();
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn record(&self, tree_len: usize) -> MetadataRecord {
        MetadataRecord {
            source: Some(self.me),
            seq: self.seq,
            cfs: tree_len as u64,
            ct: (self.processed - 1) as u64,
            ..Default::default()
        }
    }

    fn smft(&mut self, ctx: &mut RankCtx, target: RankId, tree: &[u8]) -> Result<CheckpointKind, FabricError> {
        let mut rec = self.record(tree.len());
        let rem_len = self.remaining().len();
        let copy_here = self.trans_copy.filter(|(h, _)| *h == target).map(|(_, r)| r);
        // the transaction copy goes out once, when it is no larger than what
        // has already been processed
        let send_trans = copy_here.is_none() && rem_len > 0 && self.offsets[self.processed] >= rem_len;
        if let Some(c) = copy_here {
            (rec.cf_ptr, rec.trans_bytes, rec.sct, rec.nct) = (c.cf_ptr, c.trans_bytes, c.sct, c.nct);
        }
        if send_trans {
            rec.cf_ptr = rem_len as u64;
            rec.trans_bytes = rem_len as u64;
            rec.sct = self.processed as u64;
            rec.nct = (self.n() - self.processed) as u64;
        }
        let moved = smft::checkpoint(ctx, target, tree, send_trans.then(|| self.remaining()), rec)?;
        self.stats.bytes += moved;
        self.stats.taken += 1;
        if send_trans {
            self.trans_copy = Some((target, rec));
            self.stats.complete += 1;
            Ok(CheckpointKind::Complete)
        } else {
            self.stats.partial += 1;
            Ok(CheckpointKind::Partial)
        }
    }

    fn amft(&mut self, ctx: &mut RankCtx, target: RankId, tree: &[u8], finished: bool) -> Result<CheckpointKind, FabricError> {
        let epoch = if finished {
            amft::FINISHED
        } else {
            self.policy.epoch_of(self.processed) as u64
        };
        let payload = amft::Payload {
            tree,
            remaining: self.remaining(),
            remaining_count: (self.n() - self.processed) as u64,
            remaining_start: self.processed as u64,
            seq: self.seq,
            round: 0,
        };
        let out = amft::checkpoint(ctx, target, epoch, &payload)?;
        self.stats.bytes += out.bytes;
        match out.kind {
            CheckpointKind::Complete => self.stats.complete += 1,
            CheckpointKind::Partial => self.stats.partial += 1,
            CheckpointKind::None => self.stats.skipped += 1,
        }
        if out.kind != CheckpointKind::None {
            self.stats.taken += 1;
        }
        Ok(out.kind)
    }

    /// Runs inside the fault-tolerant barrier: re-replicate if our holder died.
    fn on_fault(&mut self, ctx: &mut RankCtx) -> Result<()> {
        let lost = self.holder.is_some_and(|h| !ctx.alive().contains(h));
        if matches!(self.job.ft, FtMode::Smft | FtMode::Amft) && lost {
            ctx.poll_faults();
            self.checkpoint(ctx, true)?;
        }
        Ok(())
    }
}

pub fn run_fp(ctx: &mut RankCtx, job: &FpJob) -> Result<RankReport> {
    let started = Instant::now();
    let me = ctx.rank();
    let p = ctx.size();
    let loader = DatasetFile::open(&job.data)?;
    let disk = DatasetFile::open(&job.data)?.with_latency(job.disk_latency);
    let total = loader.len();
    let manifest = partition(total, p);
    let (start, n) = manifest.range(me);
    let trans = loader.read_range(start, n)?;

    let mut bytes = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    for t in &trans {
        offsets.push(bytes.len());
        encode_transaction(t, &mut bytes);
    }
    offsets.push(bytes.len());
    ctx.meter().set_initial_shard(me, bytes.len() as u64);

    let local = count_local(&trans, loader.width());
    let order = global_frequent(ctx, &local, job.theta, total)?;
    let store = DiskStore::new(&job.ckpt_dir).with_read_latency(job.disk_latency);
    match job.ft {
        FtMode::Dft => store.reset(me)?,
        FtMode::Smft => smft::install(ctx),
        FtMode::Amft => amft::expose(ctx, &bytes)?,
        FtMode::None => {}
    }
    if job.ft == FtMode::Amft {
        // sources poll their target's control window right away
        ctx.barrier()?;
    }

    let mut b = Builder {
        job,
        me,
        tree: FpTree::new(&order),
        order,
        trans,
        bytes,
        offsets,
        policy: CheckpointPolicy::new(n, job.ckpts),
        processed: 0,
        holder: None,
        trans_copy: None,
        published: 0,
        seq: 0,
        store,
        stats: CkptStats::default(),
    };

    for i in 0..n {
        ctx.fault_point(Progress::Transactions { done: i, total: n })?;
        b.tree.insert(&b.trans[i], &b.order);
        b.processed = i + 1;
        let unprocessed = b.bytes.len() - b.offsets[b.processed];
        ctx.meter().set_unprocessed(me, unprocessed as u64);
        if job.ft == FtMode::Smft {
            ctx.run_progress()?;
        }
        if b.policy.should_checkpoint(b.processed) {
            if job.ft == FtMode::Amft {
                b.published = b.policy.epoch_of(b.processed);
                amft::publish_epoch(ctx, b.published, b.offsets[b.processed] as u64)?;
            }
            ctx.poll_faults();
            b.checkpoint(ctx, false)?;
        }
    }
    ctx.fault_point(Progress::Transactions { done: n, total: n })?;
    if job.ft == FtMode::Amft {
        amft::publish_finished(ctx, b.published, b.bytes.len() as u64)?;
    }

    let failed = ctx.ft_barrier(|ctx| b.on_fault(ctx))?;
    let mut rstats = RecoveryStats::default();
    if !failed.is_empty() {
        let t0 = Instant::now();
        recover(ctx, &mut b, &disk, &manifest, failed, &mut rstats)?;
        rstats.time = t0.elapsed();
    }

    let output = match merge_to_master(ctx, std::mem::replace(&mut b.tree, FpTree::new(&b.order)))? {
        Some(tree) => {
            if tree.absorbed() != total as u64 {
                return Err(Error::Run(format!(
                    "global tree absorbed {} of {total} transactions",
                    tree.absorbed()
                )));
            }
            let sets = mine(&tree, min_support_count(job.theta, total));
            Some(format_itemsets(&sets).into_bytes())
        }
        None => None,
    };
    let master = ctx.master();
    let text = ctx.bcast(master, output)?;
    Ok(RankReport {
        output: Some(String::from_utf8(text).map_err(|_| Error::Run("result is not utf-8".into()))?),
        ckpt: b.stats,
        recovery: rstats,
        total: started.elapsed(),
    })
}

fn held_records(ctx: &mut RankCtx, ft: FtMode, failed: RankSet) -> Result<Vec<MetadataRecord>> {
    Ok(match ft {
        FtMode::Smft => {
            let mut out = Vec::new();
            for f in failed.iter() {
                out.extend(smft::read_record(ctx, f)?);
            }
            out
        }
        FtMode::Amft => amft::held_records(ctx)?
            .into_iter()
            .filter(|r| r.source.is_some_and(|s| failed.contains(s)))
            .collect(),
        FtMode::Dft | FtMode::None => Vec::new(),
    })
}

fn release_all(ctx: &mut RankCtx, ft: FtMode) -> Result<()> {
    match ft {
        FtMode::Smft => {
            let me = ctx.rank();
            for r in (0..ctx.size()).map(RankId).filter(|&r| r != me) {
                smft::release(ctx, r)?;
            }
        }
        FtMode::Amft => {
            for rec in amft::held_records(ctx)? {
                amft::release(ctx, rec.source.unwrap(), false)?;
            }
        }
        FtMode::Dft | FtMode::None => {}
    }
    Ok(())
}

/// Recover every failed shard: the recovery rank merges the replicated tree,
/// then the transactions after the checkpoint are re-inserted by all
/// survivors (from the replica's memory copy or from disk).
fn recover(
    ctx: &mut RankCtx,
    b: &mut Builder<'_>,
    disk: &DatasetFile,
    manifest: &PartitionManifest,
    failed: RankSet,
    rstats: &mut RecoveryStats,
) -> Result<()> {
    let me = ctx.rank();
    let p = ctx.size();
    let ft = b.job.ft;
    let alive = RankSet::first(p).minus(failed);
    let survivors: Vec<RankId> = alive.iter().collect();

    let mine_held = held_records(ctx, ft, failed)?;
    let all = ctx.in_scope("recovery", |ctx| {
        ctx.allgather(mine_held.iter().flat_map(|r| r.encode()).collect())
    })?;
    // latest replica of each failed rank, lowest holder on ties
    let mut best: BTreeMap<RankId, (u64, RankId)> = BTreeMap::new();
    for (h, c) in all.iter().enumerate() {
        for rec in c.iter().flat_map(|c| c.chunks_exact(RECORD_BYTES)).map(MetadataRecord::decode) {
            let f = rec.source.expect("held record names its source");
            if best.get(&f).is_none_or(|&(seq, _)| rec.seq > seq) {
                best.insert(f, (rec.seq, RankId(h)));
            }
        }
    }

    let mut plans_local = Vec::new();
    let mut memory: BTreeMap<RankId, Vec<Transaction>> = BTreeMap::new();
    for f in failed.iter() {
        let recovery_rank = match ft {
            FtMode::Dft => survivors[0],
            _ => best
                .get(&f)
                .map(|b| b.1)
                .unwrap_or_else(|| alive.successor(f, p).expect("a survivor exists")),
        };
        if recovery_rank != me {
            continue;
        }
        let (record, tree_bytes, trans_bytes) = load_replica(ctx, b, f, &mine_held, rstats)?;
        let plan = plan_fp_recovery(f, me, record.as_ref());
        let mut moved = 0u64;
        if plan.case != crate::recovery::FpCase::NoCheckpoint {
            let bytes = tree_bytes.unwrap_or_default();
            moved += bytes.len() as u64;
            let t = FpTree::deserialize(&bytes)?;
            if t.absorbed() != plan.replay_from {
                return Err(Error::CorruptCheckpoint(format!(
                    "replica of {f} absorbed {} transactions, metadata says {}",
                    t.absorbed(),
                    plan.replay_from
                )));
            }
            b.tree.merge(&t)?;
        }
        if plan.trans_source == TransSource::Memory {
            let rec = record.expect("memory plan has a record");
            let raw = trans_bytes.unwrap_or_default();
            moved += raw.len() as u64;
            let copy = decode_transactions(&raw)
                .filter(|c| c.len() as u64 == rec.nct)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("transaction copy of {f}")))?;
            let skip = (plan.replay_from - rec.sct) as usize;
            memory.insert(f, copy[skip..].to_vec());
        }
        let (_, n_f) = manifest.range(f);
        let replayed = n_f as u64 - plan.replay_from;
        rstats.events.push(RecoveryEvent {
            failed: f,
            recovery_rank: me,
            case: plan.case.name().into(),
            bytes_moved: moved,
            disk_reads: if plan.trans_source == TransSource::Disk { replayed } else { 0 },
            replayed,
            shares: Vec::new(),
        });
        rstats.bytes += moved;
        plans_local.extend(plan.encode());
    }
    // every surviving rank has finished its shard, so no replica is needed
    // past this point
    release_all(ctx, ft)?;

    let all = ctx.in_scope("recovery", |ctx| ctx.allgather(plans_local))?;
    let mut plans: Vec<RecoveryPlan> = all
        .iter()
        .flatten()
        .flat_map(|c| c.chunks_exact(PLAN_BYTES))
        .map(|c| RecoveryPlan::decode(c).ok_or_else(|| Error::Run("malformed recovery plan".into())))
        .collect::<Result<_>>()?;
    plans.sort_by_key(|p| p.failed);

    let mut received: Vec<Transaction> = Vec::new();
    for plan in &plans {
        let (fs, fn_) = manifest.range(plan.failed);
        let from = plan.replay_from as usize;
        match plan.trans_source {
            TransSource::Disk => {
                if let Some((s, c)) = failed_slice(fs + from, fn_ - from, &survivors, me) {
                    let before = disk.records_read();
                    received.extend(disk.read_range(s, c)?);
                    rstats.disk_reads += disk.records_read() - before;
                }
            }
            TransSource::Memory => {
                let tag = TAG_REDIST | plan.failed.index() as u64;
                if plan.recovery_rank == me {
                    let mut map = redistribute(memory.remove(&plan.failed).unwrap_or_default(), &survivors);
                    for &r in &survivors {
                        let items = map.remove(&r).unwrap_or_default();
                        if r == me {
                            received.extend(items);
                        } else {
                            let mut buf = Vec::new();
                            for t in &items {
                                encode_transaction(t, &mut buf);
                            }
                            rstats.bytes += buf.len() as u64;
                            ctx.in_scope("recovery", |ctx| ctx.send(r, tag, buf))?;
                        }
                    }
                } else {
                    let raw = ctx.in_scope("recovery", |ctx| ctx.recv(plan.recovery_rank, tag))?;
                    received.extend(
                        decode_transactions(&raw).ok_or_else(|| Error::Run("malformed redistribution".into()))?,
                    );
                }
            }
        }
    }

    let mut pending: u64 = received.iter().map(|t| crate::dataset::transaction_bytes(t) as u64).sum();
    ctx.meter().set_unprocessed(me, pending);
    for t in &received {
        b.tree.insert(t, &b.order);
        pending -= crate::dataset::transaction_bytes(t) as u64;
        ctx.meter().set_unprocessed(me, pending);
    }
    Ok(())
}

type Replica = (Option<MetadataRecord>, Option<Vec<u8>>, Option<Vec<u8>>);

/// Record, tree and transaction copy of `f` as seen by its recovery rank.
fn load_replica(
    ctx: &mut RankCtx,
    b: &Builder<'_>,
    f: RankId,
    held: &[MetadataRecord],
    rstats: &mut RecoveryStats,
) -> Result<Replica> {
    match b.job.ft {
        FtMode::Dft => {
            let Some(ck) = b.store.latest(f, TREE_EXT)? else {
                return Ok((None, None, None));
            };
            rstats.checkpoint_reads += 1;
            let rec = MetadataRecord {
                source: Some(f),
                seq: ck.epoch as u64,
                cfs: ck.payload.len() as u64,
                ct: ck.ct as u64,
                ..Default::default()
            };
            Ok((Some(rec), Some(ck.payload), None))
        }
        FtMode::Smft => {
            let Some(rec) = smft::read_record(ctx, f)? else {
                return Ok((None, None, None));
            };
            let tree = smft::read_tree(ctx, f, &rec)?;
            let trans = (rec.nct > 0).then(|| smft::read_trans(ctx, f, &rec)).transpose()?;
            Ok((Some(rec), Some(tree), trans))
        }
        FtMode::Amft => {
            let Some(rec) = held.iter().find(|r| r.source == Some(f)).copied() else {
                return Ok((None, None, None));
            };
            let tree = amft::read_tree(ctx, &rec)?;
            let trans = (rec.nct > 0).then(|| amft::read_trans(ctx, &rec)).transpose()?;
            Ok((Some(rec), Some(tree), trans))
        }
        FtMode::None => Ok((None, None, None)),
    }
}

/// Chain merge over the alive ranks in rank order; the master ends up with
/// the global tree.
fn merge_to_master(ctx: &mut RankCtx, mut tree: FpTree) -> Result<Option<FpTree>> {
    ctx.in_scope("merge", |ctx| {
        let me = ctx.rank();
        let alive: Vec<RankId> = RankSet::first(ctx.size()).minus(ctx.known_dead()).iter().collect();
        let pos = alive.iter().position(|&r| r == me).expect("caller is alive");
        if let Some(&next) = alive.get(pos + 1) {
            let raw = ctx.recv(next, TAG_MERGE)?;
            tree.merge(&FpTree::deserialize(&raw)?)?;
        }
        if pos > 0 {
            ctx.send(alive[pos - 1], TAG_MERGE, tree.serialize())?;
            Ok(None)
        } else {
            Ok(Some(tree))
        }
    })
}
