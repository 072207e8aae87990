//! Asynchronous one-sided replicas kept inside the holder's transaction
//! window. The holder only publishes how much of its window it has consumed;
//! the source decides, reserves and writes with fetch-and-add, get and put.
//!
//! Control window layout (u64 cells):
//!
//! ```text
//! 0          epoch      holder's last published checkpoint epoch, or FINISHED
//! 8          lock       reservation guard, one writer at a time
//! 16         released   processed bytes at epoch e, e = 0..=MAX_EPOCHS
//! 536        slots      SLOTS metadata records
//! ```

use crate::checkpoint::{amft_decide, CheckpointKind, MetadataRecord, RECORD_BYTES};
use crate::fabric::{FabricError, RankCtx, RankId, Window, WindowKind};

pub const MAX_EPOCHS: usize = 64;
pub const SLOTS: usize = 4;
pub const FINISHED: u64 = u64::MAX;

const EPOCH_OFF: usize = 0;
const LOCK_OFF: usize = 8;
const RELEASED_OFF: usize = 16;
const SLOTS_OFF: usize = RELEASED_OFF + 8 * (MAX_EPOCHS + 1);

/// Bytes of the control window; the fixed per-rank metadata cost.
pub const CONTROL_BYTES: usize = SLOTS_OFF + SLOTS * RECORD_BYTES;

pub const TRANS_WINDOW: Window = Window::named("amft.trans");
pub const CONTROL_WINDOW: Window = Window::named("amft.meta");

fn released_off(epoch: usize) -> usize {
    RELEASED_OFF + 8 * epoch.min(MAX_EPOCHS)
}

fn slot_off(i: usize) -> usize {
    SLOTS_OFF + i * RECORD_BYTES
}

/// Holder side: expose the transaction window (initialized with the encoded
/// shard) and the control window.
pub fn expose(ctx: &mut RankCtx, shard: &[u8]) -> Result<(), FabricError> {
    let me = ctx.rank();
    ctx.in_scope("ckpt.amft.publish", |ctx| {
        ctx.expose(TRANS_WINDOW, shard.len(), WindowKind::Static)?;
        ctx.put(TRANS_WINDOW, me, 0, shard)?;
        ctx.expose(CONTROL_WINDOW, CONTROL_BYTES, WindowKind::Static)
    })
}

/// Holder side: announce that `released` bytes of the window are processed
/// as of checkpoint epoch `epoch`.
pub fn publish_epoch(ctx: &mut RankCtx, epoch: usize, released: u64) -> Result<(), FabricError> {
    let me = ctx.rank();
    ctx.in_scope("ckpt.amft.publish", |ctx| {
        ctx.put(CONTROL_WINDOW, me, released_off(epoch), &released.to_le_bytes())?;
        ctx.put(CONTROL_WINDOW, me, EPOCH_OFF, &(epoch as u64).to_le_bytes())
    })
}

/// Holder side: the whole shard is processed. Epochs past `last_epoch` all
/// report the full window.
pub fn publish_finished(ctx: &mut RankCtx, last_epoch: usize, released: u64) -> Result<(), FabricError> {
    let me = ctx.rank();
    ctx.in_scope("ckpt.amft.publish", |ctx| {
        for e in last_epoch + 1..=MAX_EPOCHS {
            ctx.put(CONTROL_WINDOW, me, released_off(e), &released.to_le_bytes())?;
        }
        ctx.put(CONTROL_WINDOW, me, EPOCH_OFF, &FINISHED.to_le_bytes())
    })
}

fn read_slots(ctx: &mut RankCtx, target: RankId) -> Result<Vec<MetadataRecord>, FabricError> {
    let raw = ctx.get(CONTROL_WINDOW, target, SLOTS_OFF, SLOTS * RECORD_BYTES)?;
    Ok(raw.chunks_exact(RECORD_BYTES).map(MetadataRecord::decode).collect())
}

fn regions(slots: &[MetadataRecord]) -> Vec<(u64, u64)> {
    let mut r: Vec<(u64, u64)> = slots
        .iter()
        .filter(|s| s.source.is_some())
        .flat_map(|s| [s.trans_region(), s.tree_region()])
        .flatten()
        .collect();
    r.sort_unstable();
    r
}

fn resident(slots: &[MetadataRecord]) -> u64 {
    regions(slots).iter().map(|r| r.1).sum()
}

/// Free gaps of `[0, limit)` not covered by `used` (sorted by start).
fn gaps(used: &[(u64, u64)], limit: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut at = 0u64;
    for &(start, len) in used {
        if start > at {
            out.push((at, start.min(limit).saturating_sub(at)));
        }
        at = at.max(start + len);
    }
    if limit > at {
        out.push((at, limit - at));
    }
    out.retain(|g| g.1 > 0);
    out
}

/// What the source wants to save.
pub struct Payload<'a> {
    pub tree: &'a [u8],
    /// Encoded not-yet-processed transactions.
    pub remaining: &'a [u8],
    pub remaining_count: u64,
    /// Shard-relative index of the first remaining transaction.
    pub remaining_start: u64,
    pub seq: u64,
    pub round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub kind: CheckpointKind,
    pub bytes: u64,
    /// Bytes of the holder's window in use after this checkpoint.
    pub resident: u64,
}

/// Source side. Waits until the holder has published `epoch` (or finished),
/// then decides and writes using only one-sided operations.
pub fn checkpoint(ctx: &mut RankCtx, target: RankId, epoch: u64, payload: &Payload<'_>) -> Result<Outcome, FabricError> {
    ctx.in_scope("ckpt.amft", |ctx| {
        ctx.wait_cell(CONTROL_WINDOW, target, EPOCH_OFF, |v| v >= epoch)?;
        // RELEASED[epoch] is final once the epoch is published, and a finished
        // holder backfills every later epoch, so the value does not depend on
        // how far ahead the holder has run
        let index = if epoch == FINISHED {
            MAX_EPOCHS
        } else {
            (epoch as usize).min(MAX_EPOCHS)
        };
        let released = ctx.fetch_and_add(CONTROL_WINDOW, target, released_off(index), 0)?;

        let skip = Outcome {
            kind: CheckpointKind::None,
            bytes: 0,
            resident: 0,
        };
        // the guard is only ever held across puts and gets, never a wait
        while ctx.fetch_and_add(CONTROL_WINDOW, target, LOCK_OFF, 1)? != 0 {
            ctx.fetch_and_add(CONTROL_WINDOW, target, LOCK_OFF, -1)?;
            ctx.wait_cell(CONTROL_WINDOW, target, LOCK_OFF, |v| v == 0)?;
        }
        let result = write_locked(ctx, target, released, payload);
        ctx.fetch_and_add(CONTROL_WINDOW, target, LOCK_OFF, -1)?;
        result.map(|o| o.unwrap_or(skip))
    })
}

fn write_locked(
    ctx: &mut RankCtx,
    target: RankId,
    released: u64,
    payload: &Payload<'_>,
) -> Result<Option<Outcome>, FabricError> {
    let me = ctx.rank();
    let mut slots = read_slots(ctx, target)?;
    let Some(slot) = slots
        .iter()
        .position(|s| s.source == Some(me))
        .or_else(|| slots.iter().position(|s| s.source.is_none()))
    else {
        return Ok(None);
    };
    let old = slots[slot];
    let has_copy = old.source == Some(me) && old.nct > 0;
    let tree_len = payload.tree.len() as u64;
    let rem_len = payload.remaining.len() as u64;
    // the previous tree is overwritten in place: a fail-stop fault cannot
    // land between the puts below
    let mut others = slots.clone();
    others[slot].cfs = 0;
    let free = gaps(&regions(&others), released);
    let largest = free.iter().map(|g| g.1).max().unwrap_or(0);
    let done = has_copy || payload.remaining_count == 0;

    let mut rec = if has_copy { old } else { MetadataRecord::default() };
    rec.source = Some(me);
    rec.seq = payload.seq;
    rec.ls_ptr = released;
    rec.round = payload.round;
    rec.cfs = tree_len;
    rec.ct = payload.remaining_start.saturating_sub(1);
    let mut moved = 0u64;
    let kind = amft_decide(largest, tree_len, rem_len, done);
    match kind {
        CheckpointKind::None => return Ok(None),
        CheckpointKind::Complete => {
            let base = free.iter().find(|g| g.1 >= tree_len + rem_len).unwrap().0;
            ctx.put(TRANS_WINDOW, target, base as usize, payload.remaining)?;
            rec.cf_ptr = base + rem_len;
            rec.trans_bytes = rem_len;
            rec.sct = payload.remaining_start;
            rec.nct = payload.remaining_count;
            rec.tree_ptr = base + rem_len;
            moved += rem_len;
        }
        CheckpointKind::Partial => {
            rec.tree_ptr = free.iter().find(|g| g.1 >= tree_len).unwrap().0;
        }
    }
    ctx.put(TRANS_WINDOW, target, rec.tree_ptr as usize, payload.tree)?;
    ctx.put(CONTROL_WINDOW, target, slot_off(slot), &rec.encode())?;
    moved += tree_len + RECORD_BYTES as u64;
    slots[slot] = rec;
    let resident = resident(&slots);
    ctx.meter().set_resident(target, resident);
    Ok(Some(Outcome {
        kind,
        bytes: moved,
        resident,
    }))
}

/// Holder side: records this rank holds, by source.
pub fn held_records(ctx: &mut RankCtx) -> Result<Vec<MetadataRecord>, FabricError> {
    let me = ctx.rank();
    Ok(read_slots(ctx, me)?.into_iter().filter(|s| s.source.is_some()).collect())
}

pub fn read_tree(ctx: &mut RankCtx, rec: &MetadataRecord) -> Result<Vec<u8>, FabricError> {
    let me = ctx.rank();
    ctx.get(TRANS_WINDOW, me, rec.tree_ptr as usize, rec.cfs as usize)
}

pub fn read_trans(ctx: &mut RankCtx, rec: &MetadataRecord) -> Result<Vec<u8>, FabricError> {
    let me = ctx.rank();
    let (start, len) = rec.trans_region().unwrap_or((0, 0));
    ctx.get(TRANS_WINDOW, me, start as usize, len as usize)
}

/// Holder side: drop the replica of `src`, or only its transaction copy.
pub fn release(ctx: &mut RankCtx, src: RankId, trans_only: bool) -> Result<(), FabricError> {
    let me = ctx.rank();
    let mut slots = read_slots(ctx, me)?;
    for (i, s) in slots.iter_mut().enumerate() {
        if s.source != Some(src) {
            continue;
        }
        if trans_only {
            s.cf_ptr = 0;
            s.trans_bytes = 0;
            s.sct = 0;
            s.nct = 0;
        } else {
            *s = MetadataRecord::default();
        }
        ctx.put(CONTROL_WINDOW, me, slot_off(i), &s.encode())?;
    }
    ctx.meter().set_resident(me, resident(&slots));
    Ok(())
}

const KNN_WINDOW: &str = "amft.knn";
const KNN_HEADER: usize = 16;

fn knn_window(src: RankId, phase: u32) -> Window {
    Window::new(KNN_WINDOW, src.index() as u32, phase)
}

/// Holder side: reserve space for the predecessor's queue vector for this phase.
pub fn reserve_knn(ctx: &mut RankCtx, src: RankId, phase: u32, bytes: usize) -> Result<(), FabricError> {
    ctx.in_scope("ckpt.amft.publish", |ctx| {
        ctx.expose(knn_window(src, phase), KNN_HEADER + bytes, WindowKind::Static)
    })
}

pub fn release_knn(ctx: &mut RankCtx, src: RankId, phase: u32) {
    ctx.release(knn_window(src, phase));
}

/// Source side: overwrite the reserved slot on `target`.
pub fn checkpoint_knn(ctx: &mut RankCtx, target: RankId, phase: u32, seq: u64, payload: &[u8]) -> Result<u64, FabricError> {
    ctx.in_scope("ckpt.amft", |ctx| {
        let win = knn_window(ctx.rank(), phase);
        ctx.wait_exposed(win, target, KNN_HEADER + payload.len())?;
        ctx.put(win, target, KNN_HEADER, payload)?;
        let mut header = [0u8; KNN_HEADER];
        header[..8].copy_from_slice(&seq.to_le_bytes());
        header[8..].copy_from_slice(&(payload.len() as u64).to_le_bytes());
        ctx.put(win, target, 0, &header)?;
        Ok((KNN_HEADER + payload.len()) as u64)
    })
}

/// Holder side: latest queue vector left by `src` this phase, with its sequence number.
pub fn read_knn(ctx: &mut RankCtx, src: RankId, phase: u32) -> Result<Option<(u64, Vec<u8>)>, FabricError> {
    let me = ctx.rank();
    let win = knn_window(src, phase);
    if ctx.capacity(win, me)?.is_none() {
        return Ok(None);
    }
    let header = ctx.get(win, me, 0, KNN_HEADER)?;
    let seq = u64::from_le_bytes(header[..8].try_into().unwrap());
    let len = u64::from_le_bytes(header[8..].try_into().unwrap()) as usize;
    if seq == 0 {
        return Ok(None);
    }
    Ok(Some((seq, ctx.get(win, me, KNN_HEADER, len)?)))
}
