//! Synchronous in-memory replicas. The source announces the payload size,
//! the holder grows its per-source dynamic windows and answers, and only then
//! does the source put the payload and the metadata record.

use crate::checkpoint::{MetadataRecord, RECORD_BYTES};
use crate::error::Result;
use crate::fabric::{FabricError, RankCtx, RankId, Window, WindowKind};

const TAG_SIZE: u64 = 0x534d_4654_0001;
// replies carry the request's sequence number so a stale reply from an
// abandoned handshake is never mistaken for the current one
const TAG_ADDR: u64 = 0x5300_0000_0000_0000;
const KEEP: u64 = u64::MAX;

pub fn tree_window(src: RankId) -> Window {
    Window::new("smft.tree", src.index() as u32, 0)
}

pub fn trans_window(src: RankId) -> Window {
    Window::new("smft.trans", src.index() as u32, 0)
}

pub fn meta_window(src: RankId) -> Window {
    Window::new("smft.meta", src.index() as u32, 0)
}

/// Holder side: answer pending size announcements. Runs from the fabric's
/// progress hook, so the holder serves requests whenever it blocks.
pub fn serve(ctx: &mut RankCtx) -> Result<(), FabricError> {
    ctx.in_scope("ckpt.smft.serve", |ctx| {
        while let Some((src, msg)) = ctx.try_recv_any(TAG_SIZE)? {
            let field = |i: usize| u64::from_le_bytes(msg[i * 8..i * 8 + 8].try_into().unwrap());
            let (tree_len, trans_len, seq) = (field(0), field(1), field(2));
            let me = ctx.rank();
            if ctx.capacity(meta_window(src), me)?.is_none() {
                ctx.expose(tree_window(src), 0, WindowKind::Dynamic)?;
                ctx.expose(trans_window(src), 0, WindowKind::Dynamic)?;
                ctx.expose(meta_window(src), RECORD_BYTES, WindowKind::Static)?;
            }
            // grow only: a late request from an aborted handshake must not
            // truncate a payload that a newer record still describes
            let held = ctx.capacity(tree_window(src), me)?.unwrap_or(0);
            ctx.resize(tree_window(src), held.max(tree_len as usize))?;
            if trans_len != KEEP {
                ctx.resize(trans_window(src), trans_len as usize)?;
            }
            update_meter(ctx)?;
            match ctx.send(src, TAG_ADDR | seq, Vec::new()) {
                Ok(()) | Err(FabricError::RankDead(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    })
}

fn update_meter(ctx: &mut RankCtx) -> Result<(), FabricError> {
    let me = ctx.rank();
    let mut total = 0u64;
    for r in (0..ctx.size()).map(RankId) {
        for w in [tree_window(r), trans_window(r)] {
            total += ctx.capacity(w, me)?.unwrap_or(0) as u64;
        }
    }
    ctx.meter().set_resident(me, total);
    Ok(())
}

pub fn install(ctx: &mut RankCtx) {
    ctx.set_progress_hook(Some(Box::new(serve)));
}

/// Source side. `trans` is written only when given; otherwise the holder
/// keeps whatever transactions it already has. `record.seq` must be unique
/// per source. Returns bytes moved.
pub fn checkpoint(
    ctx: &mut RankCtx,
    target: RankId,
    tree: &[u8],
    trans: Option<&[u8]>,
    record: MetadataRecord,
) -> Result<u64, FabricError> {
    ctx.in_scope("ckpt.smft", |ctx| {
        let mut size = Vec::with_capacity(24);
        size.extend_from_slice(&(tree.len() as u64).to_le_bytes());
        size.extend_from_slice(&trans.map_or(KEEP, |t| t.len() as u64).to_le_bytes());
        size.extend_from_slice(&record.seq.to_le_bytes());
        ctx.send(target, TAG_SIZE, size)?;
        ctx.recv(target, TAG_ADDR | record.seq)?;
        let me = ctx.rank();
        ctx.put(tree_window(me), target, 0, tree)?;
        let mut moved = tree.len() + RECORD_BYTES;
        if let Some(t) = trans {
            ctx.put(trans_window(me), target, 0, t)?;
            moved += t.len();
        }
        ctx.put(meta_window(me), target, 0, &record.encode())?;
        Ok(moved as u64)
    })
}

/// Holder side: the record left by `src`, if any.
pub fn read_record(ctx: &mut RankCtx, src: RankId) -> Result<Option<MetadataRecord>, FabricError> {
    let me = ctx.rank();
    if ctx.capacity(meta_window(src), me)?.is_none() {
        return Ok(None);
    }
    let rec = MetadataRecord::decode(&ctx.get(meta_window(src), me, 0, RECORD_BYTES)?);
    Ok(rec.source.map(|_| rec))
}

pub fn read_tree(ctx: &mut RankCtx, src: RankId, rec: &MetadataRecord) -> Result<Vec<u8>, FabricError> {
    let me = ctx.rank();
    ctx.get(tree_window(src), me, 0, rec.cfs as usize)
}

pub fn read_trans(ctx: &mut RankCtx, src: RankId, rec: &MetadataRecord) -> Result<Vec<u8>, FabricError> {
    let me = ctx.rank();
    ctx.get(trans_window(src), me, 0, rec.trans_bytes as usize)
}

/// Holder side: drop everything kept for `src`.
pub fn release(ctx: &mut RankCtx, src: RankId) -> Result<(), FabricError> {
    for w in [tree_window(src), trans_window(src), meta_window(src)] {
        ctx.release(w);
    }
    update_meter(ctx)
}

/// Holder side: drop the transaction copy kept for `src`.
pub fn release_trans(ctx: &mut RankCtx, src: RankId) -> Result<(), FabricError> {
    let me = ctx.rank();
    if ctx.capacity(trans_window(src), me)?.is_some() {
        ctx.resize(trans_window(src), 0)?;
    }
    update_meter(ctx)
}
