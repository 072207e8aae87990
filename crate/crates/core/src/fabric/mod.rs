//! In-process emulation of a cluster of ranks.
//!
//! Every rank runs on its own thread and talks to the others only through a
//! [`RankCtx`]: one-sided windows (put/get/fetch-and-add), tagged two-sided
//! messages, and collectives over the alive set. Ranks die only at explicit
//! fault points, and death is fail-stop: the rank's windows and mailbox are
//! dropped and every later operation that targets it returns
//! [`FabricError::RankDead`].

pub mod fault;
pub mod meter;
pub mod trace;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

pub use fault::{FaultEvent, FaultSchedule, Progress, Trigger};
pub use meter::{SpaceMeter, SpaceSample};
pub use trace::{Op, TraceEvent};

/// Upper bound on world size; rank sets are 64-bit masks.
pub const MAX_RANKS: usize = 64;

const WAIT_SLICE: Duration = Duration::from_millis(2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankId(pub usize);

impl RankId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Set of ranks as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RankSet(u64);

impl RankSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn first(p: usize) -> Self {
        if p >= 64 {
            Self(u64::MAX)
        } else {
            Self((1u64 << p) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, r: RankId) -> bool {
        r.0 < 64 && self.0 & (1 << r.0) != 0
    }

    pub fn insert(&mut self, r: RankId) {
        self.0 |= 1 << r.0;
    }

    pub fn remove(&mut self, r: RankId) {
        self.0 &= !(1 << r.0);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn minus(self, other: RankSet) -> RankSet {
        RankSet(self.0 & !other.0)
    }

    pub fn union(self, other: RankSet) -> RankSet {
        RankSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = RankId> {
        (0..64).filter(move |i| self.0 & (1 << i) != 0).map(RankId)
    }

    pub fn lowest(self) -> Option<RankId> {
        (self.0 != 0).then(|| RankId(self.0.trailing_zeros() as usize))
    }

    /// Next member after `r` in cyclic order, skipping `r` itself.
    pub fn successor(self, r: RankId, p: usize) -> Option<RankId> {
        (1..p).map(|d| RankId((r.0 + d) % p)).find(|&x| self.contains(x))
    }

    /// Previous member before `r` in cyclic order, skipping `r` itself.
    pub fn predecessor(self, r: RankId, p: usize) -> Option<RankId> {
        (1..p).map(|d| RankId((r.0 + p - d) % p)).find(|&x| self.contains(x))
    }
}

impl FromIterator<RankId> for RankSet {
    fn from_iter<I: IntoIterator<Item = RankId>>(iter: I) -> Self {
        let mut s = RankSet::empty();
        for r in iter {
            s.insert(r);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FabricError {
    #[error("rank {0} is dead")]
    RankDead(RankId),
    #[error("access [{offset}, {offset}+{len}) outside window {window} on rank {target} (capacity {capacity})")]
    OutOfBounds {
        window: Window,
        target: RankId,
        offset: usize,
        len: usize,
        capacity: usize,
    },
    #[error("window {0} is not exposed on rank {1}")]
    NoWindow(Window, RankId),
    #[error("window {0} is static and cannot be resized")]
    StaticWindow(Window),
    #[error("interrupted by a failure notice")]
    Interrupted,
    #[error("rank stopped by injected fault")]
    Killed,
    #[error("fabric operation timed out")]
    Timeout,
    #[error("invalid fault schedule: {0}")]
    InvalidSchedule(String),
    #[error("unsupported world size {0}")]
    BadWorldSize(usize),
}

/// Errors that can end a rank's program. Lets [`World::run`] tell an injected
/// fault apart from a real failure.
pub trait RankFailure {
    fn is_injected_fault(&self) -> bool;
}

impl RankFailure for FabricError {
    fn is_injected_fault(&self) -> bool {
        matches!(self, FabricError::Killed)
    }
}

/// Name of a window. Every rank may expose its own segment under the same name;
/// remote operations address `(window, target)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    name: &'static str,
    a: u32,
    b: u32,
}

impl Window {
    pub const fn new(name: &'static str, a: u32, b: u32) -> Self {
        Self { name, a, b }
    }

    pub const fn named(name: &'static str) -> Self {
        Self { name, a: 0, b: 0 }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{}]", self.name, self.a, self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Static,
    Dynamic,
}

struct Segment {
    kind: WindowKind,
    data: Vec<u8>,
}

struct Message {
    src: RankId,
    tag: u64,
    payload: Vec<u8>,
}

struct Collective {
    participants: RankSet,
    contributions: Vec<Option<Vec<u8>>>,
    outcome: Option<Result<(), RankId>>,
}

struct State {
    alive: RankSet,
    dead: RankSet,
    segments: HashMap<(RankId, Window), Segment>,
    mailboxes: Vec<VecDeque<Message>>,
    collectives: HashMap<u64, Collective>,
    barrier_arrivals: HashMap<u64, Vec<Option<RankSet>>>,
    barrier_done: HashMap<u64, RankSet>,
    version: u64,
    trace: Vec<TraceEvent>,
}

struct Fabric {
    p: usize,
    seed: u64,
    schedule: FaultSchedule,
    tracing: bool,
    timeout: Duration,
    state: Mutex<State>,
    cv: Condvar,
    meter: SpaceMeter,
}

impl Fabric {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn record(&self, st: &mut State, op: Op, src: RankId, dst: Option<RankId>, bytes: usize, scope: &'static str) {
        if self.tracing {
            let seq = st.trace.len() as u64;
            st.trace.push(TraceEvent {
                seq,
                op,
                src,
                dst,
                bytes,
                scope,
            });
        }
    }

    fn bump(&self, st: &mut State) {
        st.version += 1;
        self.cv.notify_all();
    }

    fn kill(&self, rank: RankId) {
        let mut st = self.lock();
        if !st.alive.contains(rank) {
            return;
        }
        st.alive.remove(rank);
        st.dead.insert(rank);
        st.segments.retain(|(owner, _), _| *owner != rank);
        st.mailboxes[rank.index()].clear();
        self.record(&mut st, Op::Fail, rank, None, 0, "fault");
        self.bump(&mut st);
    }
}

/// Outcome of one rank's program.
#[derive(Debug)]
pub enum RankOutcome<T, E> {
    Finished(T),
    /// Stopped by its scheduled fault.
    Failed,
    Errored(E),
    Panicked(String),
}

impl<T, E> RankOutcome<T, E> {
    pub fn finished(&self) -> Option<&T> {
        match self {
            RankOutcome::Finished(v) => Some(v),
            _ => None,
        }
    }
}

/// A world of `p` ranks sharing one fabric. One world runs one program.
pub struct World {
    fabric: Arc<Fabric>,
}

impl World {
    pub fn spawn(p: usize, schedule: FaultSchedule, seed: u64) -> Result<Self, FabricError> {
        if p == 0 || p > MAX_RANKS {
            return Err(FabricError::BadWorldSize(p));
        }
        schedule.validate(p)?;
        let state = State {
            alive: RankSet::first(p),
            dead: RankSet::empty(),
            segments: HashMap::new(),
            mailboxes: (0..p).map(|_| VecDeque::new()).collect(),
            collectives: HashMap::new(),
            barrier_arrivals: HashMap::new(),
            barrier_done: HashMap::new(),
            version: 0,
            trace: Vec::new(),
        };
        Ok(Self {
            fabric: Arc::new(Fabric {
                p,
                seed,
                schedule,
                tracing: false,
                timeout: Duration::from_secs(300),
                state: Mutex::new(state),
                cv: Condvar::new(),
                meter: SpaceMeter::new(p),
            }),
        })
    }

    /// Record every fabric event. Must be set before [`World::run`].
    pub fn with_trace(mut self, on: bool) -> Self {
        Arc::get_mut(&mut self.fabric).expect("world already running").tracing = on;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        Arc::get_mut(&mut self.fabric).expect("world already running").timeout = timeout;
        self
    }

    pub fn p(&self) -> usize {
        self.fabric.p
    }

    pub fn seed(&self) -> u64 {
        self.fabric.seed
    }

    pub fn alive(&self) -> RankSet {
        self.fabric.lock().alive
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.fabric.lock().trace.clone()
    }

    pub fn space(&self) -> Vec<SpaceSample> {
        self.fabric.meter.snapshot()
    }

    /// Run `program` on every rank concurrently and wait for all of them.
    pub fn run<T, E, F>(&self, program: F) -> Vec<RankOutcome<T, E>>
    where
        T: Send,
        E: RankFailure + Send,
        F: Fn(&mut RankCtx) -> Result<T, E> + Sync,
    {
        let deadline = Instant::now() + self.fabric.timeout;
        thread::scope(|s| {
            let handles: Vec<_> = (0..self.fabric.p)
                .map(|r| {
                    let fabric = Arc::clone(&self.fabric);
                    let program = &program;
                    s.spawn(move || {
                        let rank = RankId(r);
                        let mut ctx = RankCtx::new(rank, Arc::clone(&fabric), deadline);
                        let res = panic::catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                        drop(ctx);
                        match res {
                            Ok(Ok(v)) => RankOutcome::Finished(v),
                            Ok(Err(e)) if e.is_injected_fault() => RankOutcome::Failed,
                            Ok(Err(e)) => {
                                fabric.kill(rank);
                                RankOutcome::Errored(e)
                            }
                            Err(payload) => {
                                fabric.kill(rank);
                                let msg = payload
                                    .downcast_ref::<String>()
                                    .cloned()
                                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                                    .unwrap_or_else(|| "panic".into());
                                RankOutcome::Panicked(msg)
                            }
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(RankOutcome::Panicked("join".into())))
                .collect()
        })
    }
}

type ProgressHook = Box<dyn FnMut(&mut RankCtx) -> Result<(), FabricError>>;

/// A rank's view of the fabric. Not shared between threads.
pub struct RankCtx {
    rank: RankId,
    fabric: Arc<Fabric>,
    acked: RankSet,
    coll_seq: u64,
    barrier_gen: u64,
    scope: &'static str,
    interruptible: bool,
    progress: Option<ProgressHook>,
    deadline: Instant,
}

impl RankCtx {
    fn new(rank: RankId, fabric: Arc<Fabric>, deadline: Instant) -> Self {
        Self {
            rank,
            fabric,
            acked: RankSet::empty(),
            coll_seq: 0,
            barrier_gen: 0,
            scope: "app",
            interruptible: false,
            progress: None,
            deadline,
        }
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.fabric.p
    }

    pub fn seed(&self) -> u64 {
        self.fabric.seed
    }

    pub fn meter(&self) -> &SpaceMeter {
        &self.fabric.meter
    }

    /// Ranks currently alive, as known to the fabric.
    pub fn alive(&self) -> RankSet {
        self.fabric.lock().alive
    }

    /// Failures this rank has been told about so far.
    pub fn known_dead(&self) -> RankSet {
        self.acked
    }

    /// Lowest-ranked process that is alive according to this rank's knowledge.
    pub fn master(&self) -> RankId {
        RankSet::first(self.fabric.p)
            .minus(self.acked)
            .lowest()
            .unwrap_or(self.rank)
    }

    pub fn has_unseen_faults(&self) -> bool {
        self.fabric.lock().dead != self.acked
    }

    /// Failures not yet reported to this rank. Each failure is reported once.
    pub fn poll_faults(&mut self) -> Vec<RankId> {
        let dead = self.fabric.lock().dead;
        let new = dead.minus(self.acked);
        self.acked = dead;
        new.iter().collect()
    }

    /// Checks the fault schedule; returns `Killed` once this rank's trigger
    /// fires, after which the rank is dead to everyone else.
    pub fn fault_point(&mut self, progress: Progress) -> Result<(), FabricError> {
        if let Some(trigger) = self.fabric.schedule.trigger_for(self.rank) {
            if trigger.fires(progress) {
                self.fabric.kill(self.rank);
                return Err(FabricError::Killed);
            }
        }
        Ok(())
    }

    pub fn scope(&self) -> &'static str {
        self.scope
    }

    /// Run `f` with trace events labelled `scope`.
    pub fn in_scope<T>(&mut self, scope: &'static str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.scope, scope);
        let out = f(self);
        self.scope = prev;
        out
    }

    /// When set, blocking receives return [`FabricError::Interrupted`] as soon
    /// as a failure this rank has not polled yet exists.
    pub fn set_interruptible(&mut self, on: bool) {
        self.interruptible = on;
    }

    /// Install a hook run while this rank is blocked in the fabric. Used by
    /// protocols that need the target to make progress (address exchange).
    pub fn set_progress_hook(&mut self, hook: Option<ProgressHook>) {
        self.progress = hook;
    }

    pub fn run_progress(&mut self) -> Result<(), FabricError> {
        if let Some(mut hook) = self.progress.take() {
            let res = hook(self);
            self.progress = Some(hook);
            res?;
        }
        Ok(())
    }

    fn check_self(&self, st: &State) -> Result<(), FabricError> {
        if st.alive.contains(self.rank) {
            Ok(())
        } else {
            Err(FabricError::Killed)
        }
    }

    fn wait_for<T>(
        &mut self,
        mut check: impl FnMut(&mut State) -> Option<Result<T, FabricError>>,
    ) -> Result<T, FabricError> {
        loop {
            let version = {
                let mut st = self.fabric.lock();
                self.check_self(&st)?;
                if let Some(out) = check(&mut st) {
                    return out;
                }
                st.version
            };
            self.run_progress()?;
            {
                let st = self.fabric.lock();
                if st.version == version {
                    let _ = self.fabric.cv.wait_timeout(st, WAIT_SLICE);
                }
            }
            if Instant::now() > self.deadline {
                return Err(FabricError::Timeout);
            }
        }
    }

    // ---- one-sided windows ----

    /// Expose (or re-expose, zeroed) this rank's segment of `win`.
    pub fn expose(&mut self, win: Window, capacity: usize, kind: WindowKind) -> Result<(), FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        st.segments.insert(
            (self.rank, win),
            Segment {
                kind,
                data: vec![0; capacity],
            },
        );
        self.fabric.record(&mut st, Op::Expose, self.rank, None, capacity, self.scope);
        self.fabric.bump(&mut st);
        Ok(())
    }

    /// Owner-side resize of a dynamic segment; the prefix is preserved.
    pub fn resize(&mut self, win: Window, capacity: usize) -> Result<(), FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        let seg = st
            .segments
            .get_mut(&(self.rank, win))
            .ok_or(FabricError::NoWindow(win, self.rank))?;
        if seg.kind == WindowKind::Static {
            return Err(FabricError::StaticWindow(win));
        }
        seg.data.resize(capacity, 0);
        self.fabric.record(&mut st, Op::Resize, self.rank, None, capacity, self.scope);
        self.fabric.bump(&mut st);
        Ok(())
    }

    pub fn release(&mut self, win: Window) {
        let mut st = self.fabric.lock();
        st.segments.remove(&(self.rank, win));
    }

    /// Capacity of `target`'s segment, or `None` if it is not exposed.
    pub fn capacity(&mut self, win: Window, target: RankId) -> Result<Option<usize>, FabricError> {
        let st = self.fabric.lock();
        self.check_self(&st)?;
        if !st.alive.contains(target) {
            return Err(FabricError::RankDead(target));
        }
        Ok(st.segments.get(&(target, win)).map(|s| s.data.len()))
    }

    fn segment(
        st: &mut State,
        win: Window,
        target: RankId,
        offset: usize,
        len: usize,
    ) -> Result<&mut Vec<u8>, FabricError> {
        if !st.alive.contains(target) {
            return Err(FabricError::RankDead(target));
        }
        let seg = st
            .segments
            .get_mut(&(target, win))
            .ok_or(FabricError::NoWindow(win, target))?;
        let capacity = seg.data.len();
        if offset.checked_add(len).is_none_or(|end| end > capacity) {
            return Err(FabricError::OutOfBounds {
                window: win,
                target,
                offset,
                len,
                capacity,
            });
        }
        Ok(&mut seg.data)
    }

    pub fn put(&mut self, win: Window, target: RankId, offset: usize, payload: &[u8]) -> Result<(), FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        let data = Self::segment(&mut st, win, target, offset, payload.len())?;
        data[offset..offset + payload.len()].copy_from_slice(payload);
        self.fabric.record(&mut st, Op::Put, self.rank, Some(target), payload.len(), self.scope);
        self.fabric.bump(&mut st);
        Ok(())
    }

    pub fn get(&mut self, win: Window, target: RankId, offset: usize, len: usize) -> Result<Vec<u8>, FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        let data = Self::segment(&mut st, win, target, offset, len)?;
        let out = data[offset..offset + len].to_vec();
        self.fabric.record(&mut st, Op::Get, self.rank, Some(target), len, self.scope);
        Ok(out)
    }

    /// Atomic read-modify-write of the little-endian u64 cell at `offset`.
    /// Returns the value before the update; `delta == 0` is an atomic read.
    pub fn fetch_and_add(&mut self, win: Window, target: RankId, offset: usize, delta: i64) -> Result<u64, FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        let data = Self::segment(&mut st, win, target, offset, 8)?;
        let cell: [u8; 8] = data[offset..offset + 8].try_into().unwrap();
        let old = u64::from_le_bytes(cell);
        let new = old.wrapping_add(delta as u64);
        data[offset..offset + 8].copy_from_slice(&new.to_le_bytes());
        self.fabric.record(&mut st, Op::FetchAdd, self.rank, Some(target), 8, self.scope);
        if delta != 0 {
            self.fabric.bump(&mut st);
        }
        Ok(old)
    }

    /// Poll `target`'s cell until `ready(value)` holds.
    pub fn wait_cell(
        &mut self,
        win: Window,
        target: RankId,
        offset: usize,
        ready: impl Fn(u64) -> bool,
    ) -> Result<u64, FabricError> {
        loop {
            let v = self.fetch_and_add(win, target, offset, 0)?;
            if ready(v) {
                return Ok(v);
            }
            let version = self.fabric.lock().version;
            self.run_progress()?;
            let st = self.fabric.lock();
            if st.version == version {
                let _ = self.fabric.cv.wait_timeout(st, WAIT_SLICE);
            }
            if Instant::now() > self.deadline {
                return Err(FabricError::Timeout);
            }
        }
    }

    /// Wait until `target` exposes `win` with at least `min_capacity` bytes.
    pub fn wait_exposed(&mut self, win: Window, target: RankId, min_capacity: usize) -> Result<(), FabricError> {
        self.wait_for(|st| {
            if !st.alive.contains(target) {
                return Some(Err(FabricError::RankDead(target)));
            }
            match st.segments.get(&(target, win)) {
                Some(seg) if seg.data.len() >= min_capacity => Some(Ok(())),
                _ => None,
            }
        })
    }

    // ---- two-sided messages ----

    pub fn send(&mut self, dst: RankId, tag: u64, payload: Vec<u8>) -> Result<(), FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        if !st.alive.contains(dst) {
            return Err(FabricError::RankDead(dst));
        }
        let bytes = payload.len();
        st.mailboxes[dst.index()].push_back(Message {
            src: self.rank,
            tag,
            payload,
        });
        self.fabric.record(&mut st, Op::Send, self.rank, Some(dst), bytes, self.scope);
        self.fabric.bump(&mut st);
        Ok(())
    }

    fn take_message(st: &mut State, me: RankId, src: Option<RankId>, tag: u64) -> Option<(RankId, Vec<u8>)> {
        let mbox = &mut st.mailboxes[me.index()];
        let pos = mbox
            .iter()
            .position(|m| m.tag == tag && src.is_none_or(|s| s == m.src))?;
        let m = mbox.remove(pos).unwrap();
        Some((m.src, m.payload))
    }

    pub fn try_recv(&mut self, src: RankId, tag: u64) -> Result<Option<Vec<u8>>, FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        match Self::take_message(&mut st, self.rank, Some(src), tag) {
            Some((_, payload)) => {
                self.fabric.record(&mut st, Op::Recv, src, Some(self.rank), payload.len(), self.scope);
                Ok(Some(payload))
            }
            None if !st.alive.contains(src) => Err(FabricError::RankDead(src)),
            None => Ok(None),
        }
    }

    /// Non-blocking receive of a `tag` message from any source.
    pub fn try_recv_any(&mut self, tag: u64) -> Result<Option<(RankId, Vec<u8>)>, FabricError> {
        let mut st = self.fabric.lock();
        self.check_self(&st)?;
        let got = Self::take_message(&mut st, self.rank, None, tag);
        if let Some((src, payload)) = &got {
            self.fabric.record(&mut st, Op::Recv, *src, Some(self.rank), payload.len(), self.scope);
        }
        Ok(got)
    }

    /// Blocking receive matched by `(src, tag)` in FIFO order. Messages sent
    /// before the source died are still delivered; afterwards `RankDead`.
    pub fn recv(&mut self, src: RankId, tag: u64) -> Result<Vec<u8>, FabricError> {
        let me = self.rank;
        let interruptible = self.interruptible;
        let acked = self.acked;
        let scope = self.scope;
        let fabric = Arc::clone(&self.fabric);
        self.wait_for(|st| {
            if let Some((_, payload)) = Self::take_message(st, me, Some(src), tag) {
                fabric.record(st, Op::Recv, src, Some(me), payload.len(), scope);
                return Some(Ok(payload));
            }
            if !st.alive.contains(src) {
                return Some(Err(FabricError::RankDead(src)));
            }
            if interruptible && st.dead != acked {
                return Some(Err(FabricError::Interrupted));
            }
            None
        })
    }

    /// Drop queued messages whose tag matches `pred`.
    pub fn purge(&mut self, pred: impl Fn(u64) -> bool) {
        let mut st = self.fabric.lock();
        st.mailboxes[self.rank.index()].retain(|m| !pred(m.tag));
    }

    // ---- collectives over the alive set ----

    /// Every alive rank contributes bytes; all get everyone's contribution.
    /// Aborts with `RankDead` if a participant dies before contributing.
    pub fn allgather(&mut self, contribution: Vec<u8>) -> Result<Vec<Option<Vec<u8>>>, FabricError> {
        let seq = self.coll_seq;
        self.coll_seq += 1;
        let me = self.rank;
        let p = self.fabric.p;
        {
            let mut st = self.fabric.lock();
            self.check_self(&st)?;
            let alive = st.alive;
            let bytes = contribution.len();
            let slot = st.collectives.entry(seq).or_insert_with(|| Collective {
                participants: alive,
                contributions: vec![None; p],
                outcome: None,
            });
            slot.contributions[me.index()] = Some(contribution);
            self.fabric.record(&mut st, Op::Collective, me, None, bytes, self.scope);
            self.fabric.bump(&mut st);
        }
        self.wait_for(|st| {
            let dead = st.dead;
            let slot = st.collectives.get_mut(&seq).expect("collective slot");
            if slot.outcome.is_none() {
                if let Some(r) = slot
                    .participants
                    .iter()
                    .find(|&r| dead.contains(r) && slot.contributions[r.index()].is_none())
                {
                    slot.outcome = Some(Err(r));
                } else if slot
                    .participants
                    .iter()
                    .all(|r| slot.contributions[r.index()].is_some())
                {
                    slot.outcome = Some(Ok(()));
                }
            }
            match slot.outcome {
                Some(Ok(())) => Some(Ok(slot.contributions.clone())),
                Some(Err(r)) => Some(Err(FabricError::RankDead(r))),
                None => None,
            }
        })
    }

    pub fn allreduce_sum(&mut self, local: &[u64]) -> Result<Vec<u64>, FabricError> {
        let bytes: Vec<u8> = local.iter().flat_map(|v| v.to_le_bytes()).collect();
        let all = self.allgather(bytes)?;
        let mut out = vec![0u64; local.len()];
        for c in all.into_iter().flatten() {
            for (o, chunk) in out.iter_mut().zip(c.chunks_exact(8)) {
                *o += u64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(out)
    }

    pub fn bcast(&mut self, root: RankId, payload: Option<Vec<u8>>) -> Result<Vec<u8>, FabricError> {
        let contribution = if self.rank == root {
            payload.unwrap_or_default()
        } else {
            Vec::new()
        };
        let mut all = self.allgather(contribution)?;
        all[root.index()].take().ok_or(FabricError::RankDead(root))
    }

    pub fn barrier(&mut self) -> Result<(), FabricError> {
        self.allgather(Vec::new()).map(|_| ())
    }

    /// Barrier that tolerates failures: completes once every alive rank has
    /// arrived having seen the same failure set, which is returned. While
    /// waiting, `on_fault` runs whenever this rank has unseen failures, before
    /// they are acknowledged.
    pub fn ft_barrier<E: From<FabricError>>(
        &mut self,
        mut on_fault: impl FnMut(&mut Self) -> Result<(), E>,
    ) -> Result<RankSet, E> {
        let gen = self.barrier_gen;
        let me = self.rank;
        let p = self.fabric.p;
        loop {
            if self.has_unseen_faults() {
                on_fault(self)?;
                self.poll_faults();
            }
            self.run_progress()?;
            let acked = self.acked;
            let version = {
                let mut st = self.fabric.lock();
                self.check_self(&st)?;
                if let Some(&dead) = st.barrier_done.get(&gen) {
                    self.barrier_gen += 1;
                    return Ok(dead);
                }
                let arrivals = st.barrier_arrivals.entry(gen).or_insert_with(|| vec![None; p]);
                arrivals[me.index()] = Some(acked);
                let dead = st.dead;
                let alive = st.alive;
                let arrivals = &st.barrier_arrivals[&gen];
                if alive.iter().all(|r| arrivals[r.index()] == Some(dead)) {
                    st.barrier_done.insert(gen, dead);
                    self.fabric.bump(&mut st);
                    self.barrier_gen += 1;
                    return Ok(dead);
                }
                if dead != acked {
                    continue;
                }
                st.version
            };
            {
                let st = self.fabric.lock();
                if st.version == version {
                    let _ = self.fabric.cv.wait_timeout(st, WAIT_SLICE);
                }
            }
            if Instant::now() > self.deadline {
                return Err(FabricError::Timeout.into());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok<T>(outs: Vec<RankOutcome<T, FabricError>>) -> Vec<T> {
        outs.into_iter()
            .map(|o| match o {
                RankOutcome::Finished(v) => v,
                RankOutcome::Failed => panic!("rank failed"),
                RankOutcome::Errored(e) => panic!("rank errored: {e}"),
                RankOutcome::Panicked(m) => panic!("rank panicked: {m}"),
            })
            .collect()
    }

    const W: Window = Window::named("w");

    #[test]
    fn spawn_validates_schedule() {
        let w = World::spawn(4, FaultSchedule::none(), 7).unwrap();
        assert_eq!(w.alive(), RankSet::first(4));
        assert!(World::spawn(1, FaultSchedule::none(), 0).is_ok());
        let all = FaultSchedule::none()
            .with(RankId(0), Trigger::AfterTransactions(1))
            .unwrap();
        assert!(matches!(
            World::spawn(1, all, 0),
            Err(FabricError::InvalidSchedule(_))
        ));
        let out_of_range = FaultSchedule::none()
            .with(RankId(5), Trigger::AfterTransactions(1))
            .unwrap();
        assert!(World::spawn(4, out_of_range, 0).is_err());
    }

    #[test]
    fn put_get_roundtrip_and_bounds() {
        let w = World::spawn(3, FaultSchedule::none(), 0).unwrap();
        let out = ok(w.run(|ctx| {
            ctx.expose(W, 16, WindowKind::Static)?;
            ctx.barrier()?;
            if ctx.rank() == RankId(0) {
                ctx.put(W, RankId(2), 0, &[1, 2, 3])?;
                let back = ctx.get(W, RankId(2), 0, 3)?;
                assert_eq!(back, vec![1, 2, 3]);
                let err = ctx.put(W, RankId(2), 15, &[1, 2]).unwrap_err();
                assert!(matches!(err, FabricError::OutOfBounds { .. }));
            }
            ctx.barrier()?;
            Ok::<_, FabricError>(())
        }));
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn fetch_and_add_returns_previous_value() {
        let w = World::spawn(1, FaultSchedule::none(), 0).unwrap();
        ok(w.run(|ctx| {
            ctx.expose(W, 8, WindowKind::Static)?;
            assert_eq!(ctx.fetch_and_add(W, RankId(0), 0, 5)?, 0);
            assert_eq!(ctx.fetch_and_add(W, RankId(0), 0, 0)?, 5);
            assert_eq!(ctx.fetch_and_add(W, RankId(0), 0, 0)?, 5);
            Ok::<_, FabricError>(())
        }));
    }

    #[test]
    fn concurrent_increments_are_linearizable() {
        for n in [2usize, 5, 8] {
            let w = World::spawn(n, FaultSchedule::none(), 0).unwrap();
            let olds = ok(w.run(|ctx| {
                if ctx.rank() == RankId(0) {
                    ctx.expose(W, 8, WindowKind::Static)?;
                }
                ctx.barrier()?;
                let old = ctx.fetch_and_add(W, RankId(0), 0, 1)?;
                ctx.barrier()?;
                if ctx.rank() == RankId(0) {
                    assert_eq!(ctx.fetch_and_add(W, RankId(0), 0, 0)?, n as u64);
                }
                ctx.barrier()?;
                Ok::<_, FabricError>(old)
            }));
            let mut sorted = olds.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ring_send_recv() {
        let w = World::spawn(3, FaultSchedule::none(), 0).unwrap();
        let got = ok(w.run(|ctx| {
            let p = ctx.size();
            let me = ctx.rank().index();
            ctx.send(RankId((me + 1) % p), 1, vec![me as u8])?;
            let v = ctx.recv(RankId((me + p - 1) % p), 1)?;
            Ok::<_, FabricError>(v[0])
        }));
        assert_eq!(got, vec![2, 0, 1]);
    }

    #[test]
    fn fifo_per_channel() {
        let w = World::spawn(2, FaultSchedule::none(), 0).unwrap();
        ok(w.run(|ctx| {
            if ctx.rank() == RankId(0) {
                ctx.send(RankId(1), 9, vec![1])?;
                ctx.send(RankId(1), 9, vec![2])?;
            } else {
                assert_eq!(ctx.recv(RankId(0), 9)?, vec![1]);
                assert_eq!(ctx.recv(RankId(0), 9)?, vec![2]);
            }
            Ok::<_, FabricError>(())
        }));
    }

    #[test]
    fn dead_rank_is_dead_for_every_operation() {
        let sched = FaultSchedule::none()
            .with(RankId(1), Trigger::AfterIteration(0))
            .unwrap();
        let w = World::spawn(3, sched, 0).unwrap();
        let outs = w.run(|ctx| {
            ctx.expose(W, 8, WindowKind::Static)?;
            ctx.fault_point(Progress::Iterations { done: 0, total: 1 })?;
            if ctx.rank() == RankId(0) {
                // recv from a rank that dies before sending must not block
                assert_eq!(ctx.recv(RankId(1), 3), Err(FabricError::RankDead(RankId(1))));
                assert_eq!(ctx.put(W, RankId(1), 0, &[1]), Err(FabricError::RankDead(RankId(1))));
                assert_eq!(ctx.send(RankId(1), 3, vec![]), Err(FabricError::RankDead(RankId(1))));
                assert_eq!(ctx.fetch_and_add(W, RankId(1), 0, 0), Err(FabricError::RankDead(RankId(1))));
            }
            Ok::<_, FabricError>(())
        });
        assert!(matches!(outs[1], RankOutcome::Failed));
        assert!(outs[0].finished().is_some());
        assert!(!w.alive().contains(RankId(1)));
    }

    #[test]
    fn allreduce_cases() {
        for (p, input, want) in [
            (3usize, vec![vec![1u64, 0], vec![0, 2], vec![1, 1]], vec![2u64, 3]),
            (1, vec![vec![5]], vec![5]),
            (4, vec![vec![0, 0]; 4], vec![0, 0]),
        ] {
            let w = World::spawn(p, FaultSchedule::none(), 0).unwrap();
            let got = ok(w.run(|ctx| ctx.allreduce_sum(&input[ctx.rank().index()])));
            assert!(got.iter().all(|g| *g == want));
        }
    }

    #[test]
    fn collective_aborts_when_participant_dies() {
        let sched = FaultSchedule::none()
            .with(RankId(2), Trigger::AfterIteration(0))
            .unwrap();
        let w = World::spawn(3, sched, 0).unwrap();
        let outs = w.run(|ctx| {
            // rank 2 dies before contributing to the first collective
            ctx.barrier()?;
            ctx.fault_point(Progress::Iterations { done: 0, total: 1 })?;
            let first = ctx.allreduce_sum(&[1]);
            ctx.poll_faults();
            let second = ctx.allreduce_sum(&[1])?;
            Ok::<_, FabricError>((first, second))
        });
        for out in &outs[..2] {
            let (first, second) = out.finished().unwrap();
            assert!(matches!(first, Err(FabricError::RankDead(RankId(2)))) || first == &Ok(vec![2]));
            assert_eq!(second, &vec![2]);
        }
    }

    #[test]
    fn faults_reported_once_per_observer() {
        let sched = FaultSchedule::none()
            .with(RankId(1), Trigger::AfterIteration(0))
            .unwrap()
            .with(RankId(3), Trigger::AfterIteration(0))
            .unwrap();
        let w = World::spawn(4, sched, 0).unwrap();
        let outs = w.run(|ctx| {
            ctx.fault_point(Progress::Iterations { done: 0, total: 1 })?;
            let dead = ctx.ft_barrier(|_| Ok::<_, FabricError>(()))?;
            let mut seen = ctx.poll_faults();
            seen.extend(ctx.poll_faults());
            Ok::<_, FabricError>((dead, seen, ctx.known_dead()))
        });
        for r in [0, 2] {
            let (dead, again, known) = outs[r].finished().unwrap();
            assert_eq!(dead.iter().collect::<Vec<_>>(), vec![RankId(1), RankId(3)]);
            assert!(again.is_empty(), "already acknowledged inside the barrier");
            assert_eq!(known, dead);
        }
    }

    #[test]
    fn no_schedule_means_no_faults() {
        let w = World::spawn(3, FaultSchedule::none(), 0).unwrap();
        let outs = ok(w.run(|ctx| {
            ctx.barrier()?;
            Ok::<_, FabricError>(ctx.poll_faults())
        }));
        assert!(outs.iter().all(|v| v.is_empty()));
    }

    #[test]
    fn dynamic_resize_is_owner_only_and_keeps_prefix() {
        let w = World::spawn(2, FaultSchedule::none(), 0).unwrap();
        ok(w.run(|ctx| {
            ctx.expose(W, 4, WindowKind::Dynamic)?;
            ctx.put(W, ctx.rank(), 0, &[9, 9, 9, 9])?;
            ctx.resize(W, 8)?;
            assert_eq!(ctx.get(W, ctx.rank(), 0, 8)?, vec![9, 9, 9, 9, 0, 0, 0, 0]);
            let s = Window::named("s");
            ctx.expose(s, 4, WindowKind::Static)?;
            assert!(matches!(ctx.resize(s, 8), Err(FabricError::StaticWindow(_))));
            Ok::<_, FabricError>(())
        }));
    }

    #[test]
    fn trace_records_scopes() {
        let w = World::spawn(2, FaultSchedule::none(), 0).unwrap().with_trace(true);
        ok(w.run(|ctx| {
            ctx.expose(W, 8, WindowKind::Static)?;
            ctx.barrier()?;
            if ctx.rank() == RankId(0) {
                ctx.in_scope("ckpt.test", |ctx| ctx.put(W, RankId(1), 0, &[1]))?;
            }
            ctx.barrier()?;
            Ok::<_, FabricError>(())
        }));
        let trace = w.trace();
        let scoped: Vec<_> = trace::in_scope(&trace, "ckpt").collect();
        assert_eq!(scoped.len(), 1);
        assert_eq!(scoped[0].op, Op::Put);
        assert_eq!(scoped[0].dst, Some(RankId(1)));
        assert!(scoped[0].to_string().contains("put src=0 dst=1 bytes=1"));
    }

    #[test]
    fn ring_successor_skips_dead() {
        let mut alive = RankSet::first(4);
        alive.remove(RankId(1));
        assert_eq!(alive.successor(RankId(0), 4), Some(RankId(2)));
        alive.remove(RankId(2));
        assert_eq!(alive.successor(RankId(0), 4), Some(RankId(3)));
        assert_eq!(alive.predecessor(RankId(0), 4), Some(RankId(3)));
        let single = RankSet::from_iter([RankId(0)]);
        assert_eq!(single.successor(RankId(0), 4), None);
    }
}
