//! World runner: contexts, the seeded interleaving scheduler, authoritative
//! memory plus per-writer pending buffers, and collective rendezvous.

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

const TASK_STACK: usize = 512 * 1024;

pub type PeProgram = Box<dyn FnOnce(&mut PeCtx) -> Result<(), PgasError> + Send>;

/// Handle to a context spawned with [`PeCtx::spawn`].
#[derive(Debug, Clone, Copy)]
pub struct TaskHandle {
    ctx: usize,
}

#[derive(Clone, Debug)]
enum WaitCond {
    SignalGe { sig: SigId, pe: usize, slot: usize, value: u64 },
    CounterGe { ctr: CtrId, pe: usize, idx: usize, value: u64 },
    CtxDone { ctx: usize },
    AllocReady { seq: usize },
    BarrierDone { epoch: u64 },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum WClass {
    Store,
    Put,
}

struct PendingEntry {
    writer: usize,
    val: Val,
    class: WClass,
}

#[derive(Debug, Clone, PartialEq)]
enum AllocReq {
    Buf(usize, ElemKind),
    Sigs(usize),
    Ctrs(usize),
}

#[derive(Debug, Clone, Copy)]
enum AllocResult {
    Buf(BufId),
    Sigs(SigId),
    Ctrs(CtrId),
}

enum Status {
    Runnable,
    Blocked(WaitCond),
    Done,
}

struct Ctx {
    pe: usize,
    status: Status,
    cv: Arc<Condvar>,
}

struct BufStore {
    len: usize,
    kind: ElemKind,
    /// One zero-initialized instance per PE.
    data: Vec<Vec<Val>>,
}

struct Shared {
    n_pes: usize,
    memory: MemoryMode,
    det: bool,
    record: bool,
    rng: ChaCha8Rng,
    clock: u64,
    events: Vec<Event>,
    bufs: Vec<BufStore>,
    sigs: Vec<Vec<Vec<u64>>>,
    ctrs: Vec<Vec<Vec<u64>>>,
    pending: HashMap<(usize, usize, usize), PendingEntry>,
    pending_keys: Vec<Vec<(usize, usize, usize)>>,
    ctxs: Vec<Ctx>,
    running: Option<usize>,
    poison: Option<PgasError>,
    alloc_posts: Vec<Option<AllocReq>>,
    alloc_counts: Vec<usize>,
    alloc_results: Vec<AllocResult>,
    barrier_arrived: Vec<bool>,
    barrier_epoch: u64,
}

struct WorldInner {
    cfg: WorldCfg,
    shared: Mutex<Shared>,
    /// Concurrent-mode wakeup channel; deterministic mode uses per-ctx cvs.
    conc_cv: Condvar,
    tasks: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

/// Final state of a completed world.
#[derive(Debug)]
pub struct WorldOutcome {
    pub record: ExecutionRecord,
    bufs: Vec<Vec<Vec<Val>>>,
    sigs: Vec<Vec<Vec<u64>>>,
}

impl WorldOutcome {
    /// Post-run contents of `buf` on `pe` (all pending writes flushed).
    pub fn buffer(&self, buf: BufId, pe: usize) -> &[Val] {
        &self.bufs[buf.0][pe]
    }

    pub fn signals(&self, sig: SigId, pe: usize) -> &[u64] {
        &self.sigs[sig.0][pe]
    }
}

impl Shared {
    fn record_event(&mut self, pe: usize, ctx: usize, kind: EventKind) {
        let seq = self.clock;
        self.clock += 1;
        if self.record {
            self.events.push(Event { seq, pe, ctx, kind });
        }
    }

    fn eval(&self, cond: &WaitCond) -> bool {
        match *cond {
            WaitCond::SignalGe { sig, pe, slot, value } => self.sigs[sig.0][pe][slot] >= value,
            WaitCond::CounterGe { ctr, pe, idx, value } => self.ctrs[ctr.0][pe][idx] >= value,
            WaitCond::CtxDone { ctx } => matches!(self.ctxs[ctx].status, Status::Done),
            WaitCond::AllocReady { seq } => self.alloc_results.len() > seq,
            WaitCond::BarrierDone { epoch } => self.barrier_epoch > epoch,
        }
    }

    fn describe(&self, cond: &WaitCond) -> String {
        match *cond {
            WaitCond::SignalGe { sig, pe, slot, value } => format!(
                "signal {}[{slot}] >= {value} (now {})",
                sig.0, self.sigs[sig.0][pe][slot]
            ),
            WaitCond::CounterGe { ctr, pe, idx, value } => format!(
                "counter {}[{idx}] >= {value} (now {})",
                ctr.0, self.ctrs[ctr.0][pe][idx]
            ),
            WaitCond::CtxDone { ctx } => format!("completion of ctx {ctx}"),
            WaitCond::AllocReady { seq } => format!("collective allocation #{seq}"),
            WaitCond::BarrierDone { epoch } => format!("barrier epoch {epoch}"),
        }
    }

    fn apply(&mut self, key: (usize, usize, usize), val: Val) {
        self.bufs[key.0].data[key.1][key.2] = val;
    }

    /// Flushes `pe`'s buffered writes to authoritative memory. Release
    /// stores flush plain stores only; quiet and barrier flush puts too.
    fn flush_pe(&mut self, pe: usize, include_puts: bool) {
        let keys = std::mem::take(&mut self.pending_keys[pe]);
        let mut kept = Vec::new();
        for key in keys {
            let take = match self.pending.get(&key) {
                Some(e) if e.writer == pe => include_puts || e.class == WClass::Store,
                _ => continue, // superseded or already flushed
            };
            if take {
                let e = self.pending.remove(&key).unwrap();
                self.apply(key, e.val);
            } else {
                kept.push(key);
            }
        }
        self.pending_keys[pe] = kept;
    }

    /// Value visible to `reader`. The reader always sees its own buffered
    /// writes; another writer's buffered value is observed stale with
    /// probability `aggressiveness`, otherwise the adversary delivers it
    /// early (plain writes may become visible at any point up to the
    /// writer's next release).
    fn value_at(&mut self, reader: usize, buf: usize, owner: usize, idx: usize) -> Val {
        if !self.pending.is_empty() {
            let key = (buf, owner, idx);
            if let Some(e) = self.pending.get(&key) {
                if e.writer == reader {
                    return e.val;
                }
                let aggressiveness = match self.memory {
                    MemoryMode::WeakAdversary { aggressiveness } => aggressiveness,
                    MemoryMode::Sequential => 0.0,
                };
                if self.rng.gen::<f64>() >= aggressiveness {
                    let e = self.pending.remove(&key).unwrap();
                    self.apply(key, e.val);
                }
            }
        }
        self.bufs[buf].data[owner][idx]
    }

    fn write_loc(&mut self, writer: usize, buf: usize, owner: usize, idx: usize, val: Val, class: WClass) {
        match self.memory {
            MemoryMode::Sequential => self.apply((buf, owner, idx), val),
            MemoryMode::WeakAdversary { .. } => {
                let key = (buf, owner, idx);
                match self.pending.insert(key, PendingEntry { writer, val, class }) {
                    None => self.pending_keys[writer].push(key),
                    Some(old) if old.writer == writer => {} // key already listed for us
                    Some(_) => self.pending_keys[writer].push(key),
                }
            }
        }
    }

    fn signal_set_max(&mut self, sig: SigId, pe: usize, slot: usize, value: u64) {
        let s = &mut self.sigs[sig.0][pe][slot];
        if value > *s {
            *s = value;
        }
    }

    fn check_buf(&self, buf: BufId, pe: usize, off: usize, n: usize) -> Result<(), PgasError> {
        let store = self
            .bufs
            .get(buf.0)
            .ok_or_else(|| PgasError::OutOfBounds(format!("buffer {}", buf.0)))?;
        if pe >= self.n_pes {
            return Err(PgasError::OutOfBounds(format!("pe {pe}")));
        }
        if off + n > store.len {
            return Err(PgasError::OutOfBounds(format!(
                "range [{off}, {}) of buffer {} (len {})",
                off + n,
                buf.0,
                store.len
            )));
        }
        Ok(())
    }

    fn poison_with(&mut self, err: PgasError) {
        if self.poison.is_none() {
            self.poison = Some(err);
        }
        self.running = None;
        for c in &self.ctxs {
            c.cv.notify_one();
        }
    }

    /// Picks the next context to run: any runnable one, or a blocked one
    /// whose wait condition now holds. Raises SimDeadlock when waiters exist
    /// but nothing can run.
    fn pick_next(&mut self) {
        let mut cands = Vec::new();
        let mut blocked = Vec::new();
        for (i, c) in self.ctxs.iter().enumerate() {
            match &c.status {
                Status::Runnable => cands.push(i),
                Status::Blocked(cond) => {
                    if self.eval(cond) {
                        cands.push(i);
                    } else {
                        blocked.push(i);
                    }
                }
                Status::Done => {}
            }
        }
        if cands.is_empty() {
            if !blocked.is_empty() {
                let waiters = blocked
                    .iter()
                    .map(|&i| BlockedWaiter {
                        pe: self.ctxs[i].pe,
                        ctx: i,
                        waiting_on: match &self.ctxs[i].status {
                            Status::Blocked(c) => self.describe(c),
                            _ => unreachable!(),
                        },
                    })
                    .collect();
                self.poison_with(PgasError::SimDeadlock { waiters });
            } else {
                self.running = None;
            }
            return;
        }
        let next = cands[self.rng.gen_range(0..cands.len())];
        self.ctxs[next].status = Status::Runnable;
        self.running = Some(next);
        self.ctxs[next].cv.notify_one();
    }

    fn all_stuck(&self) -> bool {
        self.ctxs.iter().all(|c| match &c.status {
            Status::Done => true,
            Status::Blocked(cond) => !self.eval(cond),
            Status::Runnable => false,
        })
    }
}

/// Per-context handle through which a PE program performs every operation.
pub struct PeCtx {
    inner: Arc<WorldInner>,
    pe: usize,
    ctx: usize,
    root: bool,
    cv: Arc<Condvar>,
}

type Guard<'a> = MutexGuard<'a, Shared>;

impl PeCtx {
    pub fn pe(&self) -> usize {
        self.pe
    }

    pub fn n_pes(&self) -> usize {
        self.inner.cfg.n_pes
    }

    pub fn island_of(&self, pe: usize) -> usize {
        self.inner.cfg.islands.island_of(pe)
    }

    /// Direct reference to `pe`'s instance of a symmetric buffer; absent
    /// across islands. Pure topology query, populated before any exchange.
    pub fn peer_ref(&self, _buf: BufId, pe: usize) -> Option<PeerRef> {
        if pe == self.pe || self.inner.cfg.islands.same_island(self.pe, pe) {
            Some(PeerRef { pe })
        } else {
            None
        }
    }

    fn lock(&self) -> Guard<'_> {
        self.inner.shared.lock().expect("world lock")
    }

    fn poisoned(g: &Guard<'_>) -> Option<PgasError> {
        g.poison.as_ref().map(|p| PgasError::Poisoned(p.to_string()))
    }

    /// Hands the schedule back and parks until picked again.
    fn yield_turn<'a>(&self, mut g: Guard<'a>) -> Result<Guard<'a>, PgasError> {
        if !g.det {
            self.inner.conc_cv.notify_all();
            return Ok(g);
        }
        g.pick_next();
        loop {
            if let Some(p) = Self::poisoned(&g) {
                return Err(p);
            }
            if g.running == Some(self.ctx) {
                return Ok(g);
            }
            g = self.cv.wait(g).expect("world lock");
        }
    }

    /// Runs one non-blocking operation at this context's turn.
    fn op<R>(
        &mut self,
        f: impl FnOnce(&mut Shared, usize, usize) -> Result<R, PgasError>,
    ) -> Result<R, PgasError> {
        let mut g = self.lock();
        if let Some(p) = Self::poisoned(&g) {
            return Err(p);
        }
        match f(&mut g, self.pe, self.ctx) {
            Ok(r) => {
                drop(self.yield_turn(g)?);
                Ok(r)
            }
            Err(e) => {
                g.poison_with(e.clone());
                if !g.det {
                    self.inner.conc_cv.notify_all();
                }
                Err(e)
            }
        }
    }

    /// Blocks until `cond` holds (acquire semantics: release operations have
    /// already flushed the data the condition publishes).
    fn wait_op(&mut self, cond: WaitCond, kind: EventKind) -> Result<(), PgasError> {
        let mut g = self.lock();
        if let Some(p) = Self::poisoned(&g) {
            return Err(p);
        }
        g.record_event(self.pe, self.ctx, kind);
        if g.det {
            if g.eval(&cond) {
                drop(self.yield_turn(g)?);
                return Ok(());
            }
            g.ctxs[self.ctx].status = Status::Blocked(cond);
            g.pick_next();
            loop {
                if let Some(p) = Self::poisoned(&g) {
                    return Err(p);
                }
                if g.running == Some(self.ctx) {
                    return Ok(());
                }
                g = self.cv.wait(g).expect("world lock");
            }
        } else {
            loop {
                if let Some(p) = Self::poisoned(&g) {
                    return Err(p);
                }
                if g.eval(&cond) {
                    g.ctxs[self.ctx].status = Status::Runnable;
                    return Ok(());
                }
                g.ctxs[self.ctx].status = Status::Blocked(cond.clone());
                if g.all_stuck() {
                    let waiters = g
                        .ctxs
                        .iter()
                        .enumerate()
                        .filter_map(|(i, c)| match &c.status {
                            Status::Blocked(w) => Some(BlockedWaiter {
                                pe: c.pe,
                                ctx: i,
                                waiting_on: g.describe(w),
                            }),
                            _ => None,
                        })
                        .collect();
                    let err = PgasError::SimDeadlock { waiters };
                    g.poison_with(err.clone());
                    self.inner.conc_cv.notify_all();
                    return Err(err);
                }
                g = self.inner.conc_cv.wait(g).expect("world lock");
            }
        }
    }

    fn alloc_common(&mut self, req: AllocReq) -> Result<AllocResult, PgasError> {
        if !self.root {
            return Err(PgasError::Internal(
                "collective allocation must be called from the PE root context".into(),
            ));
        }
        let mut g = self.lock();
        if let Some(p) = Self::poisoned(&g) {
            return Err(p);
        }
        let my_seq = g.alloc_counts[self.pe];
        g.alloc_counts[self.pe] += 1;
        if g.alloc_posts[self.pe].is_some() {
            return Err(PgasError::Internal("overlapping collective allocation".into()));
        }
        g.alloc_posts[self.pe] = Some(req.clone());
        if g.alloc_posts.iter().all(Option::is_some) {
            let first = g.alloc_posts[0].clone().unwrap();
            if g.alloc_posts.iter().any(|p| p.as_ref() != Some(&first)) {
                let desc = g
                    .alloc_posts
                    .iter()
                    .enumerate()
                    .map(|(pe, p)| format!("pe{pe}: {:?}", p.as_ref().unwrap()))
                    .collect::<Vec<_>>()
                    .join(", ");
                let err = PgasError::CollectiveMismatch(desc);
                g.poison_with(err.clone());
                if !g.det {
                    self.inner.conc_cv.notify_all();
                }
                return Err(err);
            }
            let n_pes = g.n_pes;
            let result = match first {
                AllocReq::Buf(len, kind) => {
                    g.bufs.push(BufStore {
                        len,
                        kind,
                        data: vec![vec![[0.0; 3]; len]; n_pes],
                    });
                    AllocResult::Buf(BufId(g.bufs.len() - 1))
                }
                AllocReq::Sigs(len) => {
                    g.sigs.push(vec![vec![0; len]; n_pes]);
                    AllocResult::Sigs(SigId(g.sigs.len() - 1))
                }
                AllocReq::Ctrs(len) => {
                    g.ctrs.push(vec![vec![0; len]; n_pes]);
                    AllocResult::Ctrs(CtrId(g.ctrs.len() - 1))
                }
            };
            g.alloc_results.push(result);
            g.alloc_posts.iter_mut().for_each(|p| *p = None);
            if !g.det {
                self.inner.conc_cv.notify_all();
            }
        }
        let cond = WaitCond::AllocReady { seq: my_seq };
        if g.det {
            if !g.eval(&cond) {
                g.ctxs[self.ctx].status = Status::Blocked(cond);
                g.pick_next();
                loop {
                    if let Some(p) = Self::poisoned(&g) {
                        return Err(p);
                    }
                    if g.running == Some(self.ctx) {
                        break;
                    }
                    g = self.cv.wait(g).expect("world lock");
                }
            } else {
                g = self.yield_turn(g)?;
            }
        } else {
            loop {
                if let Some(p) = Self::poisoned(&g) {
                    return Err(p);
                }
                if g.eval(&cond) {
                    break;
                }
                g.ctxs[self.ctx].status = Status::Blocked(cond.clone());
                if g.all_stuck() {
                    let err = PgasError::Internal("allocation rendezvous stuck".into());
                    g.poison_with(err.clone());
                    return Err(err);
                }
                g = self.inner.conc_cv.wait(g).expect("world lock");
            }
            g.ctxs[self.ctx].status = Status::Runnable;
        }
        let result = g.alloc_results[my_seq];
        let (pe, ctx) = (self.pe, self.ctx);
        match result {
            AllocResult::Buf(b) => {
                let (len, kind) = (g.bufs[b.0].len, g.bufs[b.0].kind);
                g.record_event(pe, ctx, EventKind::AllocBuf { buf: b, len, kind });
            }
            AllocResult::Sigs(s) => {
                let len = g.sigs[s.0][0].len();
                g.record_event(pe, ctx, EventKind::AllocSignals { sig: s, len });
            }
            AllocResult::Ctrs(c) => {
                let len = g.ctrs[c.0][0].len();
                g.record_event(pe, ctx, EventKind::AllocCounters { ctr: c, len });
            }
        }
        Ok(result)
    }

    /// Collective symmetric allocation: every PE gets a zero-initialized
    /// instance of the same length, addressable remotely by the handle.
    pub fn alloc_symmetric(&mut self, len: usize, kind: ElemKind) -> Result<BufId, PgasError> {
        match self.alloc_common(AllocReq::Buf(len, kind))? {
            AllocResult::Buf(b) => Ok(b),
            _ => Err(PgasError::Internal("allocation kind confusion".into())),
        }
    }

    pub fn alloc_signals(&mut self, len: usize) -> Result<SigId, PgasError> {
        match self.alloc_common(AllocReq::Sigs(len))? {
            AllocResult::Sigs(s) => Ok(s),
            _ => Err(PgasError::Internal("allocation kind confusion".into())),
        }
    }

    pub fn alloc_counters(&mut self, len: usize) -> Result<CtrId, PgasError> {
        match self.alloc_common(AllocReq::Ctrs(len))? {
            AllocResult::Ctrs(c) => Ok(c),
            _ => Err(PgasError::Internal("allocation kind confusion".into())),
        }
    }

    fn direct_access_check(&self, pe: usize) -> Result<(), PgasError> {
        if pe != self.pe && !self.inner.cfg.islands.same_island(self.pe, pe) {
            return Err(PgasError::NotAccessible(format!(
                "pe {} is outside pe {}'s island; use put",
                pe, self.pe
            )));
        }
        Ok(())
    }

    /// Plain store into `pe`'s instance (direct access; same island only).
    pub fn write(&mut self, buf: BufId, pe: usize, off: usize, vals: &[Val]) -> Result<(), PgasError> {
        self.direct_access_check(pe)?;
        let vals = vals.to_vec();
        self.op(move |g, me, ctx| {
            g.check_buf(buf, pe, off, vals.len())?;
            for (i, v) in vals.iter().enumerate() {
                g.write_loc(me, buf.0, pe, off + i, *v, WClass::Store);
            }
            g.record_event(me, ctx, EventKind::Write { buf, owner: pe, off, n: vals.len() });
            Ok(())
        })
    }

    /// Plain load from `pe`'s instance (direct access; same island only).
    pub fn read(&mut self, buf: BufId, pe: usize, off: usize, n: usize) -> Result<Vec<Val>, PgasError> {
        self.direct_access_check(pe)?;
        self.op(move |g, me, ctx| {
            g.check_buf(buf, pe, off, n)?;
            let out = (0..n).map(|i| g.value_at(me, buf.0, pe, off + i)).collect();
            g.record_event(me, ctx, EventKind::Read { buf, owner: pe, off, n });
            Ok(out)
        })
    }

    /// Indexed loads from the caller's own instance.
    pub fn gather(&mut self, buf: BufId, idxs: &[usize]) -> Result<Vec<Val>, PgasError> {
        let idxs = idxs.to_vec();
        self.op(move |g, me, ctx| {
            let n = idxs.len();
            for &i in &idxs {
                g.check_buf(buf, me, i, 1)?;
            }
            let out = idxs.iter().map(|&i| g.value_at(me, buf.0, me, i)).collect();
            g.record_event(me, ctx, EventKind::Gather { buf, n });
            Ok(out)
        })
    }

    /// Read-modify-write accumulation into the caller's own instance; the
    /// whole scatter is one scheduling step.
    pub fn scatter_add(&mut self, buf: BufId, pairs: &[(usize, Val)]) -> Result<(), PgasError> {
        let pairs = pairs.to_vec();
        self.op(move |g, me, ctx| {
            for &(i, _) in &pairs {
                g.check_buf(buf, me, i, 1)?;
            }
            for &(i, d) in &pairs {
                let cur = g.value_at(me, buf.0, me, i);
                let sum = [cur[0] + d[0], cur[1] + d[1], cur[2] + d[2]];
                g.write_loc(me, buf.0, me, i, sum, WClass::Store);
            }
            g.record_event(me, ctx, EventKind::ScatterAdd { buf, n: pairs.len() });
            Ok(())
        })
    }

    /// Indexed overwrite into the caller's own instance.
    pub fn scatter_set(&mut self, buf: BufId, pairs: &[(usize, Val)]) -> Result<(), PgasError> {
        let pairs = pairs.to_vec();
        self.op(move |g, me, ctx| {
            for &(i, _) in &pairs {
                g.check_buf(buf, me, i, 1)?;
            }
            for &(i, v) in &pairs {
                g.write_loc(me, buf.0, me, i, v, WClass::Store);
            }
            g.record_event(me, ctx, EventKind::ScatterSet { buf, n: pairs.len() });
            Ok(())
        })
    }

    /// Non-blocking one-sided put; completion is guaranteed only by a
    /// subsequent [`PeCtx::quiet`] or barrier.
    pub fn put(&mut self, buf: BufId, to: usize, off: usize, vals: &[Val]) -> Result<(), PgasError> {
        let vals = vals.to_vec();
        self.op(move |g, me, ctx| {
            g.check_buf(buf, to, off, vals.len())?;
            for (i, v) in vals.iter().enumerate() {
                g.write_loc(me, buf.0, to, off + i, *v, WClass::Put);
            }
            g.record_event(me, ctx, EventKind::Put { buf, to, off, n: vals.len() });
            Ok(())
        })
    }

    /// One-sided put whose payload is visible at the target no later than
    /// the signal value, in every memory-model mode.
    pub fn put_with_signal(
        &mut self,
        buf: BufId,
        to: usize,
        off: usize,
        vals: &[Val],
        sig: SigId,
        slot: usize,
        value: u64,
    ) -> Result<(), PgasError> {
        let vals = vals.to_vec();
        self.op(move |g, me, ctx| {
            g.check_buf(buf, to, off, vals.len())?;
            if slot >= g.sigs[sig.0][to].len() {
                return Err(PgasError::OutOfBounds(format!("signal slot {slot}")));
            }
            for (i, v) in vals.iter().enumerate() {
                let key = (buf.0, to, off + i);
                g.pending.remove(&key);
                g.apply(key, *v);
            }
            g.signal_set_max(sig, to, slot, value);
            g.record_event(
                me,
                ctx,
                EventKind::PutWithSignal { buf, to, off, n: vals.len(), sig, slot, value },
            );
            Ok(())
        })
    }

    /// Sets a notification counter on `to`. Release ordering publishes all of
    /// the caller's buffered plain stores first; relaxed publishes only the
    /// counter value.
    pub fn signal_store(
        &mut self,
        sig: SigId,
        to: usize,
        slot: usize,
        value: u64,
        ordering: StoreOrdering,
    ) -> Result<(), PgasError> {
        self.op(move |g, me, ctx| {
            if slot >= g.sigs[sig.0][to].len() {
                return Err(PgasError::OutOfBounds(format!("signal slot {slot}")));
            }
            if ordering == StoreOrdering::Release {
                g.flush_pe(me, false);
            }
            g.signal_set_max(sig, to, slot, value);
            g.record_event(me, ctx, EventKind::SignalStore { sig, to, slot, value, ordering });
            Ok(())
        })
    }

    /// Acquire-waits until the caller's own signal slot reaches `value`.
    pub fn signal_wait(&mut self, sig: SigId, slot: usize, value: u64) -> Result<(), PgasError> {
        self.wait_op(
            WaitCond::SignalGe { sig, pe: self.pe, slot, value },
            EventKind::SignalWait { sig, slot, value },
        )
    }

    pub fn signal_read(&mut self, sig: SigId, slot: usize) -> Result<u64, PgasError> {
        self.op(move |g, me, _| Ok(g.sigs[sig.0][me][slot]))
    }

    /// Totally ordered fetch-and-increment with release semantics at the
    /// caller's coherence scope: same-PE observers of the counter see the
    /// caller's prior writes; cross-island publication still requires a
    /// release store or put-with-signal.
    pub fn counter_inc_release(&mut self, ctr: CtrId, on: usize, idx: usize) -> Result<u64, PgasError> {
        self.op(move |g, me, ctx| {
            if idx >= g.ctrs[ctr.0][on].len() {
                return Err(PgasError::OutOfBounds(format!("counter {idx}")));
            }
            let prev = g.ctrs[ctr.0][on][idx];
            g.ctrs[ctr.0][on][idx] = prev + 1;
            g.record_event(me, ctx, EventKind::CounterInc { ctr, on, idx, prev });
            Ok(prev)
        })
    }

    pub fn counter_read(&mut self, ctr: CtrId, on: usize, idx: usize) -> Result<u64, PgasError> {
        self.op(move |g, _, _| Ok(g.ctrs[ctr.0][on][idx]))
    }

    /// Acquire-waits until the caller's own counter reaches `value`.
    pub fn counter_wait(&mut self, ctr: CtrId, idx: usize, value: u64) -> Result<(), PgasError> {
        self.wait_op(
            WaitCond::CounterGe { ctr, pe: self.pe, idx, value },
            EventKind::CounterWait { ctr, idx, value },
        )
    }

    /// Completes all of the caller PE's outstanding puts and plain stores.
    pub fn quiet(&mut self) -> Result<(), PgasError> {
        self.op(move |g, me, ctx| {
            g.flush_pe(me, true);
            g.record_event(me, ctx, EventKind::Quiet);
            Ok(())
        })
    }

    /// Synchronizes all PEs; implies quiet. Root contexts only.
    pub fn barrier_all(&mut self) -> Result<(), PgasError> {
        if !self.root {
            return Err(PgasError::Internal("barrier_all from a task context".into()));
        }
        let epoch = {
            let mut g = self.lock();
            if let Some(p) = Self::poisoned(&g) {
                return Err(p);
            }
            let (pe, ctx) = (self.pe, self.ctx);
            g.flush_pe(pe, true);
            let epoch = g.barrier_epoch;
            g.barrier_arrived[pe] = true;
            if g.barrier_arrived.iter().all(|&a| a) {
                g.barrier_arrived.iter_mut().for_each(|a| *a = false);
                g.barrier_epoch += 1;
                if !g.det {
                    self.inner.conc_cv.notify_all();
                }
            }
            g.record_event(pe, ctx, EventKind::Barrier);
            epoch
        };
        self.wait_op(WaitCond::BarrierDone { epoch }, EventKind::Note {
            tag: "barrier-release".into(),
            a: epoch,
            b: 0,
        })
    }

    /// Simulated compute phase of `cost` abstract units; a scheduling point.
    pub fn compute(&mut self, cost: u64) -> Result<(), PgasError> {
        self.op(move |g, me, ctx| {
            g.record_event(me, ctx, EventKind::Compute { cost });
            Ok(())
        })
    }

    /// Engine-level annotation in the execution record.
    pub fn note(&mut self, tag: &str, a: u64, b: u64) -> Result<(), PgasError> {
        let tag = tag.to_string();
        self.op(move |g, me, ctx| {
            g.record_event(me, ctx, EventKind::Note { tag, a, b });
            Ok(())
        })
    }

    /// Spawns a sibling context on this PE, interleaved with every other
    /// context by the scheduler.
    pub fn spawn(
        &mut self,
        f: impl FnOnce(&mut PeCtx) -> Result<(), PgasError> + Send + 'static,
    ) -> Result<TaskHandle, PgasError> {
        let inner = Arc::clone(&self.inner);
        let child = {
            let mut g = self.lock();
            if let Some(p) = Self::poisoned(&g) {
                return Err(p);
            }
            let cv = Arc::new(Condvar::new());
            g.ctxs.push(Ctx {
                pe: self.pe,
                status: Status::Runnable,
                cv: Arc::clone(&cv),
            });
            let id = g.ctxs.len() - 1;
            let (pe, ctx) = (self.pe, self.ctx);
            g.record_event(pe, ctx, EventKind::Spawn { child: id });
            drop(g);
            let pe_copy = self.pe;
            let handle = std::thread::Builder::new()
                .name(format!("pe{}-task{}", self.pe, id))
                .stack_size(TASK_STACK)
                .spawn(move || ctx_body(inner, pe_copy, id, false, cv, Box::new(f)))
                .map_err(|e| PgasError::Internal(format!("spawn: {e}")))?;
            self.inner.tasks.lock().expect("task list").push(handle);
            id
        };
        // separate scheduling point so the child is visible before we move on
        let g = self.lock();
        if let Some(p) = Self::poisoned(&g) {
            return Err(p);
        }
        drop(self.yield_turn(g)?);
        Ok(TaskHandle { ctx: child })
    }

    /// Waits for a spawned context to finish.
    pub fn join(&mut self, task: TaskHandle) -> Result<(), PgasError> {
        self.wait_op(
            WaitCond::CtxDone { ctx: task.ctx },
            EventKind::Join { child: task.ctx },
        )
    }
}

fn ctx_body(inner: Arc<WorldInner>, pe: usize, ctx: usize, root: bool, cv: Arc<Condvar>, f: PeProgram) {
    let det = matches!(inner.cfg.exec, ExecMode::Deterministic { .. });
    // wait for the first schedule slot
    if det {
        let mut g = inner.shared.lock().expect("world lock");
        loop {
            if g.poison.is_some() {
                g.ctxs[ctx].status = Status::Done;
                return;
            }
            if g.running == Some(ctx) {
                break;
            }
            g = cv.wait(g).expect("world lock");
        }
    }
    let mut pc = PeCtx {
        inner: Arc::clone(&inner),
        pe,
        ctx,
        root,
        cv,
    };
    let result = catch_unwind(AssertUnwindSafe(|| f(&mut pc)));
    let mut g = inner.shared.lock().expect("world lock");
    g.ctxs[ctx].status = Status::Done;
    match result {
        Ok(Ok(())) => {}
        Ok(Err(e)) => g.poison_with(e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "program panicked".into());
            g.poison_with(PgasError::Internal(msg));
        }
    }
    if g.poison.is_none() {
        if det {
            g.pick_next();
        } else {
            inner.conc_cv.notify_all();
        }
    } else if !det {
        inner.conc_cv.notify_all();
    }
}

/// Executes one program per PE under the configured scheduler and memory
/// model, returning the event record and final (flushed) memory.
pub fn run_world(cfg: WorldCfg, programs: Vec<PeProgram>) -> Result<WorldOutcome, PgasError> {
    assert_eq!(programs.len(), cfg.n_pes, "one program per PE");
    let n = cfg.n_pes;
    let det = matches!(cfg.exec, ExecMode::Deterministic { .. });
    let seed = match cfg.exec {
        ExecMode::Deterministic { seed } => seed,
        ExecMode::Concurrent => 0x5eed,
    };
    let shared = Shared {
        n_pes: n,
        memory: cfg.memory,
        det,
        record: cfg.record_events,
        rng: ChaCha8Rng::seed_from_u64(seed),
        clock: 0,
        events: Vec::new(),
        bufs: Vec::new(),
        sigs: Vec::new(),
        ctrs: Vec::new(),
        pending: HashMap::new(),
        pending_keys: vec![Vec::new(); n],
        ctxs: Vec::new(),
        running: None,
        poison: None,
        alloc_posts: vec![None; n],
        alloc_counts: vec![0; n],
        alloc_results: Vec::new(),
        barrier_arrived: vec![false; n],
        barrier_epoch: 0,
    };
    let inner = Arc::new(WorldInner {
        cfg,
        shared: Mutex::new(shared),
        conc_cv: Condvar::new(),
        tasks: Mutex::new(Vec::new()),
    });

    let mut roots = Vec::with_capacity(n);
    {
        let mut g = inner.shared.lock().expect("world lock");
        for pe in 0..n {
            g.ctxs.push(Ctx {
                pe,
                status: Status::Runnable,
                cv: Arc::new(Condvar::new()),
            });
        }
    }
    for (pe, prog) in programs.into_iter().enumerate() {
        let inner2 = Arc::clone(&inner);
        let cv = {
            let g = inner.shared.lock().expect("world lock");
            Arc::clone(&g.ctxs[pe].cv)
        };
        roots.push(
            std::thread::Builder::new()
                .name(format!("pe{pe}"))
                .stack_size(TASK_STACK)
                .spawn(move || ctx_body(inner2, pe, pe, true, cv, prog))
                .expect("spawn pe thread"),
        );
    }
    if det {
        let mut g = inner.shared.lock().expect("world lock");
        g.pick_next();
    }
    for r in roots {
        let _ = r.join();
    }
    loop {
        let handle = inner.tasks.lock().expect("task list").pop();
        match handle {
            Some(h) => {
                let _ = h.join();
            }
            None => break,
        }
    }

    let mut g = inner.shared.lock().expect("world lock");
    if let Some(p) = g.poison.take() {
        return Err(p);
    }
    for pe in 0..n {
        g.flush_pe(pe, true);
    }
    let record = ExecutionRecord {
        events: std::mem::take(&mut g.events),
        n_pes: n,
    };
    Ok(WorldOutcome {
        record,
        bufs: g.bufs.iter().map(|b| b.data.clone()).collect(),
        sigs: g.sigs.clone(),
    })
}
