//! Simulated partitioned-global-address-space runtime.
//!
//! A *world* executes one program per PE. Programs interact only through the
//! operations on [`PeCtx`]: symmetric buffers, one-sided put and
//! put-with-signal, signal stores with release/relaxed ordering, acquire
//! waits, scoped atomic counters, quiet and barrier.
//!
//! Two execution regimes share one semantics contract:
//!
//! * [`ExecMode::Deterministic`] — a seeded interleaving scheduler; exactly
//!   one context runs at a time and every operation is a scheduling point.
//!   Identical seeds replay identical executions.
//! * [`ExecMode::Concurrent`] — free-running OS threads for stress runs.
//!
//! The memory model is pluggable. In [`MemoryMode::WeakAdversary`] mode every
//! plain write and non-blocking put is buffered at the writer and becomes
//! remotely visible only at that writer's next release operation (or quiet /
//! barrier); before that, a remote reader observes the stale value with
//! probability equal to the configured aggressiveness. Put-with-signal
//! publishes its payload atomically with the signal value in every mode.

mod world;

#[cfg(test)]
mod tests;

pub use world::{run_world, PeCtx, PeProgram, TaskHandle, WorldOutcome};

use serde::Serialize;
use thiserror::Error;

/// Element triple stored in every symmetric buffer slot.
pub type Val = [f64; 3];

/// Declared element kind of a symmetric buffer. Storage is uniform; the kind
/// participates in collective argument matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ElemKind {
    Real3,
    Real,
    Int,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BufId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SigId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CtrId(pub usize);

/// Direct load/store capability to a peer's symmetric memory. Present only
/// when caller and peer share an island.
#[derive(Debug, Clone, Copy)]
pub struct PeerRef {
    pub pe: usize,
}

/// Static partition of PEs into direct-access groups. PEs in one island can
/// obtain direct references to each other's symmetric memory; traffic across
/// islands must use staged puts.
#[derive(Debug, Clone, Serialize)]
pub enum Islands {
    /// Every PE in one island.
    Single,
    /// Consecutive groups of `size` PEs.
    Size(usize),
    /// Explicit island id per PE.
    Explicit(Vec<usize>),
}

impl Islands {
    pub fn island_of(&self, pe: usize) -> usize {
        match self {
            Islands::Single => 0,
            Islands::Size(k) => pe / k.max(&1),
            Islands::Explicit(v) => v[pe],
        }
    }

    pub fn same_island(&self, a: usize, b: usize) -> bool {
        self.island_of(a) == self.island_of(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum MemoryMode {
    /// Writes become visible immediately.
    Sequential,
    /// Writes buffered until the writer's next release point; a racing read
    /// observes the stale value with probability `aggressiveness`.
    WeakAdversary { aggressiveness: f64 },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub enum ExecMode {
    Deterministic { seed: u64 },
    Concurrent,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorldCfg {
    pub n_pes: usize,
    pub islands: Islands,
    pub memory: MemoryMode,
    pub exec: ExecMode,
    pub record_events: bool,
}

impl WorldCfg {
    pub fn deterministic(n_pes: usize, seed: u64) -> Self {
        WorldCfg {
            n_pes,
            islands: Islands::Single,
            memory: MemoryMode::Sequential,
            exec: ExecMode::Deterministic { seed },
            record_events: true,
        }
    }

    pub fn with_islands(mut self, islands: Islands) -> Self {
        self.islands = islands;
        self
    }

    pub fn with_memory(mut self, memory: MemoryMode) -> Self {
        self.memory = memory;
        self
    }

    pub fn weak(mut self, aggressiveness: f64) -> Self {
        self.memory = MemoryMode::WeakAdversary { aggressiveness };
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StoreOrdering {
    Release,
    Relaxed,
}

#[derive(Debug, Clone, Serialize)]
pub enum EventKind {
    AllocBuf { buf: BufId, len: usize, kind: ElemKind },
    AllocSignals { sig: SigId, len: usize },
    AllocCounters { ctr: CtrId, len: usize },
    Write { buf: BufId, owner: usize, off: usize, n: usize },
    Read { buf: BufId, owner: usize, off: usize, n: usize },
    Gather { buf: BufId, n: usize },
    ScatterAdd { buf: BufId, n: usize },
    ScatterSet { buf: BufId, n: usize },
    Put { buf: BufId, to: usize, off: usize, n: usize },
    PutWithSignal { buf: BufId, to: usize, off: usize, n: usize, sig: SigId, slot: usize, value: u64 },
    SignalStore { sig: SigId, to: usize, slot: usize, value: u64, ordering: StoreOrdering },
    SignalWait { sig: SigId, slot: usize, value: u64 },
    CounterInc { ctr: CtrId, on: usize, idx: usize, prev: u64 },
    CounterWait { ctr: CtrId, idx: usize, value: u64 },
    Quiet,
    Barrier,
    Spawn { child: usize },
    Join { child: usize },
    Compute { cost: u64 },
    /// Engine-level annotation (sentinel detections, phase markers, ...).
    Note { tag: String, a: u64, b: u64 },
}

/// One executed operation: `seq` is the simulated timestamp.
#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub seq: u64,
    pub pe: usize,
    pub ctx: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default)]
pub struct ExecutionRecord {
    pub events: Vec<Event>,
    pub n_pes: usize,
}

impl ExecutionRecord {
    pub fn count<F: Fn(&Event) -> bool>(&self, f: F) -> usize {
        self.events.iter().filter(|e| f(e)).count()
    }

    pub fn notes_with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| {
            matches!(&e.kind, EventKind::Note { tag: t, .. } if t.starts_with(tag))
        })
    }

    /// Line-delimited JSON export, one event per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Dump of one blocked waiter for deadlock reports.
#[derive(Debug, Clone, Serialize)]
pub struct BlockedWaiter {
    pub pe: usize,
    pub ctx: usize,
    pub waiting_on: String,
}

#[derive(Debug, Clone, Error)]
pub enum PgasError {
    #[error("simulation deadlock: every context blocked; waiters: {}",
        .waiters.iter().map(|w| format!("pe{}/ctx{} on {}", w.pe, w.ctx, w.waiting_on))
            .collect::<Vec<_>>().join(", "))]
    SimDeadlock { waiters: Vec<BlockedWaiter> },
    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("no direct access: {0}")]
    NotAccessible(String),
    #[error("world already failed: {0}")]
    Poisoned(String),
    #[error("internal: {0}")]
    Internal(String),
}
