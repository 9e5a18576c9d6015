//! Halo-exchange engines over the simulated PGAS runtime.
//!
//! Two coordinate engines with identical results: a serialized per-pulse
//! baseline (pack, transfer, full completion between pulses) and a fused
//! engine that launches task blocks for all pulses at once, packs
//! independent entries immediately, and gates dependent packing on the
//! predecessor pulses' arrival signals. Force exchange runs the reverse
//! pattern, walking pulses from last to first and forwarding accumulated
//! forces down the dependency chain.
//!
//! Halo slots are poisoned with a sentinel before every exchange; any path
//! that packs, forwards, or consumes a sentinel records a note in the
//! execution record, turning memory-ordering bugs into value-level
//! detections.

mod engines;
pub mod harness;
pub mod oracle;


pub use engines::{
    fused_coord_exchange, fused_force_exchange, run_step, serialized_coord_exchange,
    serialized_force_exchange,
};

use crate::dd::{self, AtomSet, DdGrid, PulsePlan, SimBox};
use crate::pgas::{BufId, CtrId, PeCtx, PgasError, SigId, Val};
use std::sync::Arc;

/// Poison value pre-filling halo slots; never a legal coordinate or force.
pub const SENTINEL: f64 = -6.022140761e23;
pub const SENTINEL3: Val = [SENTINEL; 3];

pub fn is_sentinel(v: &Val) -> bool {
    v[0] == SENTINEL
}

/// A decomposed system ready to exchange.
#[derive(Debug, Clone)]
pub struct System {
    pub sim: SimBox,
    pub grid: DdGrid,
    pub atoms: AtomSet,
    pub plan: Arc<PulsePlan>,
}

impl System {
    pub fn build(sim: SimBox, grid: DdGrid, atoms: AtomSet) -> Result<Self, dd::DdError> {
        let plan = Arc::new(dd::build_halo_zones(&grid, &sim, &atoms)?);
        Ok(System { sim, grid, atoms, plan })
    }

    /// Random system on an explicit grid; cell widths are drawn from the
    /// seed within single-pulse bounds.
    pub fn random(np: [usize; 3], n_atoms: usize, seed: u64) -> Result<Self, dd::DdError> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let cutoff = 1.0;
        let mut lengths = [0.0; 3];
        for (d, l) in lengths.iter_mut().enumerate() {
            let cell = rng.gen_range(1.6..3.0) * cutoff;
            *l = cell * np[d] as f64;
        }
        let sim = SimBox::new(lengths, cutoff)?;
        let atoms = AtomSet::random(&sim, n_atoms, seed);
        Self::build(sim, DdGrid::new(np), atoms)
    }
}

/// Protocol faults injected for the mutation-detection suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Pack dependent entries without acquiring the predecessor signals.
    DropPackWait,
    /// Notify with relaxed ordering (or decoupled put plus relaxed signal)
    /// where release / put-with-signal is required.
    RelaxedNotify,
    /// Forward accumulated forces without waiting for subsequent pulses.
    SkipDepMgmtWait,
}

/// The injectable faults, in suite order.
pub const ALL_MUTATIONS: [Mutation; 3] = [
    Mutation::DropPackWait,
    Mutation::RelaxedNotify,
    Mutation::SkipDepMgmtWait,
];

impl Mutation {
    pub fn parse(name: &str) -> Option<Mutation> {
        match name {
            "none" => Some(Mutation::None),
            "drop-pack-wait" => Some(Mutation::DropPackWait),
            "relaxed-notify" => Some(Mutation::RelaxedNotify),
            "skip-depmgmt-wait" => Some(Mutation::SkipDepMgmtWait),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mutation::None => "none",
            Mutation::DropPackWait => "drop-pack-wait",
            Mutation::RelaxedNotify => "relaxed-notify",
            Mutation::SkipDepMgmtWait => "skip-depmgmt-wait",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Serialized,
    Fused,
}

impl Schedule {
    pub fn parse(name: &str) -> Option<Schedule> {
        match name {
            "serialized" => Some(Schedule::Serialized),
            "fused" => Some(Schedule::Fused),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Serialized => "serialized",
            Schedule::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    /// Chunk length per task block.
    pub buf_len: usize,
    /// Block count for staged transport (grid-strided over chunks).
    pub staged_blocks: usize,
    pub mutation: Mutation,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            buf_len: dd::DEFAULT_BUF_LEN,
            staged_blocks: 4,
            mutation: Mutation::None,
        }
    }
}

impl EngineConfig {
    pub fn with_mutation(mut self, m: Mutation) -> Self {
        self.mutation = m;
        self
    }

    /// Small chunks force multi-block pulses on small test systems.
    pub fn with_buf_len(mut self, n: usize) -> Self {
        self.buf_len = n.max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// Peer reference present: direct remote stores / bulk reads.
    Direct,
    /// Cross-island: staging buffer plus put-with-signal.
    Staged,
}

/// Global pulse bookkeeping for one step: per-pulse signals, the expected
/// signal value, and the per-pulse block-completion counters.
#[derive(Debug, Clone, Copy)]
pub struct CommContext {
    pub total_pulses: usize,
    pub coord_signals: SigId,
    pub force_signals: SigId,
    pub coord_counters: CtrId,
    pub force_counters: CtrId,
    /// Zero-based step index; signal values strictly increase per step.
    pub step: u64,
}

impl CommContext {
    pub fn sig_val(&self) -> u64 {
        self.step + 1
    }
}

/// One unit of cooperative work: a chunk range of one pulse's send.
#[derive(Debug, Clone, Copy)]
pub struct TaskBlock {
    pub pulse: usize,
    pub block: usize,
    pub offset: usize,
    pub len: usize,
}

/// Per-pulse execution shape on one rank.
#[derive(Debug, Clone, Copy)]
pub struct PulseExec {
    pub transport: Transport,
    /// Task blocks covering the pulse's send size (at least one, so that
    /// zero-size pulses still notify).
    pub blocks: usize,
}

impl PulseExec {
    /// Chunks handled by `block`: contiguous for direct transport, strided
    /// over chunk indices for staged transport. Together the blocks
    /// partition `[0, size)`.
    pub fn chunks(&self, pulse: usize, block: usize, size: usize, buf_len: usize) -> Vec<TaskBlock> {
        let n_chunks = size.div_ceil(buf_len);
        (0..n_chunks)
            .filter(|c| match self.transport {
                Transport::Direct => *c == block,
                Transport::Staged => c % self.blocks == block,
            })
            .map(|c| {
                let offset = c * buf_len;
                TaskBlock {
                    pulse,
                    block,
                    offset,
                    len: buf_len.min(size - offset),
                }
            })
            .collect()
    }
}

fn plan_blocks(transport: Transport, size: usize, cfg: &EngineConfig) -> usize {
    let n_chunks = size.div_ceil(cfg.buf_len).max(1);
    match transport {
        Transport::Direct => n_chunks,
        Transport::Staged => n_chunks.min(cfg.staged_blocks).max(1),
    }
}

/// Per-rank exchange state: symmetric coordinate/force arrays sized
/// home + halo (padded to the largest rank), staging buffers, and the
/// execution shape of every pulse.
#[derive(Debug, Clone)]
pub struct RankState {
    pub plan: Arc<PulsePlan>,
    pub rank: usize,
    pub home_count: usize,
    pub total_count: usize,
    pub coords: BufId,
    pub forces: BufId,
    /// Per-pulse staging for outgoing packed coordinates (local on sender).
    pub stage_send: Vec<BufId>,
    /// Per-pulse staging where incoming force payloads land (put target).
    pub stage_frecv: Vec<BufId>,
    pub ctx: CommContext,
    pub exec: Vec<PulseExec>,
    pub cfg: EngineConfig,
}

impl RankState {
    pub fn pulse(&self, p: usize) -> &dd::PulseData {
        &self.plan.ranks[self.rank].pulses[p]
    }

    /// Positions in the index map below which entries are home atoms.
    pub fn independent_split(&self, p: usize) -> usize {
        let pd = self.pulse(p);
        pd.index_map.partition_point(|&i| i < pd.dep_offset)
    }

    /// Atom id held by a local slot.
    pub fn atom_id_of_slot(&self, slot: usize) -> u64 {
        let rp = &self.plan.ranks[self.rank];
        self.plan_atom_id(rp.atom_of_slot(slot))
    }

    fn plan_atom_id(&self, atom: usize) -> u64 {
        atom as u64
    }
}

/// Collectively allocates all exchange state and initializes this rank:
/// home coordinates written, halo slots poisoned, forces zeroed. Ends with
/// a barrier so no peer write races initialization.
pub fn setup_rank(
    pc: &mut PeCtx,
    sys: &System,
    cfg: EngineConfig,
    step: u64,
) -> Result<RankState, PgasError> {
    let plan = Arc::clone(&sys.plan);
    let rank = pc.pe();
    let max_total = plan.max_total_count().max(1);
    let total_pulses = plan.total_pulses;

    let coords = pc.alloc_symmetric(max_total, crate::pgas::ElemKind::Real3)?;
    let forces = pc.alloc_symmetric(max_total, crate::pgas::ElemKind::Real3)?;
    let coord_signals = pc.alloc_signals(total_pulses.max(1))?;
    let force_signals = pc.alloc_signals(total_pulses.max(1))?;
    let coord_counters = pc.alloc_counters(total_pulses.max(1))?;
    let force_counters = pc.alloc_counters(total_pulses.max(1))?;
    let mut stage_send = Vec::with_capacity(total_pulses);
    let mut stage_frecv = Vec::with_capacity(total_pulses);
    for p in 0..total_pulses {
        let len = plan.max_send_size(p).max(1);
        stage_send.push(pc.alloc_symmetric(len, crate::pgas::ElemKind::Real3)?);
        stage_frecv.push(pc.alloc_symmetric(len, crate::pgas::ElemKind::Real3)?);
    }

    let exec = (0..total_pulses)
        .map(|p| {
            let pd = &plan.ranks[rank].pulses[p];
            let transport = if pc.peer_ref(coords, pd.send_rank).is_some() {
                Transport::Direct
            } else {
                Transport::Staged
            };
            PulseExec {
                transport,
                blocks: plan_blocks(transport, pd.send_size, &cfg),
            }
        })
        .collect();

    let (home_count, total_count) = {
        let rp = &plan.ranks[rank];
        (rp.home_count, rp.total_count)
    };
    let home: Vec<Val> = plan.ranks[rank]
        .home_atoms
        .iter()
        .map(|&a| sys.atoms.positions[a])
        .collect();
    if !home.is_empty() {
        pc.write(coords, rank, 0, &home)?;
    }
    let halo_len = total_count - home_count;
    if halo_len > 0 {
        pc.write(coords, rank, home_count, &vec![SENTINEL3; halo_len])?;
    }
    pc.quiet()?;
    pc.barrier_all()?;

    Ok(RankState {
        plan,
        rank,
        home_count,
        total_count,
        coords,
        forces,
        stage_send,
        stage_frecv,
        ctx: CommContext {
            total_pulses,
            coord_signals,
            force_signals,
            coord_counters,
            force_counters,
            step,
        },
        exec,
        cfg,
    })
}

/// Reads and shift-adjusts index-map entries `range` of pulse `p` from this
/// rank's coordinates. Both engines pack through here so their payloads are
/// bit-identical. Sentinel reads are recorded, never silently dropped.
pub(crate) fn pack_entries(
    pc: &mut PeCtx,
    st: &RankState,
    p: usize,
    range: std::ops::Range<usize>,
) -> Result<Vec<Val>, PgasError> {
    let pd = st.pulse(p);
    let idxs = &pd.index_map[range];
    let raw = pc.gather(st.coords, idxs)?;
    let mut out = Vec::with_capacity(raw.len());
    for (j, v) in raw.iter().enumerate() {
        if is_sentinel(v) {
            pc.note("sentinel-pack", p as u64, idxs[j] as u64)?;
        }
        out.push([
            v[0] + pd.coord_shift[0],
            v[1] + pd.coord_shift[1],
            v[2] + pd.coord_shift[2],
        ]);
    }
    Ok(out)
}

/// Post-arrival read of the full halo region, modeling the consumer kernel;
/// any sentinel still present is recorded as a leak.
pub(crate) fn consume_halo_check(pc: &mut PeCtx, st: &RankState) -> Result<(), PgasError> {
    let halo_len = st.total_count - st.home_count;
    if halo_len == 0 {
        return Ok(());
    }
    let vals = pc.read(st.coords, st.rank, st.home_count, halo_len)?;
    for (i, v) in vals.iter().enumerate() {
        if is_sentinel(v) {
            pc.note("sentinel-halo", 0, (st.home_count + i) as u64)?;
        }
    }
    Ok(())
}

/// Deterministic small-integer partial force contributed by `rank` for an
/// atom; integer-valued so unordered accumulation is exact.
pub fn synthetic_force(atom_id: u64, rank: usize) -> Val {
    fn mix(mut x: u64) -> u64 {
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
    let base = mix(atom_id.wrapping_mul(0x1000_0001b3) ^ ((rank as u64) << 17));
    let comp = |k: u64| ((mix(base ^ k) % 17) as f64) - 8.0;
    [comp(1), comp(2), comp(3)]
}

/// Fills this rank's force array with its synthetic partial contributions
/// (home and halo slots) and publishes them, modeling the completed force
/// kernel that precedes the force exchange.
pub fn fill_synthetic_forces(pc: &mut PeCtx, st: &RankState) -> Result<(), PgasError> {
    let vals: Vec<Val> = (0..st.total_count)
        .map(|slot| synthetic_force(st.atom_id_of_slot(slot), st.rank))
        .collect();
    if !vals.is_empty() {
        pc.write(st.forces, st.rank, 0, &vals)?;
    }
    pc.quiet()?;
    Ok(())
}
