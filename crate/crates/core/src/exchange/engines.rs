//! The exchange engines: serialized baselines and the fused
//! dependency-partitioned coordinate and force exchanges.

use super::*;
use crate::pgas::{PeCtx, PgasError, StoreOrdering};

/// Baseline coordinate exchange: one pulse at a time in global order, with a
/// full barrier between pulses. Transfers land directly in the receiver's
/// coordinate array.
pub fn serialized_coord_exchange(pc: &mut PeCtx, st: &RankState) -> Result<(), PgasError> {
    for p in 0..st.ctx.total_pulses {
        let pd = st.pulse(p);
        if pd.send_size > 0 {
            let vals = pack_entries(pc, st, p, 0..pd.send_size)?;
            pc.put(st.coords, pd.send_rank, pd.remote_atom_offset, &vals)?;
        }
        pc.barrier_all()?;
    }
    consume_halo_check(pc, st)?;
    pc.barrier_all()?;
    Ok(())
}

/// Acquire-waits the arrival signals of every pulse preceding `p`, i.e. the
/// transitive closure of the first-dependent-pulse chain. Dependent index
/// map entries may reference halo landed by any earlier pulse, so the whole
/// chain gates dependent packing.
fn wait_predecessors(pc: &mut PeCtx, st: &RankState, p: usize) -> Result<(), PgasError> {
    let mut k = st.plan.first_dependent[p];
    while let Some(q) = k {
        pc.signal_wait(st.ctx.coord_signals, q, st.ctx.sig_val())?;
        k = st.plan.first_dependent[q];
    }
    Ok(())
}

/// Dependency-partitioned pack of one task block's chunks: independent
/// entries (home atoms) packed and shipped immediately, then one leader
/// wait on the predecessor signals, then the dependent entries.
fn pack_with_deps(
    pc: &mut PeCtx,
    st: &RankState,
    p: usize,
    block: usize,
    write_run: &mut impl FnMut(&mut PeCtx, usize, &[Val]) -> Result<(), PgasError>,
) -> Result<(), PgasError> {
    let pd = st.pulse(p);
    let exec = &st.exec[p];
    let split = st.independent_split(p);
    let chunks = exec.chunks(p, block, pd.send_size, st.cfg.buf_len);

    // phase 1: independent entries of every chunk
    for c in &chunks {
        let hi = c.offset + c.len;
        if c.offset < split {
            let run = c.offset..split.min(hi);
            let vals = pack_entries(pc, st, p, run.clone())?;
            write_run(pc, run.start, &vals)?;
        }
    }
    let has_dependent = chunks.iter().any(|c| c.offset + c.len > split);
    if has_dependent {
        // elected leader acquire-waits, then the scope barrier releases the
        // workers into phase 2 (collapsed into this block context)
        if st.cfg.mutation != Mutation::DropPackWait {
            wait_predecessors(pc, st, p)?;
        }
        for c in &chunks {
            let hi = c.offset + c.len;
            if hi > split {
                let run = split.max(c.offset)..hi;
                let vals = pack_entries(pc, st, p, run.clone())?;
                write_run(pc, run.start, &vals)?;
            }
        }
    }
    Ok(())
}

/// Last-arriving block of a pulse notifies the receiver: release store on
/// the direct path (relaxed when nothing was written), put-with-signal on
/// the staged path.
fn sync_and_comm_coord(pc: &mut PeCtx, st: &RankState, p: usize) -> Result<(), PgasError> {
    let pd = st.pulse(p);
    let exec = &st.exec[p];
    let blocks = exec.blocks as u64;
    if exec.blocks > 1 {
        let prev = pc.counter_inc_release(st.ctx.coord_counters, st.rank, p)?;
        if prev != (st.ctx.step + 1) * blocks - 1 {
            return Ok(());
        }
    }
    match exec.transport {
        Transport::Direct => {
            let has_data_writes = pd.send_size > 0;
            let ordering = if st.cfg.mutation == Mutation::RelaxedNotify || !has_data_writes {
                StoreOrdering::Relaxed
            } else {
                StoreOrdering::Release
            };
            pc.signal_store(st.ctx.coord_signals, pd.send_rank, p, st.ctx.sig_val(), ordering)?;
        }
        Transport::Staged => {
            let vals = pc.read(st.stage_send[p], st.rank, 0, pd.send_size)?;
            if st.cfg.mutation == Mutation::RelaxedNotify {
                pc.put(st.coords, pd.send_rank, pd.remote_atom_offset, &vals)?;
                pc.signal_store(
                    st.ctx.coord_signals,
                    pd.send_rank,
                    p,
                    st.ctx.sig_val(),
                    StoreOrdering::Relaxed,
                )?;
            } else {
                pc.put_with_signal(
                    st.coords,
                    pd.send_rank,
                    pd.remote_atom_offset,
                    &vals,
                    st.ctx.coord_signals,
                    p,
                    st.ctx.sig_val(),
                )?;
            }
        }
    }
    Ok(())
}

fn coord_block_body(pc: &mut PeCtx, st: &RankState, p: usize, block: usize) -> Result<(), PgasError> {
    let pd = st.pulse(p);
    match st.exec[p].transport {
        Transport::Direct => {
            // direct remote stores as runs become ready
            let (coords, dst, base) = (st.coords, pd.send_rank, pd.remote_atom_offset);
            pack_with_deps(pc, st, p, block, &mut |pc, start, vals| {
                pc.write(coords, dst, base + start, vals)
            })?;
        }
        Transport::Staged => {
            // pack into the local staging buffer; the last block ships it
            let (stage, me) = (st.stage_send[p], st.rank);
            pack_with_deps(pc, st, p, block, &mut |pc, start, vals| {
                pc.write(stage, me, start, vals)
            })?;
        }
    }
    sync_and_comm_coord(pc, st, p)
}

/// Fused coordinate exchange: one cooperative launch spawns task blocks for
/// every pulse concurrently; per-pulse ordering is enforced only through
/// arrival signals and the block-completion gate. Ends once this rank's
/// own halo has fully arrived and been consumed.
pub fn fused_coord_exchange(pc: &mut PeCtx, st: &RankState) -> Result<(), PgasError> {
    let st_arc = std::sync::Arc::new(st.clone());
    let mut tasks = Vec::new();
    for p in 0..st.ctx.total_pulses {
        for b in 0..st.exec[p].blocks {
            let st2 = std::sync::Arc::clone(&st_arc);
            tasks.push(pc.spawn(move |tc| coord_block_body(tc, &st2, p, b))?);
        }
    }
    for t in tasks {
        pc.join(t)?;
    }
    // receiver-side completion is purely signal-driven: this rank's halo is
    // ready once each pulse's arrival signal reaches the step value
    for p in 0..st.ctx.total_pulses {
        pc.signal_wait(st.ctx.coord_signals, p, st.ctx.sig_val())?;
    }
    consume_halo_check(pc, st)
}

/// Sends the accumulated force slice of channel `q` back to the rank that
/// provided the coordinates. On the direct path the receiver pulls, so this
/// is notification only: a release store when this kernel wrote the slice,
/// relaxed for the initial send of pre-published forces.
fn force_send_channel(pc: &mut PeCtx, st: &RankState, q: usize, initial: bool) -> Result<(), PgasError> {
    let pd = st.pulse(q);
    match st.exec[q].transport {
        Transport::Direct => {
            let has_data_writes = !initial;
            let ordering = if st.cfg.mutation == Mutation::RelaxedNotify || !has_data_writes {
                StoreOrdering::Relaxed
            } else {
                StoreOrdering::Release
            };
            pc.signal_store(st.ctx.force_signals, pd.recv_rank, q, st.ctx.sig_val(), ordering)?;
        }
        Transport::Staged => {
            let vals = pc.read(st.forces, st.rank, pd.atom_offset, pd.recv_size)?;
            if st.cfg.mutation == Mutation::RelaxedNotify && !initial {
                pc.put(st.stage_frecv[q], pd.recv_rank, 0, &vals)?;
                pc.signal_store(
                    st.ctx.force_signals,
                    pd.recv_rank,
                    q,
                    st.ctx.sig_val(),
                    StoreOrdering::Relaxed,
                )?;
            } else {
                pc.put_with_signal(
                    st.stage_frecv[q],
                    pd.recv_rank,
                    0,
                    &vals,
                    st.ctx.force_signals,
                    q,
                    st.ctx.sig_val(),
                )?;
            }
        }
    }
    Ok(())
}

/// Scatters received force entries through the index map into this rank's
/// force array.
fn scatter_chunk(
    pc: &mut PeCtx,
    st: &RankState,
    p: usize,
    chunk: &TaskBlock,
    vals: &[Val],
    accumulate: bool,
) -> Result<(), PgasError> {
    let pd = st.pulse(p);
    let mut pairs = Vec::with_capacity(vals.len());
    for (j, v) in vals.iter().enumerate() {
        if is_sentinel(v) {
            pc.note("sentinel-force", p as u64, (chunk.offset + j) as u64)?;
        }
        pairs.push((pd.index_map[chunk.offset + j], *v));
    }
    if accumulate {
        pc.scatter_add(st.forces, &pairs)
    } else {
        pc.scatter_set(st.forces, &pairs)
    }
}

/// Dependency management after a pulse finishes unpacking: the last block
/// waits until every subsequent pulse has fully scattered locally, then
/// forwards the previous pulse's accumulated slice with its notification.
fn sync_and_comm_force_dep_mgmt(pc: &mut PeCtx, st: &RankState, p: usize) -> Result<(), PgasError> {
    let blocks = st.exec[p].blocks as u64;
    let prev = pc.counter_inc_release(st.ctx.force_counters, st.rank, p)?;
    if prev != (st.ctx.step + 1) * blocks - 1 {
        return Ok(());
    }
    if st.cfg.mutation != Mutation::SkipDepMgmtWait {
        // ensure all subsequent pulses completed before forwarding: their
        // completion counters publish the scatters into our halo slices
        for k in p + 1..st.ctx.total_pulses {
            let need = (st.ctx.step + 1) * st.exec[k].blocks as u64;
            pc.counter_wait(st.ctx.force_counters, k, need)?;
        }
    }
    force_send_channel(pc, st, p - 1, false)
}

fn force_block_body(
    pc: &mut PeCtx,
    st: &RankState,
    p: usize,
    block: usize,
    accumulate: bool,
) -> Result<(), PgasError> {
    let pd = st.pulse(p);
    let exec = &st.exec[p];
    // the initial send: forces of the last pulse go out before any waiting
    if p == st.ctx.total_pulses - 1 && block == 0 {
        force_send_channel(pc, st, p, true)?;
    }
    if pd.send_size > 0 {
        pc.signal_wait(st.ctx.force_signals, p, st.ctx.sig_val())?;
        for chunk in exec.chunks(p, block, pd.send_size, st.cfg.buf_len) {
            let vals = match exec.transport {
                Transport::Direct => pc.read(
                    st.forces,
                    pd.send_rank,
                    pd.remote_atom_offset + chunk.offset,
                    chunk.len,
                )?,
                Transport::Staged => pc.read(st.stage_frecv[p], st.rank, chunk.offset, chunk.len)?,
            };
            scatter_chunk(pc, st, p, &chunk, &vals, accumulate)?;
        }
    }
    if p > 0 {
        sync_and_comm_force_dep_mgmt(pc, st, p)?;
    }
    Ok(())
}

/// Fused force exchange: pulses processed last to first with reversed
/// send/recv roles. Receivers acquire the pulse signal, read force chunks
/// (direct bulk read or staged buffer), and scatter through the index map;
/// the dependency chain forwards accumulated slices toward the data's
/// origin. Requires forces pre-filled and published (the force kernel's
/// completion).
pub fn fused_force_exchange(pc: &mut PeCtx, st: &RankState, accumulate: bool) -> Result<(), PgasError> {
    let st_arc = std::sync::Arc::new(st.clone());
    let mut tasks = Vec::new();
    for p in (0..st.ctx.total_pulses).rev() {
        for b in 0..st.exec[p].blocks {
            let st2 = std::sync::Arc::clone(&st_arc);
            tasks.push(pc.spawn(move |tc| force_block_body(tc, &st2, p, b, accumulate))?);
        }
    }
    for t in tasks {
        pc.join(t)?;
    }
    Ok(())
}

/// Baseline force exchange: pulses from last to first, each with a staged
/// put, a full completion barrier, then the unpack scatter.
pub fn serialized_force_exchange(pc: &mut PeCtx, st: &RankState, accumulate: bool) -> Result<(), PgasError> {
    for p in (0..st.ctx.total_pulses).rev() {
        let pd = st.pulse(p);
        if pd.recv_size > 0 {
            let vals = pc.read(st.forces, st.rank, pd.atom_offset, pd.recv_size)?;
            pc.put(st.stage_frecv[p], pd.recv_rank, 0, &vals)?;
        }
        pc.barrier_all()?;
        if pd.send_size > 0 {
            let exec = &st.exec[p];
            for block in 0..exec.blocks {
                for chunk in exec.chunks(p, block, pd.send_size, st.cfg.buf_len) {
                    let vals = pc.read(st.stage_frecv[p], st.rank, chunk.offset, chunk.len)?;
                    scatter_chunk(pc, st, p, &chunk, &vals, accumulate)?;
                }
            }
        }
    }
    pc.barrier_all()?;
    Ok(())
}

/// One time-step in the GPU-resident skeleton: coordinate halo exchange,
/// synthetic local and non-local compute (which consumes the halo), force
/// fill standing in for the force kernels, force halo exchange, and an
/// integration placeholder. The fused schedule issues everything without
/// mid-step global synchronization beyond the protocol's own signals.
pub fn run_step(
    pc: &mut PeCtx,
    sys: &System,
    cfg: EngineConfig,
    schedule: Schedule,
    steps: u64,
) -> Result<RankState, PgasError> {
    let mut st = setup_rank(pc, sys, cfg, 0)?;
    for step in 0..steps {
        st.ctx.step = step;
        pc.note("step-begin", step, 0)?;
        match schedule {
            Schedule::Serialized => serialized_coord_exchange(pc, &st)?,
            Schedule::Fused => fused_coord_exchange(pc, &st)?,
        }
        pc.note("phase", step, 1)?;
        pc.compute(st.home_count as u64)?; // local non-bonded stand-in
        pc.compute((st.total_count - st.home_count) as u64)?; // non-local stand-in
        fill_synthetic_forces(pc, &st)?;
        match schedule {
            Schedule::Serialized => serialized_force_exchange(pc, &st, true)?,
            Schedule::Fused => fused_force_exchange(pc, &st, true)?,
        }
        pc.compute(st.home_count as u64 / 4)?; // integration placeholder
        pc.note("step-end", step, 0)?;
    }
    Ok(st)
}
