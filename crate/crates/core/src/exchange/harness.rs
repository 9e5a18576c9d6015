//! Verification harness: builds worlds around the engines, compares results
//! against the brute-force oracles, counts notifications, sweeps scheduler
//! seeds under the weak-memory adversary, and checks that injected protocol
//! faults are caught.

use super::oracle::{direct_gather_oracle, direct_scatter_oracle};
use super::*;
use crate::pgas::{
    run_world, EventKind, ExecutionRecord, Islands, PeProgram, PgasError, SigId, WorldCfg,
};
use serde::Serialize;
use std::collections::HashMap;
use std::sync::Arc;

/// Buffer handles are fixed by the allocation order in [`setup_rank`].
pub mod layout {
    use crate::pgas::{BufId, SigId};

    pub const COORDS: BufId = BufId(0);
    pub const FORCES: BufId = BufId(1);
    pub const COORD_SIGNALS: SigId = SigId(0);
    pub const FORCE_SIGNALS: SigId = SigId(1);
}

/// One verification check outcome, exported as a line-delimited record.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub pass: bool,
    pub seed: u64,
    pub grid: String,
    pub detail: String,
}

impl CheckResult {
    fn pass(check: &str, seed: u64, grid: String, detail: String) -> Self {
        CheckResult { check: check.into(), pass: true, seed, grid, detail }
    }

    fn fail(check: &str, seed: u64, grid: String, detail: String) -> Self {
        CheckResult { check: check.into(), pass: false, seed, grid, detail }
    }
}

fn grid_name(np: [usize; 3]) -> String {
    format!("{}x{}x{}", np[0], np[1], np[2])
}

pub struct CoordRun {
    /// Halo-region values per rank, in landing order.
    pub halo: Vec<Vec<crate::pgas::Val>>,
    pub record: ExecutionRecord,
}

/// Runs one coordinate exchange on every rank and extracts the halo region.
pub fn run_coord(
    sys: &Arc<System>,
    world: WorldCfg,
    ecfg: EngineConfig,
    schedule: Schedule,
) -> Result<CoordRun, PgasError> {
    let n = sys.grid.total_ranks();
    let programs: Vec<PeProgram> = (0..n)
        .map(|_| {
            let sys = Arc::clone(sys);
            Box::new(move |pc: &mut crate::pgas::PeCtx| {
                let st = setup_rank(pc, &sys, ecfg, 0)?;
                match schedule {
                    Schedule::Serialized => serialized_coord_exchange(pc, &st),
                    Schedule::Fused => fused_coord_exchange(pc, &st),
                }
            }) as PeProgram
        })
        .collect();
    let out = run_world(world, programs)?;
    let halo = (0..n)
        .map(|r| {
            let rp = &sys.plan.ranks[r];
            out.buffer(layout::COORDS, r)[rp.home_count..rp.total_count].to_vec()
        })
        .collect();
    Ok(CoordRun { halo, record: out.record })
}

pub struct ForceRun {
    /// Full force arrays per rank (home + halo slots).
    pub forces: Vec<Vec<crate::pgas::Val>>,
    pub record: ExecutionRecord,
}

/// Runs one force exchange (forces prefilled with the synthetic
/// per-rank contributions) and extracts the resulting arrays.
pub fn run_force(
    sys: &Arc<System>,
    world: WorldCfg,
    ecfg: EngineConfig,
    schedule: Schedule,
    accumulate: bool,
) -> Result<ForceRun, PgasError> {
    let n = sys.grid.total_ranks();
    let programs: Vec<PeProgram> = (0..n)
        .map(|_| {
            let sys = Arc::clone(sys);
            Box::new(move |pc: &mut crate::pgas::PeCtx| {
                let st = setup_rank(pc, &sys, ecfg, 0)?;
                fill_synthetic_forces(pc, &st)?;
                pc.barrier_all()?; // all partial forces standing before the exchange
                match schedule {
                    Schedule::Serialized => serialized_force_exchange(pc, &st, accumulate),
                    Schedule::Fused => fused_force_exchange(pc, &st, accumulate),
                }
            }) as PeProgram
        })
        .collect();
    let out = run_world(world, programs)?;
    let forces = (0..n)
        .map(|r| out.buffer(layout::FORCES, r)[..sys.plan.ranks[r].total_count].to_vec())
        .collect();
    Ok(ForceRun { forces, record: out.record })
}

/// Compares one run's halo regions against the direct-gather oracle,
/// bit-for-bit on positions and shifts.
pub fn halo_matches_oracle(sys: &System, halo: &[Vec<crate::pgas::Val>]) -> Result<(), String> {
    let expected = direct_gather_oracle(&sys.grid, &sys.sim, &sys.atoms);
    for r in 0..sys.grid.total_ranks() {
        let rp = &sys.plan.ranks[r];
        let mut want: HashMap<usize, &super::oracle::OracleEntry> =
            expected.per_rank[r].iter().map(|e| (e.atom, e)).collect();
        if halo[r].len() != want.len() {
            return Err(format!(
                "rank {r}: {} halo slots vs {} oracle entries",
                halo[r].len(),
                want.len()
            ));
        }
        for (i, got) in halo[r].iter().enumerate() {
            let h = &rp.halo[i];
            let e = want
                .remove(&h.atom)
                .ok_or_else(|| format!("rank {r} slot {i}: atom {} not in oracle set", h.atom))?;
            if got != &e.coord {
                return Err(format!(
                    "rank {r} slot {i} atom {}: got {:?}, oracle {:?}",
                    h.atom, got, e.coord
                ));
            }
            if h.shift != e.shift {
                return Err(format!(
                    "rank {r} slot {i} atom {}: shift {:?}, oracle {:?}",
                    h.atom, h.shift, e.shift
                ));
            }
        }
    }
    Ok(())
}

/// Expected per-atom force totals for the synthetic contribution scheme.
pub fn expected_force_totals(sys: &System) -> Vec<crate::pgas::Val> {
    let contributions: Vec<Vec<(usize, crate::pgas::Val)>> = sys
        .plan
        .ranks
        .iter()
        .map(|rp| {
            (0..rp.total_count)
                .map(|slot| {
                    let atom = rp.atom_of_slot(slot);
                    (atom, synthetic_force(atom as u64, rp.rank))
                })
                .collect()
        })
        .collect();
    direct_scatter_oracle(sys.atoms.len(), &contributions)
}

/// Checks accumulated per-atom totals (exact, integer contributions) and
/// the global force-sum invariant.
pub fn forces_match_oracle(sys: &System, forces: &[Vec<crate::pgas::Val>]) -> Result<(), String> {
    let totals = expected_force_totals(sys);
    let mut global_expected = [0.0; 3];
    for t in &totals {
        for c in 0..3 {
            global_expected[c] += t[c];
        }
    }
    let mut global_got = [0.0; 3];
    for rp in &sys.plan.ranks {
        for (slot, &atom) in rp.home_atoms.iter().enumerate() {
            let got = forces[rp.rank][slot];
            if got != totals[atom] {
                return Err(format!(
                    "rank {} home slot {slot} atom {atom}: got {:?}, oracle {:?}",
                    rp.rank, got, totals[atom]
                ));
            }
            for c in 0..3 {
                global_got[c] += got[c];
            }
        }
    }
    if global_got != global_expected {
        return Err(format!(
            "global force sum {global_got:?} != {global_expected:?}"
        ));
    }
    Ok(())
}

/// Counts receiver notifications delivered to a signal array: release or
/// relaxed stores plus fused put-with-signal operations.
pub fn count_notifications(record: &ExecutionRecord, sig: SigId) -> usize {
    record.count(|e| match &e.kind {
        EventKind::SignalStore { sig: s, .. } => *s == sig,
        EventKind::PutWithSignal { sig: s, .. } => *s == sig,
        _ => false,
    })
}

pub fn sentinel_leaks(record: &ExecutionRecord) -> usize {
    record.notes_with_tag("sentinel").count()
}

/// Island layouts cycled through the sweeps so both transports (direct
/// stores and staged put-with-signal) and the mixed case are exercised.
pub fn island_variant(i: u64, n_ranks: usize) -> Islands {
    match i % 3 {
        0 => Islands::Single,
        1 => Islands::Size(1),
        _ => Islands::Size((n_ranks / 2).max(1)),
    }
}

fn weak_world(n: usize, seed: u64, islands: Islands, aggressiveness: f64) -> WorldCfg {
    WorldCfg::deterministic(n, seed)
        .with_islands(islands)
        .weak(aggressiveness)
}

/// Outcome classification of one seeded fused run under fault injection.
#[derive(Debug, Clone, PartialEq)]
pub enum RunVerdict {
    Clean,
    SentinelLeak(usize),
    OracleMismatch(String),
    Deadlock(String),
}

/// Runs the fused coordinate and force exchanges under the weak adversary
/// and classifies the outcome against the oracles and sentinel checks.
pub fn adversary_verdict(
    sys: &Arc<System>,
    seed: u64,
    ecfg: EngineConfig,
    aggressiveness: f64,
) -> RunVerdict {
    let n = sys.grid.total_ranks();
    let islands = island_variant(seed, n);
    match run_coord(sys, weak_world(n, seed, islands.clone(), aggressiveness), ecfg, Schedule::Fused) {
        Ok(run) => {
            let leaks = sentinel_leaks(&run.record);
            if leaks > 0 {
                return RunVerdict::SentinelLeak(leaks);
            }
            if let Err(e) = halo_matches_oracle(sys, &run.halo) {
                return RunVerdict::OracleMismatch(e);
            }
        }
        Err(PgasError::SimDeadlock { waiters }) => {
            return RunVerdict::Deadlock(format!("{} waiters", waiters.len()))
        }
        Err(e) => return RunVerdict::OracleMismatch(e.to_string()),
    }
    match run_force(sys, weak_world(n, seed ^ 0xf0ce, islands, aggressiveness), ecfg, Schedule::Fused, true) {
        Ok(run) => {
            let leaks = sentinel_leaks(&run.record);
            if leaks > 0 {
                return RunVerdict::SentinelLeak(leaks);
            }
            if let Err(e) = forces_match_oracle(sys, &run.forces) {
                return RunVerdict::OracleMismatch(e);
            }
        }
        Err(PgasError::SimDeadlock { waiters }) => {
            return RunVerdict::Deadlock(format!("{} waiters", waiters.len()))
        }
        Err(e) => return RunVerdict::OracleMismatch(e.to_string()),
    }
    RunVerdict::Clean
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub grids: Vec<[usize; 3]>,
    pub atoms: usize,
    pub oracle_seeds: u64,
    pub equivalence_seeds: u64,
    pub adversary_seeds: u64,
    pub aggressiveness: f64,
    /// Small chunk length so multi-block pulses occur on test-size systems.
    pub buf_len: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            grids: vec![[2, 1, 1], [2, 2, 1], [2, 2, 2]],
            atoms: 400,
            oracle_seeds: 5,
            equivalence_seeds: 10,
            adversary_seeds: 40,
            aggressiveness: 1.0,
            buf_len: 64,
        }
    }
}

/// The full correctness suite: oracle equivalence, schedule equivalence,
/// dependency safety under the weak adversary (with fault-injection
/// coverage), force conservation, notification minimality, and liveness.
pub fn verify_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let ecfg = EngineConfig::default().with_buf_len(opts.buf_len);

    // oracle equivalence, both engines, both transports
    for &np in &opts.grids {
        for seed in 0..opts.oracle_seeds {
            let gname = grid_name(np);
            let sys = match System::random(np, opts.atoms, seed) {
                Ok(s) => Arc::new(s),
                Err(e) => {
                    results.push(CheckResult::fail("oracle-equivalence", seed, gname, e.to_string()));
                    continue;
                }
            };
            let n = sys.grid.total_ranks();
            for schedule in [Schedule::Serialized, Schedule::Fused] {
                let world = WorldCfg::deterministic(n, seed).with_islands(island_variant(seed, n));
                let check = format!("oracle-equivalence-{}", schedule.name());
                match run_coord(&sys, world, ecfg, schedule) {
                    Ok(run) => match halo_matches_oracle(&sys, &run.halo) {
                        Ok(()) => results.push(CheckResult::pass(
                            &check,
                            seed,
                            gname.clone(),
                            format!("{} halo entries", run.halo.iter().map(Vec::len).sum::<usize>()),
                        )),
                        Err(e) => results.push(CheckResult::fail(&check, seed, gname.clone(), e)),
                    },
                    Err(e) => results.push(CheckResult::fail(&check, seed, gname.clone(), e.to_string())),
                }
            }
        }
    }

    // schedule equivalence: fused and serialized agree bit-for-bit
    for &np in &opts.grids {
        let gname = grid_name(np);
        let sys = match System::random(np, opts.atoms, 1234) {
            Ok(s) => Arc::new(s),
            Err(e) => {
                results.push(CheckResult::fail("schedule-equivalence", 0, gname, e.to_string()));
                continue;
            }
        };
        let n = sys.grid.total_ranks();
        for seed in 0..opts.equivalence_seeds {
            let islands = island_variant(seed, n);
            let mk = |s| WorldCfg::deterministic(n, s).with_islands(islands.clone());
            let outcome = (|| -> Result<(), String> {
                let a = run_coord(&sys, mk(seed), ecfg, Schedule::Serialized).map_err(|e| e.to_string())?;
                let b = run_coord(&sys, mk(seed), ecfg, Schedule::Fused).map_err(|e| e.to_string())?;
                if a.halo != b.halo {
                    return Err("coordinate halos differ".into());
                }
                let fa = run_force(&sys, mk(seed), ecfg, Schedule::Serialized, true)
                    .map_err(|e| e.to_string())?;
                let fb = run_force(&sys, mk(seed), ecfg, Schedule::Fused, true).map_err(|e| e.to_string())?;
                if fa.forces != fb.forces {
                    return Err("force arrays differ".into());
                }
                Ok(())
            })();
            match outcome {
                Ok(()) => results.push(CheckResult::pass("schedule-equivalence", seed, gname.clone(), String::new())),
                Err(e) => results.push(CheckResult::fail("schedule-equivalence", seed, gname.clone(), e)),
            }
        }
    }

    // dependency safety: clean protocol leaks nothing across the sweep.
    // Use the deepest grid available: the dependency-management wait only
    // has observable effect with at least three pulses.
    let np = *opts
        .grids
        .iter()
        .max_by_key(|np| np.iter().filter(|&&n| n > 1).count())
        .unwrap_or(&[2, 2, 2]);
    let gname = grid_name(np);
    match System::random(np, opts.atoms, 77).map(Arc::new) {
        Ok(sys) => {
            let mut bad = None;
            for seed in 0..opts.adversary_seeds {
                let v = adversary_verdict(&sys, seed, ecfg, opts.aggressiveness);
                if v != RunVerdict::Clean {
                    bad = Some((seed, v));
                    break;
                }
            }
            match bad {
                None => results.push(CheckResult::pass(
                    "dependency-safety",
                    opts.adversary_seeds,
                    gname.clone(),
                    format!("{} seeds clean", opts.adversary_seeds),
                )),
                Some((seed, v)) => results.push(CheckResult::fail(
                    "dependency-safety",
                    seed,
                    gname.clone(),
                    format!("{v:?}"),
                )),
            }

            // every injected fault must be caught in at least one seed
            for m in ALL_MUTATIONS {
                let mutated = ecfg.with_mutation(m);
                let mut caught = None;
                for seed in 0..opts.adversary_seeds {
                    let v = adversary_verdict(&sys, seed, mutated, opts.aggressiveness);
                    if v != RunVerdict::Clean {
                        caught = Some((seed, v));
                        break;
                    }
                }
                let check = format!("mutation-caught-{}", m.name());
                match caught {
                    Some((seed, v)) => {
                        results.push(CheckResult::pass(&check, seed, gname.clone(), format!("{v:?}")))
                    }
                    None => results.push(CheckResult::fail(
                        &check,
                        opts.adversary_seeds,
                        gname.clone(),
                        "undetected across sweep".into(),
                    )),
                }
            }
        }
        Err(e) => results.push(CheckResult::fail("dependency-safety", 0, gname, e.to_string())),
    }

    // force conservation
    for &np in &opts.grids {
        let gname = grid_name(np);
        for seed in 0..opts.oracle_seeds {
            let check = "force-conservation";
            let outcome = System::random(np, opts.atoms, seed ^ 0xbeef)
                .map_err(|e| e.to_string())
                .map(Arc::new)
                .and_then(|sys| {
                    let n = sys.grid.total_ranks();
                    let world = WorldCfg::deterministic(n, seed).with_islands(island_variant(seed, n));
                    let run = run_force(&sys, world, ecfg, Schedule::Fused, true).map_err(|e| e.to_string())?;
                    forces_match_oracle(&sys, &run.forces)
                });
            match outcome {
                Ok(()) => results.push(CheckResult::pass(check, seed, gname.clone(), String::new())),
                Err(e) => results.push(CheckResult::fail(check, seed, gname.clone(), e)),
            }
        }
    }

    // notification minimality: exactly one per pulse per rank per step
    if let Ok(sys) = System::random([2, 2, 2], opts.atoms, 5).map(Arc::new) {
        let n = sys.grid.total_ranks();
        for (i, islands) in [Islands::Single, Islands::Size(1)].into_iter().enumerate() {
            let world = WorldCfg::deterministic(n, 9 + i as u64).with_islands(islands);
            let check = "notification-minimality";
            match run_coord(&sys, world, ecfg, Schedule::Fused) {
                Ok(run) => {
                    let got = count_notifications(&run.record, layout::COORD_SIGNALS);
                    let want = n * sys.plan.total_pulses;
                    if got == want {
                        results.push(CheckResult::pass(check, i as u64, grid_name([2, 2, 2]), format!("{got} notifications")));
                    } else {
                        results.push(CheckResult::fail(
                            check,
                            i as u64,
                            grid_name([2, 2, 2]),
                            format!("{got} notifications, expected {want}"),
                        ));
                    }
                }
                Err(e) => results.push(CheckResult::fail(check, i as u64, grid_name([2, 2, 2]), e.to_string())),
            }
        }
    }

    // liveness: the detector fires on a deliberately circular wait
    let fired = deadlock_fixture_fires(4, 3);
    results.push(if fired {
        CheckResult::pass("deadlock-detector", 0, "fixture".into(), "SimDeadlock raised".into())
    } else {
        CheckResult::fail("deadlock-detector", 0, "fixture".into(), "no deadlock raised".into())
    });

    results
}

/// Deliberately circular wait fixture; returns whether SimDeadlock fired.
pub fn deadlock_fixture_fires(n_pes: usize, seed: u64) -> bool {
    let programs: Vec<PeProgram> = (0..n_pes)
        .map(|pe| {
            Box::new(move |pc: &mut crate::pgas::PeCtx| {
                let s = pc.alloc_signals(n_pes)?;
                // everyone waits for the previous PE, nobody stores first
                pc.signal_wait(s, (pe + n_pes - 1) % n_pes, 1)?;
                pc.signal_store(s, (pe + 1) % n_pes, pe, 1, crate::pgas::StoreOrdering::Release)?;
                Ok(())
            }) as PeProgram
        })
        .collect();
    matches!(
        run_world(WorldCfg::deterministic(n_pes, seed), programs),
        Err(PgasError::SimDeadlock { .. })
    )
}
