//! Per-pulse halo index maps with periodic shifts.
//!
//! One pulse per decomposed dimension, swept z then y then x. Each pulse
//! sends toward the forward (+1) neighbor: a rank packs the atoms it holds
//! (home atoms and halo received in earlier pulses) that lie within the
//! cutoff of the receiver's domain, so data originating several cells away
//! is forwarded through intermediate ranks rather than sent directly.

use super::{assign_atoms, AtomSet, DdError, DdGrid, SimBox, Vec3};
use serde::Serialize;

pub const DEFAULT_BUF_LEN: usize = 2048;

/// Per-pulse communication metadata for one rank. Every rank participates in
/// every pulse both as a sender (toward `send_rank`) and as a receiver (from
/// `recv_rank`), possibly with zero-size legs.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PulseData {
    /// Dimension this pulse sweeps (0 = z, 1 = y, 2 = x).
    pub dim: usize,
    /// Rank my packed coordinates go to (forward neighbor in `dim`).
    pub send_rank: usize,
    /// Rank my halo data for this pulse comes from (backward neighbor).
    pub recv_rank: usize,
    /// Entries I send; equals the matched pulse's `recv_size` on `send_rank`.
    pub send_size: usize,
    /// Entries I receive into `[atom_offset, atom_offset + recv_size)`.
    pub recv_size: usize,
    /// Start of this pulse's landing region in my coordinate/force arrays.
    pub atom_offset: usize,
    /// Start of my payload's landing region on `send_rank`.
    pub remote_atom_offset: usize,
    /// Periodic image correction added to every coordinate I pack.
    pub coord_shift: Vec3,
    /// Local indices of the atoms I send: home entries (< `dep_offset`)
    /// first in ascending order, then halo entries received in earlier
    /// pulses, also ascending.
    pub index_map: Vec<usize>,
    /// My home-atom count; `index_map` values at or beyond it reference the
    /// halo region.
    pub dep_offset: usize,
    /// Default chunking of the send; engines reconfigure this per transport.
    pub blocks_for_pulse: usize,
}

impl PulseData {
    pub fn dependent_count(&self) -> usize {
        self.index_map.iter().filter(|&&i| i >= self.dep_offset).count()
    }
}

/// One halo slot on a rank: which atom it holds and how it got there.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct HaloAtom {
    /// Index into the original atom set.
    pub atom: usize,
    /// Accumulated periodic shift along the forwarding path.
    pub shift: Vec3,
    /// Stored (receiver-frame) coordinate: original position plus shift.
    pub coord: Vec3,
}

/// Everything one rank needs to run the exchange.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RankPlan {
    pub rank: usize,
    pub home_count: usize,
    /// Home plus all received halo atoms.
    pub total_count: usize,
    /// Atom indices of home slots, in input order.
    pub home_atoms: Vec<usize>,
    /// Provenance of halo slots `home_count..total_count`, in landing order.
    pub halo: Vec<HaloAtom>,
    /// One entry per global pulse.
    pub pulses: Vec<PulseData>,
}

impl RankPlan {
    /// Atom index held by a local slot.
    pub fn atom_of_slot(&self, slot: usize) -> usize {
        if slot < self.home_count {
            self.home_atoms[slot]
        } else {
            self.halo[slot - self.home_count].atom
        }
    }
}

/// The globally ordered pulse plan for every rank.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PulsePlan {
    pub grid: DdGrid,
    /// Decomposed dimensions in sweep order (z before y before x).
    pub order: Vec<usize>,
    pub total_pulses: usize,
    /// Immediate predecessor per pulse; `None` for the first.
    pub first_dependent: Vec<Option<usize>>,
    pub ranks: Vec<RankPlan>,
}

impl PulsePlan {
    pub fn max_total_count(&self) -> usize {
        self.ranks.iter().map(|r| r.total_count).max().unwrap_or(0)
    }

    pub fn max_send_size(&self, pulse: usize) -> usize {
        self.ranks
            .iter()
            .map(|r| r.pulses[pulse].send_size)
            .max()
            .unwrap_or(0)
    }
}

/// Returns the `first_dependent` mapping: the first pulse has no
/// predecessor, each later pulse depends on the immediately preceding one in
/// global order.
pub fn pulse_dependencies(total_pulses: usize) -> Vec<Option<usize>> {
    (0..total_pulses)
        .map(|p| if p == 0 { None } else { Some(p - 1) })
        .collect()
}

struct Resident {
    atom: usize,
    shift: Vec3,
    coord: Vec3,
}

/// Builds the per-rank pulse plan for `grid` over `atoms`.
pub fn build_halo_zones(
    grid: &DdGrid,
    sim: &SimBox,
    atoms: &AtomSet,
) -> Result<PulsePlan, DdError> {
    let order = grid.decomposed_dims();
    for &d in &order {
        let width = sim.lengths[d] / grid.np[d] as f64;
        if sim.cutoff >= width {
            return Err(DdError::CutoffTooLarge {
                cutoff: sim.cutoff,
                dim: d,
                width,
            });
        }
    }
    let total_pulses = order.len();
    let n_ranks = grid.total_ranks();
    let assignment = assign_atoms(atoms, grid, sim);

    let mut residents: Vec<Vec<Resident>> = (0..n_ranks)
        .map(|r| {
            assignment.per_rank[r]
                .iter()
                .map(|&a| Resident {
                    atom: a,
                    shift: [0.0; 3],
                    coord: atoms.positions[a],
                })
                .collect()
        })
        .collect();
    let home_counts: Vec<usize> = residents.iter().map(Vec::len).collect();
    let mut rank_pulses: Vec<Vec<PulseData>> = vec![Vec::new(); n_ranks];
    let mut halos: Vec<Vec<HaloAtom>> = vec![Vec::new(); n_ranks];

    let cutoff_sq = sim.cutoff * sim.cutoff;
    for (p, &d) in order.iter().enumerate() {
        // Selection reads pre-pulse residency only, so compute every send
        // before delivering any payload.
        let mut payloads: Vec<Vec<Resident>> = Vec::with_capacity(n_ranks);
        for sender in 0..n_ranks {
            let recv = grid.forward_neighbor(sender, d);
            let wraps = grid.cell_of(sender)[d] == grid.np[d] - 1;
            let mut shift = [0.0; 3];
            if wraps {
                shift[d] = -sim.lengths[d];
            }
            let region = grid.region_of(sim, recv);

            let mut index_map = Vec::new();
            let mut payload = Vec::new();
            for (slot, res) in residents[sender].iter().enumerate() {
                let packed = [
                    res.coord[0] + shift[0],
                    res.coord[1] + shift[1],
                    res.coord[2] + shift[2],
                ];
                let gap = region.gap_sq(packed);
                debug_assert!(gap > 0.0, "resident atom inside the receiving domain");
                if gap <= cutoff_sq {
                    index_map.push(slot);
                    payload.push(Resident {
                        atom: res.atom,
                        shift: [
                            res.shift[0] + shift[0],
                            res.shift[1] + shift[1],
                            res.shift[2] + shift[2],
                        ],
                        coord: packed,
                    });
                }
            }
            let send_size = index_map.len();
            rank_pulses[sender].push(PulseData {
                dim: d,
                send_rank: recv,
                recv_rank: grid.backward_neighbor(sender, d),
                send_size,
                recv_size: 0,        // filled at delivery
                atom_offset: 0,      // filled at delivery
                remote_atom_offset: 0,
                coord_shift: shift,
                index_map,
                dep_offset: home_counts[sender],
                blocks_for_pulse: send_size.div_ceil(DEFAULT_BUF_LEN).max(1),
            });
            payloads.push(payload);
        }

        for sender in 0..n_ranks {
            let recv = rank_pulses[sender][p].send_rank;
            let landing = residents[recv].len();
            rank_pulses[sender][p].remote_atom_offset = landing;
            rank_pulses[recv][p].recv_size = payloads[sender].len();
            rank_pulses[recv][p].atom_offset = landing;
            for res in payloads[sender].drain(..) {
                halos[recv].push(HaloAtom {
                    atom: res.atom,
                    shift: res.shift,
                    coord: res.coord,
                });
                residents[recv].push(res);
            }
        }
    }

    let ranks = (0..n_ranks)
        .map(|r| RankPlan {
            rank: r,
            home_count: home_counts[r],
            total_count: residents[r].len(),
            home_atoms: assignment.per_rank[r].clone(),
            halo: std::mem::take(&mut halos[r]),
            pulses: std::mem::take(&mut rank_pulses[r]),
        })
        .collect();

    Ok(PulsePlan {
        grid: grid.clone(),
        order,
        total_pulses,
        first_dependent: pulse_dependencies(total_pulses),
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exchange::oracle::direct_gather_oracle;
    use std::collections::BTreeSet;

    fn key(atom: usize, coord: Vec3, shift: Vec3) -> (usize, [u64; 3], [u64; 3]) {
        (
            atom,
            [coord[0].to_bits(), coord[1].to_bits(), coord[2].to_bits()],
            [shift[0].to_bits(), shift[1].to_bits(), shift[2].to_bits()],
        )
    }

    fn plan_halo_set(plan: &PulsePlan, rank: usize) -> BTreeSet<(usize, [u64; 3], [u64; 3])> {
        plan.ranks[rank]
            .halo
            .iter()
            .map(|h| key(h.atom, h.coord, h.shift))
            .collect()
    }

    fn check_against_oracle(grid: &DdGrid, sim: &SimBox, atoms: &AtomSet) {
        let plan = build_halo_zones(grid, sim, atoms).unwrap();
        let expected = direct_gather_oracle(grid, sim, atoms);
        for r in 0..grid.total_ranks() {
            let got = plan_halo_set(&plan, r);
            let want: BTreeSet<_> = expected.per_rank[r]
                .iter()
                .map(|e| key(e.atom, e.coord, e.shift))
                .collect();
            assert_eq!(got, want, "halo mismatch on rank {r}");
        }
    }

    #[test]
    fn one_dimensional_matches_direct_gather() {
        let sim = SimBox::cubic(10.0, 1.0).unwrap();
        let grid = DdGrid::new([2, 1, 1]);
        let atoms = AtomSet::random(&sim, 200, 7);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        assert_eq!(plan.total_pulses, 1);
        for r in 0..2 {
            assert_eq!(plan.ranks[r].pulses.len(), 1);
        }
        check_against_oracle(&grid, &sim, &atoms);
    }

    #[test]
    fn undecomposed_grid_has_empty_plan() {
        let sim = SimBox::cubic(10.0, 1.0).unwrap();
        let grid = DdGrid::new([1, 1, 1]);
        let atoms = AtomSet::random(&sim, 50, 3);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        assert_eq!(plan.total_pulses, 0);
        assert!(plan.ranks[0].pulses.is_empty());
        assert_eq!(plan.ranks[0].total_count, 50);
    }

    #[test]
    fn three_dimensional_forwarding_covers_all_neighbors() {
        let sim = SimBox::cubic(10.0, 1.2).unwrap();
        let grid = DdGrid::new([2, 2, 2]);
        let atoms = AtomSet::random(&sim, 3000, 11);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        assert_eq!(plan.total_pulses, 3);
        check_against_oracle(&grid, &sim, &atoms);

        // the x pulse must forward data received in both earlier pulses
        let forwarded: usize = plan
            .ranks
            .iter()
            .map(|r| r.pulses[2].dependent_count())
            .sum();
        assert!(forwarded > 0, "expected staged forwarding in the x pulse");
    }

    #[test]
    fn mixed_grids_match_oracle() {
        let sim = SimBox::new([10.0, 8.0, 6.0], 0.9).unwrap();
        let atoms = AtomSet::random(&sim, 1500, 23);
        for np in [[2, 1, 1], [1, 2, 1], [2, 2, 1], [3, 2, 2], [4, 1, 2]] {
            check_against_oracle(&DdGrid::new(np), &sim, &atoms);
        }
    }

    #[test]
    fn halo_regions_tile_disjointly() {
        let sim = SimBox::cubic(9.0, 1.1).unwrap();
        let grid = DdGrid::new([2, 2, 2]);
        let atoms = AtomSet::random(&sim, 800, 5);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        for rp in &plan.ranks {
            let mut next = rp.home_count;
            for p in &rp.pulses {
                assert_eq!(p.atom_offset, next, "halo regions must be contiguous");
                next += p.recv_size;
            }
            assert_eq!(next, rp.total_count);
            assert_eq!(rp.halo.len(), rp.total_count - rp.home_count);
        }
    }

    #[test]
    fn index_map_split_and_sizes() {
        let sim = SimBox::cubic(9.0, 1.1).unwrap();
        let grid = DdGrid::new([2, 2, 1]);
        let atoms = AtomSet::random(&sim, 600, 9);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        for rp in &plan.ranks {
            for (p, pd) in rp.pulses.iter().enumerate() {
                assert_eq!(pd.send_size, pd.index_map.len());
                assert_eq!(pd.dep_offset, rp.home_count);
                let peer = &plan.ranks[pd.send_rank].pulses[p];
                assert_eq!(pd.send_size, peer.recv_size);
                assert_eq!(pd.remote_atom_offset, peer.atom_offset);
                // home entries first, both halves ascending
                let split = pd.index_map.partition_point(|&i| i < pd.dep_offset);
                assert!(pd.index_map[..split].windows(2).all(|w| w[0] < w[1]));
                assert!(pd.index_map[split..].windows(2).all(|w| w[0] < w[1]));
                assert!(pd.index_map[split..].iter().all(|&i| i >= pd.dep_offset));
            }
        }
    }

    #[test]
    fn shift_correctness_exact() {
        let sim = SimBox::cubic(8.0, 1.0).unwrap();
        let grid = DdGrid::new([2, 2, 2]);
        let atoms = AtomSet::random(&sim, 1200, 31);
        let plan = build_halo_zones(&grid, &sim, &atoms).unwrap();
        let c2 = sim.cutoff * sim.cutoff;
        for rp in &plan.ranks {
            let region = grid.region_of(&sim, rp.rank);
            for h in &rp.halo {
                for d in 0..3 {
                    assert_eq!(h.coord[d], atoms.positions[h.atom][d] + h.shift[d]);
                }
                assert!(region.gap_sq(h.coord) <= c2);
            }
        }
    }

    #[test]
    fn dependency_mapping() {
        assert_eq!(pulse_dependencies(3), vec![None, Some(0), Some(1)]);
        assert_eq!(pulse_dependencies(1), vec![None]);
        assert_eq!(pulse_dependencies(2), vec![None, Some(0)]);
        assert_eq!(pulse_dependencies(0), Vec::<Option<usize>>::new());
    }

    #[test]
    fn plan_is_deterministic() {
        let sim = SimBox::cubic(9.0, 1.0).unwrap();
        let grid = DdGrid::new([2, 2, 2]);
        let atoms = AtomSet::random(&sim, 500, 77);
        let a = build_halo_zones(&grid, &sim, &atoms).unwrap();
        let b = build_halo_zones(&grid, &sim, &atoms).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn oversized_cutoff_rejected() {
        let sim = SimBox::cubic(4.0, 2.5).unwrap();
        let grid = DdGrid::new([2, 1, 1]);
        let atoms = AtomSet::random(&sim, 10, 1);
        assert!(matches!(
            build_halo_zones(&grid, &sim, &atoms),
            Err(DdError::CutoffTooLarge { .. })
        ));
    }
}
