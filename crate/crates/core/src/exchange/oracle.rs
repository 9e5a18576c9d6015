//! Brute-force verification oracles, independent of the exchange engines.

use crate::dd::{AtomSet, DdGrid, SimBox, Vec3};

/// One expected halo entry at a receiving rank.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    /// Index into the original atom set.
    pub atom: usize,
    /// Periodic shift applied to the atom on arrival.
    pub shift: Vec3,
    /// Expected stored coordinate: original position plus shift.
    pub coord: Vec3,
}

#[derive(Debug, Clone)]
pub struct ExpectedHalo {
    pub per_rank: Vec<Vec<OracleEntry>>,
}

/// Directly gathers, for every rank, every atom of every other rank that
/// lies within the cutoff of the rank's domain region on the backward side
/// of each decomposed dimension (the region a one-pulse-per-dimension staged
/// exchange must deliver), with the matching periodic shift.
///
/// Brute force over ranks x atoms; shares the gap primitive with the halo
/// builder so selection decisions agree bit-for-bit.
pub fn direct_gather_oracle(grid: &DdGrid, sim: &SimBox, atoms: &AtomSet) -> ExpectedHalo {
    let n_ranks = grid.total_ranks();
    let cutoff_sq = sim.cutoff * sim.cutoff;
    let mut per_rank = vec![Vec::new(); n_ranks];
    for rank in 0..n_ranks {
        let region = grid.region_of(sim, rank);
        'atoms: for (a, &pos) in atoms.positions.iter().enumerate() {
            if grid.home_rank(sim, pos) == rank {
                continue;
            }
            // Per decomposed dimension the halo occupies only the backward
            // side: the image must satisfy lo - cutoff <= y < hi, and with
            // cutoff < cell width at most one image qualifies.
            let mut shift = [0.0; 3];
            let mut coord = pos;
            for d in 0..3 {
                if grid.np[d] == 1 {
                    continue;
                }
                let (lo, hi) = (region.lo[d], region.hi[d]);
                let fits = |y: f64| y < hi && lo - y <= sim.cutoff;
                if fits(pos[d]) {
                    continue;
                }
                let wrapped = pos[d] - sim.lengths[d];
                if fits(wrapped) {
                    shift[d] = -sim.lengths[d];
                    coord[d] = wrapped;
                } else {
                    continue 'atoms;
                }
            }
            let gap = region.gap_sq(coord);
            if gap > 0.0 && gap <= cutoff_sq {
                per_rank[rank].push(OracleEntry { atom: a, shift, coord });
            }
        }
    }
    ExpectedHalo { per_rank }
}

/// Sums synthetic per-rank force contributions per atom: the exact expected
/// total after a correct force exchange.
///
/// `contributions` holds, for every rank, pairs of (atom index, partial
/// force). Returns totals indexed by atom.
pub fn direct_scatter_oracle(n_atoms: usize, contributions: &[Vec<(usize, Vec3)>]) -> Vec<Vec3> {
    let mut total = vec![[0.0; 3]; n_atoms];
    for rank in contributions {
        for &(atom, f) in rank {
            for c in 0..3 {
                total[atom][c] += f[c];
            }
        }
    }
    total
}
