//! Periodic spatial decomposition and per-pulse halo plan construction.
//!
//! All internal 3-vectors use axis order `[z, y, x]`, matching the global
//! pulse sweep order (z first, then y, then x). Atom files use the
//! conventional `id x y z` column order and are converted on read.

mod halo;

pub use halo::{build_halo_zones, pulse_dependencies, HaloAtom, PulseData, PulsePlan, RankPlan, DEFAULT_BUF_LEN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-vector in `[z, y, x]` axis order.
pub type Vec3 = [f64; 3];

pub const DIM_NAMES: [&str; 3] = ["z", "y", "x"];

#[derive(Debug, Error)]
pub enum DdError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("no factorization of {ranks} ranks satisfies cutoff {cutoff} < cell width for box {lengths:?}")]
    NoValidDecomposition {
        ranks: usize,
        cutoff: f64,
        lengths: Vec3,
    },
    #[error("cutoff {cutoff} requires a second pulse in dimension {dim} (cell width {width})")]
    CutoffTooLarge { cutoff: f64, dim: usize, width: f64 },
    #[error("atom input: {0}")]
    AtomInput(String),
}

/// Periodic rectangular simulation box with an interaction cutoff.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimBox {
    /// Edge lengths in nm, `[z, y, x]`.
    pub lengths: Vec3,
    /// Interaction cutoff in nm.
    pub cutoff: f64,
}

impl SimBox {
    pub fn new(lengths: Vec3, cutoff: f64) -> Result<Self, DdError> {
        if !(cutoff > 0.0) {
            return Err(DdError::InvalidBox(format!("cutoff {cutoff} must be > 0")));
        }
        for (d, &l) in lengths.iter().enumerate() {
            if !(l > 0.0) {
                return Err(DdError::InvalidBox(format!(
                    "length {l} in {} must be > 0",
                    DIM_NAMES[d]
                )));
            }
        }
        Ok(SimBox { lengths, cutoff })
    }

    pub fn cubic(edge: f64, cutoff: f64) -> Result<Self, DdError> {
        Self::new([edge; 3], cutoff)
    }

    /// Wraps a position into `[0, len)` per dimension.
    pub fn wrap(&self, pos: Vec3) -> Vec3 {
        let mut out = pos;
        for d in 0..3 {
            let len = self.lengths[d];
            let mut v = pos[d].rem_euclid(len);
            if v >= len {
                v = 0.0;
            }
            out[d] = v;
        }
        out
    }
}

/// Axis-aligned region of one domain, in box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DomainRegion {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl DomainRegion {
    /// Squared distance from `point` to the region (0 inside). This is the
    /// shared selection primitive: the halo builder and the brute-force
    /// oracle must evaluate the same expression so borderline atoms agree
    /// bit-for-bit.
    pub fn gap_sq(&self, point: Vec3) -> f64 {
        let mut acc = 0.0;
        for d in 0..3 {
            let g = (self.lo[d] - point[d]).max(point[d] - self.hi[d]).max(0.0);
            acc += g * g;
        }
        acc
    }
}

/// 3D decomposition of the box into `np[z] * np[y] * np[x]` domains.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DdGrid {
    /// Domains per dimension, `[z, y, x]`.
    pub np: [usize; 3],
}

impl DdGrid {
    pub fn new(np: [usize; 3]) -> Self {
        assert!(np.iter().all(|&n| n >= 1), "np must be positive");
        DdGrid { np }
    }

    pub fn total_ranks(&self) -> usize {
        self.np[0] * self.np[1] * self.np[2]
    }

    /// Dimensions with more than one domain, in z, y, x order.
    pub fn decomposed_dims(&self) -> Vec<usize> {
        (0..3).filter(|&d| self.np[d] > 1).collect()
    }

    /// z-major rank numbering; bijective with cell coordinates.
    pub fn rank_of(&self, cell: [usize; 3]) -> usize {
        debug_assert!((0..3).all(|d| cell[d] < self.np[d]));
        (cell[0] * self.np[1] + cell[1]) * self.np[2] + cell[2]
    }

    pub fn cell_of(&self, rank: usize) -> [usize; 3] {
        debug_assert!(rank < self.total_ranks());
        let x = rank % self.np[2];
        let y = (rank / self.np[2]) % self.np[1];
        let z = rank / (self.np[2] * self.np[1]);
        [z, y, x]
    }

    pub fn forward_neighbor(&self, rank: usize, dim: usize) -> usize {
        let mut cell = self.cell_of(rank);
        cell[dim] = (cell[dim] + 1) % self.np[dim];
        self.rank_of(cell)
    }

    pub fn backward_neighbor(&self, rank: usize, dim: usize) -> usize {
        let mut cell = self.cell_of(rank);
        cell[dim] = (cell[dim] + self.np[dim] - 1) % self.np[dim];
        self.rank_of(cell)
    }

    fn cell_width(&self, sim: &SimBox, d: usize) -> f64 {
        sim.lengths[d] / self.np[d] as f64
    }

    /// Split-plane coordinate `i * width`, with the top bound pinned to the
    /// exact box length. Assignment and region construction must share this.
    pub fn bound(&self, sim: &SimBox, d: usize, i: usize) -> f64 {
        if i >= self.np[d] {
            sim.lengths[d]
        } else {
            i as f64 * self.cell_width(sim, d)
        }
    }

    pub fn region_of(&self, sim: &SimBox, rank: usize) -> DomainRegion {
        let cell = self.cell_of(rank);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for d in 0..3 {
            lo[d] = self.bound(sim, d, cell[d]);
            hi[d] = self.bound(sim, d, cell[d] + 1);
        }
        DomainRegion { lo, hi }
    }

    /// Cell index containing a wrapped coordinate in dimension `d`. An atom
    /// exactly on a split plane belongs to the higher cell.
    pub fn cell_index(&self, sim: &SimBox, d: usize, x: f64) -> usize {
        let w = self.cell_width(sim, d);
        let np = self.np[d];
        let mut i = ((x / w).floor() as isize).clamp(0, np as isize - 1) as usize;
        while i + 1 < np && x >= self.bound(sim, d, i + 1) {
            i += 1;
        }
        while i > 0 && x < self.bound(sim, d, i) {
            i -= 1;
        }
        i
    }

    pub fn home_rank(&self, sim: &SimBox, pos: Vec3) -> usize {
        let p = sim.wrap(pos);
        let cell = [
            self.cell_index(sim, 0, p[0]),
            self.cell_index(sim, 1, p[1]),
            self.cell_index(sim, 2, p[2]),
        ];
        self.rank_of(cell)
    }
}

/// Atoms with unique ids; positions are wrapped into the box on construction.
#[derive(Debug, Clone, Serialize)]
pub struct AtomSet {
    pub positions: Vec<Vec3>,
    pub global_ids: Vec<u64>,
}

impl AtomSet {
    pub fn new(sim: &SimBox, positions: Vec<Vec3>, global_ids: Vec<u64>) -> Result<Self, DdError> {
        if positions.len() != global_ids.len() {
            return Err(DdError::AtomInput(format!(
                "{} positions vs {} ids",
                positions.len(),
                global_ids.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in &global_ids {
            if !seen.insert(id) {
                return Err(DdError::AtomInput(format!("duplicate atom id {id}")));
            }
        }
        let positions = positions.into_iter().map(|p| sim.wrap(p)).collect();
        Ok(AtomSet {
            positions,
            global_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Uniform random fill of the box; the seed is the caller's provenance.
    pub fn random(sim: &SimBox, count: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..count)
            .map(|_| {
                [
                    rng.gen_range(0.0..sim.lengths[0]),
                    rng.gen_range(0.0..sim.lengths[1]),
                    rng.gen_range(0.0..sim.lengths[2]),
                ]
            })
            .collect();
        let global_ids = (0..count as u64).collect();
        AtomSet {
            positions,
            global_ids,
        }
    }

    /// Parses `id x y z` rows, whitespace- or comma-separated. Lines starting
    /// with `#` and blank lines are skipped.
    pub fn from_reader<R: std::io::BufRead>(sim: &SimBox, reader: R) -> Result<Self, DdError> {
        let mut positions = Vec::new();
        let mut ids = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DdError::AtomInput(e.to_string()))?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 4 {
                return Err(DdError::AtomInput(format!(
                    "line {}: expected 4 fields (id x y z), got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse =
                |s: &str| -> Result<f64, DdError> {
                    s.parse()
                        .map_err(|_| DdError::AtomInput(format!("line {}: bad number {s}", lineno + 1)))
                };
            let id: u64 = fields[0]
                .parse()
                .map_err(|_| DdError::AtomInput(format!("line {}: bad id", lineno + 1)))?;
            let (x, y, z) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
            ids.push(id);
            // file order is x, y, z; internal order is z, y, x
            positions.push([z, y, x]);
        }
        AtomSet::new(sim, positions, ids)
    }

    pub fn from_file(sim: &SimBox, path: &std::path::Path) -> Result<Self, DdError> {
        let f = std::fs::File::open(path).map_err(|e| DdError::AtomInput(format!("{path:?}: {e}")))?;
        Self::from_reader(sim, std::io::BufReader::new(f))
    }
}

/// Home-domain assignment of every atom.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Home rank per atom index.
    pub home_of: Vec<usize>,
    /// Atom indices per rank, in input order.
    pub per_rank: Vec<Vec<usize>>,
}

/// Assigns each atom to the domain containing its wrapped position.
pub fn assign_atoms(atoms: &AtomSet, grid: &DdGrid, sim: &SimBox) -> Assignment {
    let mut home_of = Vec::with_capacity(atoms.len());
    let mut per_rank = vec![Vec::new(); grid.total_ranks()];
    for (i, &pos) in atoms.positions.iter().enumerate() {
        let r = grid.home_rank(sim, pos);
        home_of.push(r);
        per_rank[r].push(i);
    }
    Assignment { home_of, per_rank }
}

/// Chooses a decomposition of `ranks` domains for `sim`.
///
/// Candidates are all ordered factorizations of `ranks`; a dimension may only
/// be decomposed when the cutoff fits within a single cell (one pulse per
/// dimension). Among valid candidates the estimated communicated halo volume
/// (cutoff times the per-rank cross-section of each decomposed dimension) is
/// minimized; ties prefer the more balanced grid, then decomposing z before y
/// before x.
pub fn build_grid(sim: &SimBox, ranks: usize) -> Result<DdGrid, DdError> {
    assert!(ranks >= 1, "ranks must be >= 1");
    let mut best: Option<([usize; 3], f64)> = None;
    for nz in divisors(ranks) {
        for ny in divisors(ranks / nz) {
            let nx = ranks / nz / ny;
            let np = [nz, ny, nx];
            if !single_pulse_ok(sim, np) {
                continue;
            }
            let cost = halo_volume_estimate(sim, np);
            let better = match &best {
                None => true,
                Some((bnp, bcost)) => {
                    match cost.total_cmp(bcost) {
                        std::cmp::Ordering::Less => true,
                        std::cmp::Ordering::Greater => false,
                        std::cmp::Ordering::Equal => {
                            let (ma, mb) = (np.iter().max(), bnp.iter().max());
                            // prefer balance, then z before y before x
                            (ma, [bnp[0], bnp[1]]) < (mb, [np[0], np[1]])
                        }
                    }
                }
            };
            if better {
                best = Some((np, cost));
            }
        }
    }
    match best {
        Some((np, _)) => Ok(DdGrid::new(np)),
        None => Err(DdError::NoValidDecomposition {
            ranks,
            cutoff: sim.cutoff,
            lengths: sim.lengths,
        }),
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn single_pulse_ok(sim: &SimBox, np: [usize; 3]) -> bool {
    (0..3).all(|d| np[d] == 1 || sim.cutoff < sim.lengths[d] / np[d] as f64)
}

fn halo_volume_estimate(sim: &SimBox, np: [usize; 3]) -> f64 {
    let cell: Vec<f64> = (0..3).map(|d| sim.lengths[d] / np[d] as f64).collect();
    (0..3)
        .filter(|&d| np[d] > 1)
        .map(|d| {
            let area: f64 = (0..3).filter(|&e| e != d).map(|e| cell[e]).product();
            sim.cutoff * area
        })
        .sum()
}
