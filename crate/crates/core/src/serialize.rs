//! Window partitioning, shifted sort keys and sequence construction.
//!
//! A voxel at `c` is assigned, under a window extent `w` and shift `Δ`, to the
//! window `(c + Δ) / w` (per axis, integer division) at local position
//! `(c + Δ) % w`. The sort key is `k = wi · W + iwi` where `W = w_x·w_y·w_z`,
//! `wi` is the row-major window index over the window grid and `iwi` is the
//! local index with the scan axis outermost and Z innermost. Shifts are
//! non-negative, so shifted coordinates never go below zero; the window grid
//! grows by one window on axes with a nonzero shift.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::voxelgrid::{Coord, SparseVoxelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanAxis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub extent: [usize; 3],
    pub axis: ScanAxis,
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn new(extent: [usize; 3], axis: ScanAxis, shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if extent[a] == 0 {
                return Err(Error::Config(format!("window extent must be ≥ 1, got {extent:?}")));
            }
            if shift[a] >= extent[a] {
                return Err(Error::Config(format!("shift {shift:?} must be below extent {extent:?}")));
            }
        }
        Ok(Self { extent, axis, shift })
    }

    pub fn unshifted(extent: [usize; 3], axis: ScanAxis) -> Result<Self> {
        Self::new(extent, axis, [0; 3])
    }

    /// Same extent and axis with a half-window shift (rounded down).
    pub fn half_shifted(extent: [usize; 3], axis: ScanAxis) -> Result<Self> {
        Self::new(extent, axis, half_shift(extent))
    }

    pub fn without_shift(&self) -> Self {
        Self { shift: [0; 3], ..*self }
    }

    /// Number of cells in one window, `W`.
    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }
}

pub fn half_shift(extent: [usize; 3]) -> [usize; 3] {
    extent.map(|w| w / 2)
}

/// `(x + Δx, y + Δy, z + Δz)`; used for key computation only.
pub fn shift_coords(coords: &[Coord], shift: [usize; 3]) -> Vec<[usize; 3]> {
    coords
        .iter()
        .map(|c| std::array::from_fn(|a| c[a] as usize + shift[a]))
        .collect()
}

/// Per-axis window index and in-window offset of one voxel. Accepts any
/// shift, including shifts of a whole window.
pub fn window_position(c: Coord, extent: [usize; 3], shift: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let s: [usize; 3] = std::array::from_fn(|a| c[a] as usize + shift[a]);
    (
        std::array::from_fn(|a| s[a] / extent[a]),
        std::array::from_fn(|a| s[a] % extent[a]),
    )
}

/// Window counts per axis covering a grid of `grid_extent` cells after
/// shifting.
pub fn window_grid(grid_extent: [usize; 3], spec: &WindowSpec) -> [usize; 3] {
    std::array::from_fn(|a| (grid_extent[a] + spec.shift[a]).div_ceil(spec.extent[a]).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowKey {
    /// Row-major window index `wi`.
    pub window: usize,
    /// Scan-axis-major in-window index `iwi`.
    pub local: usize,
    /// `wi · W + iwi`.
    pub key: u64,
}

fn local_index(local: [usize; 3], extent: [usize; 3], axis: ScanAxis) -> usize {
    let [lx, ly, lz] = local;
    let [wx, wy, wz] = extent;
    match axis {
        ScanAxis::X => lx * (wy * wz) + ly * wz + lz,
        ScanAxis::Y => ly * (wx * wz) + lx * wz + lz,
    }
}

pub fn window_keys(coords: &[Coord], spec: &WindowSpec, grid_extent: [usize; 3]) -> Result<Vec<WindowKey>> {
    let grid = window_grid(grid_extent, spec);
    let volume = spec.volume() as u64;
    coords
        .iter()
        .map(|&c| {
            let (w, l) = window_position(c, spec.extent, spec.shift);
            if (0..3).any(|a| w[a] >= grid[a]) {
                return Err(Error::contract(format!("voxel {c:?} lies outside grid {grid_extent:?}")));
            }
            let window = (w[0] * grid[1] + w[1]) * grid[2] + w[2];
            let local = local_index(l, spec.extent, spec.axis);
            Ok(WindowKey {
                window,
                local,
                key: window as u64 * volume + local as u64,
            })
        })
        .collect()
}

/// A window-ordered permutation of voxel rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedSequence {
    /// Sequence position → source row.
    pub order: Vec<usize>,
    /// Source row → sequence position.
    pub inverse: Vec<usize>,
    /// Sort keys along the sequence (non-decreasing).
    pub keys: Vec<u64>,
}

impl SerializedSequence {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reorders per-row data into sequence order.
    pub fn gather<T: Clone>(&self, rows: &[T]) -> Vec<T> {
        self.order.iter().map(|&r| rows[r].clone()).collect()
    }
}

/// Stable sort of voxel rows by window key.
pub fn serialize_voxels(coords: &[Coord], spec: &WindowSpec, grid_extent: [usize; 3]) -> Result<SerializedSequence> {
    if coords.is_empty() {
        return Err(Error::EmptySequence);
    }
    let keys = window_keys(coords, spec, grid_extent)?;
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&r| keys[r].key);
    let mut inverse = vec![0; order.len()];
    for (p, &r) in order.iter().enumerate() {
        inverse[r] = p;
    }
    let keys = order.iter().map(|&r| keys[r].key).collect();
    Ok(SerializedSequence { order, inverse, keys })
}

pub fn serialize_set(set: &SparseVoxelSet, spec: &WindowSpec) -> Result<SerializedSequence> {
    serialize_voxels(&set.coords, spec, set.extent)
}

/// Feature rows in sequence order.
pub fn gather_sequence(tape: &mut Tape, features: Var, seq: &SerializedSequence) -> Result<Var> {
    tape.gather_rows(features, &seq.order)
}

/// Scatters sequence-ordered rows back to their voxel rows.
pub fn unserialize(tape: &mut Tape, seq_features: Var, seq: &SerializedSequence) -> Result<Var> {
    tape.scatter_rows(seq_features, &seq.order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Neighborhood {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Neighborhood {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Neighborhood::Six),
            26 => Ok(Neighborhood::TwentySix),
            _ => Err(format!("neighbourhood must be 6 or 26, got {v}")),
        }
    }
}

impl From<Neighborhood> for u8 {
    fn from(n: Neighborhood) -> u8 {
        match n {
            Neighborhood::Six => 6,
            Neighborhood::TwentySix => 26,
        }
    }
}

impl Neighborhood {
    /// Half of the neighbour offsets (lexicographically positive), so each
    /// unordered pair is produced once.
    pub fn forward_offsets(self) -> Vec<[i64; 3]> {
        match self {
            Neighborhood::Six => vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            Neighborhood::TwentySix => {
                let mut out = Vec::with_capacity(13);
                for dx in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dz in -1..=1i64 {
                            if (dx, dy, dz) > (0, 0, 0) {
                                out.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Unordered pairs of occupied voxels that are neighbours.
pub fn adjacent_pairs(coords: &[Coord], nbhd: Neighborhood) -> Vec<(usize, usize)> {
    let index: std::collections::HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let offsets = nbhd.forward_offsets();
    let mut pairs = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        for o in &offsets {
            let n: [i64; 3] = std::array::from_fn(|a| c[a] as i64 + o[a]);
            if n.iter().any(|v| *v < 0 || *v > u32::MAX as i64) {
                continue;
            }
            if let Some(&j) = index.get(&[n[0] as u32, n[1] as u32, n[2] as u32]) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityMetrics {
    pub spec: WindowSpec,
    pub pairs: usize,
    pub co_window_pairs: usize,
    /// Fraction of adjacent pairs sharing a window under `spec`.
    pub co_window: f64,
    pub union_co_window_pairs: usize,
    /// Fraction of adjacent pairs sharing a window under the unshifted or the
    /// shifted partition.
    pub union_co_window: f64,
    /// Mean `|position(i) − position(j)|` along the serialized sequence.
    pub mean_seq_gap: f64,
    pub voxels_per_sec: f64,
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Locality of each window spec over a voxel set. Fractions are 1.0 when the
/// set has no adjacent pairs.
pub fn locality_report(
    coords: &[Coord],
    grid_extent: [usize; 3],
    specs: &[WindowSpec],
    nbhd: Neighborhood,
) -> Result<Vec<LocalityMetrics>> {
    let pairs = adjacent_pairs(coords, nbhd);
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let same = |s: [usize; 3], i: usize, j: usize| {
            window_position(coords[i], spec.extent, s).0 == window_position(coords[j], spec.extent, s).0
        };
        let co = pairs.iter().filter(|(i, j)| same(spec.shift, *i, *j)).count();
        let union = pairs
            .iter()
            .filter(|(i, j)| same([0; 3], *i, *j) || same(spec.shift, *i, *j))
            .count();

        let (seq, voxels_per_sec) = if coords.is_empty() {
            (None, 0.0)
        } else {
            let start = Instant::now();
            let mut reps = 0usize;
            let mut seq = None;
            while reps < 3 || start.elapsed().as_secs_f64() < 0.02 {
                seq = Some(serialize_voxels(coords, spec, grid_extent)?);
                reps += 1;
            }
            let secs = start.elapsed().as_secs_f64().max(1e-12);
            (seq, (coords.len() * reps) as f64 / secs)
        };
        let mean_seq_gap = match (&seq, pairs.len()) {
            (Some(seq), n) if n > 0 => {
                let total: usize = pairs.iter().map(|(i, j)| seq.inverse[*i].abs_diff(seq.inverse[*j])).sum();
                total as f64 / n as f64
            }
            _ => 0.0,
        };
        out.push(LocalityMetrics {
            spec: *spec,
            pairs: pairs.len(),
            co_window_pairs: co,
            co_window: fraction(co, pairs.len()),
            union_co_window_pairs: union,
            union_co_window: fraction(union, pairs.len()),
            mean_seq_gap,
            voxels_per_sec,
        });
    }
    Ok(out)
}

/// Every cell of a dense `n × n × n` grid, in lexicographic order.
pub fn dense_grid(n: u32) -> Vec<Coord> {
    let mut out = Vec::with_capacity((n * n * n) as usize);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                out.push([x, y, z]);
            }
        }
    }
    out
}
