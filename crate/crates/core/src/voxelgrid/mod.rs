//! Point clouds, voxelization and sparse resampling with recorded maps.

pub mod io;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Linear, Params, Tape, Var};

pub use io::{parse_binary, parse_text, read_point_file, write_binary, write_text, PointRows};

/// Integer voxel coordinate `(x, y, z)`.
pub type Coord = [u32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(Error::Config(format!("invalid bounds on axis {a}: {self:?}")));
            }
        }
        Ok(())
    }

    /// Half-open membership `[min, max)`.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn grid_extent(&self, cell: [f64; 3]) -> [usize; 3] {
        let mut e = [0; 3];
        for a in 0..3 {
            e[a] = ((self.max[a] - self.min[a]) / cell[a]).ceil() as usize;
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// Row-major `len × channels` extra per-point values.
    pub extras: Vec<f64>,
    pub channels: usize,
    pub bounds: Bounds,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, extras: Vec<f64>, channels: usize, bounds: Bounds) -> Result<Self> {
        bounds.validate()?;
        if extras.len() != positions.len() * channels {
            return Err(Error::dim(
                "point_cloud",
                format!("{} points × {channels} channels vs {} extras", positions.len(), extras.len()),
            ));
        }
        if positions.iter().flatten().chain(&extras).any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite point coordinate or channel".into()));
        }
        Ok(Self {
            positions,
            extras,
            channels,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extra(&self, i: usize) -> &[f64] {
        &self.extras[i * self.channels..(i + 1) * self.channels]
    }
}

/// Voxel coordinates plus one feature row per voxel.
///
/// Row `i` of `features` belongs to `coords[i]`. `stride` is the voxel size in
/// base-voxel multiples and `extent` bounds the coordinates per axis.
#[derive(Clone, Debug)]
pub struct SparseVoxelSet {
    pub coords: Vec<Coord>,
    pub features: Var,
    pub stride: [usize; 3],
    pub extent: [usize; 3],
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.value(self.features).cols()
    }

    pub fn with_features(&self, features: Var) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }

    /// Checks uniqueness, bounds and row alignment.
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        if tape.value(self.features).rows() != self.coords.len() {
            return Err(Error::contract("feature rows do not align with coordinates"));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if (0..3).any(|a| c[a] as usize >= self.extent[a]) {
                return Err(Error::contract(format!("coordinate {c:?} outside extent {:?}", self.extent)));
            }
            if !seen.insert(*c) {
                return Err(Error::contract(format!("duplicate voxel {c:?}")));
            }
        }
        Ok(())
    }
}

/// Result of binning points into voxels, in lexicographic coordinate order.
#[derive(Clone, Debug, PartialEq)]
pub struct Binning {
    pub coords: Vec<Coord>,
    /// Point indices per voxel, in input order.
    pub members: Vec<Vec<usize>>,
    pub extent: [usize; 3],
}

pub fn point_coord(p: &[f64; 3], bounds: &Bounds, cell: [f64; 3]) -> Coord {
    let mut c = [0u32; 3];
    for a in 0..3 {
        c[a] = ((p[a] - bounds.min[a]) / cell[a]).floor() as u32;
    }
    c
}

/// Bins in-bounds points; points outside the half-open bounds are dropped.
pub fn bin_points(cloud: &PointCloud, cell: [f64; 3]) -> Result<Binning> {
    if cell.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::Config(format!("voxel cell must be positive, got {cell:?}")));
    }
    let extent = cloud.bounds.grid_extent(cell);
    let mut bins: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        if !cloud.bounds.contains(p) {
            continue;
        }
        let mut c = point_coord(p, &cloud.bounds, cell);
        // guard against rounding at the top edge of the last cell
        for a in 0..3 {
            c[a] = c[a].min(extent[a] as u32 - 1);
        }
        bins.entry(c).or_default().push(i);
    }
    if bins.is_empty() {
        return Err(Error::EmptyScene);
    }
    let (coords, members) = bins.into_iter().unzip();
    Ok(Binning { coords, members, extent })
}

/// Per-voxel raw features: mean offset from the voxel centre (metres) and
/// mean extra channels, `n × (3 + channels)`.
pub fn raw_voxel_features(cloud: &PointCloud, binning: &Binning, cell: [f64; 3]) -> Array {
    let width = 3 + cloud.channels;
    let mut data = vec![0.0; binning.coords.len() * width];
    for (v, (c, members)) in binning.coords.iter().zip(&binning.members).enumerate() {
        let row = &mut data[v * width..(v + 1) * width];
        for &i in members {
            let p = cloud.positions[i];
            for a in 0..3 {
                let centre = cloud.bounds.min[a] + (c[a] as f64 + 0.5) * cell[a];
                row[a] += p[a] - centre;
            }
            for (r, e) in row[3..].iter_mut().zip(cloud.extra(i)) {
                *r += e;
            }
        }
        let inv = 1.0 / members.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    Array::matrix(binning.coords.len(), width, data).expect("sized above")
}

/// Voxel feature encoder: mean pooling of point attributes followed by one
/// linear layer.
#[derive(Clone, Debug)]
pub struct VoxelEncoder {
    pub proj: Linear,
    pub cell: [f64; 3],
}

impl VoxelEncoder {
    pub fn new(prefix: &str, extra_channels: usize, channels: usize, cell: [f64; 3]) -> Self {
        Self {
            proj: Linear::new(&format!("{prefix}.proj"), 3 + extra_channels, channels),
            cell,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        self.proj.init(params, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, cloud: &PointCloud) -> Result<(SparseVoxelSet, Binning)> {
        if cloud.channels + 3 != self.proj.fan_in {
            return Err(Error::dim(
                "voxelize",
                format!("cloud has {} extra channels, encoder expects {}", cloud.channels, self.proj.fan_in - 3),
            ));
        }
        let binning = bin_points(cloud, self.cell)?;
        let raw = tape.input(raw_voxel_features(cloud, &binning, self.cell))?;
        let features = self.proj.forward(tape, params, raw)?;
        let set = SparseVoxelSet {
            coords: binning.coords.clone(),
            features,
            stride: [1, 1, 1],
            extent: binning.extent,
        };
        Ok((set, binning))
    }
}

pub fn voxelize(tape: &mut Tape, params: &Params, cloud: &PointCloud, encoder: &VoxelEncoder) -> Result<SparseVoxelSet> {
    encoder.forward(tape, params, cloud).map(|(s, _)| s)
}

/// Parent/child bookkeeping of one downsampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMap {
    /// Parent coordinates in lexicographic order.
    pub parents: Vec<Coord>,
    /// Source rows merged into each parent, ordered by child coordinate.
    pub children: Vec<Vec<usize>>,
    pub factor: [usize; 3],
    pub child_coords: Vec<Coord>,
    pub child_stride: [usize; 3],
    pub child_extent: [usize; 3],
}

impl CoordMap {
    /// Groups `coords` by `floor(coord / factor)`.
    pub fn build(coords: &[Coord], factor: [usize; 3], stride: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        if factor.contains(&0) {
            return Err(Error::Config(format!("sampling factor must be ≥ 1, got {factor:?}")));
        }
        let mut groups: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
        for (i, c) in coords.iter().enumerate() {
            let p = [c[0] / factor[0] as u32, c[1] / factor[1] as u32, c[2] / factor[2] as u32];
            groups.entry(p).or_default().push(i);
        }
        let mut parents = Vec::with_capacity(groups.len());
        let mut children = Vec::with_capacity(groups.len());
        for (p, mut rows) in groups {
            rows.sort_by_key(|&r| coords[r]);
            parents.push(p);
            children.push(rows);
        }
        Ok(Self {
            parents,
            children,
            factor,
            child_coords: coords.to_vec(),
            child_stride: stride,
            child_extent: extent,
        })
    }

    pub fn parent_stride(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.child_stride[a] * self.factor[a])
    }

    pub fn parent_extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.child_extent[a].div_ceil(self.factor[a]))
    }

    /// Parent row of every child row.
    pub fn parent_of_child(&self) -> Vec<usize> {
        let mut out = vec![0; self.child_coords.len()];
        for (p, rows) in self.children.iter().enumerate() {
            for &r in rows {
                out[r] = p;
            }
        }
        out
    }
}

/// Sparse resampling operator: a `C → C` projection applied after pooling
/// (down) or replication (up).
#[derive(Clone, Debug)]
pub struct Resample {
    pub proj: Linear,
}

impl Resample {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            proj: Linear::new(&format!("{prefix}.proj"), channels, channels),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        self.proj.init(params, rng)
    }

    /// Mean-pools children into parents through `map`, then projects.
    pub fn down(&self, tape: &mut Tape, params: &Params, set: &SparseVoxelSet, map: &CoordMap) -> Result<SparseVoxelSet> {
        if map.child_coords != set.coords {
            return Err(Error::contract("downsample map was recorded for a different coordinate list"));
        }
        let pooled = tape.segment_mean(set.features, &map.children)?;
        let features = self.proj.forward(tape, params, pooled)?;
        Ok(SparseVoxelSet {
            coords: map.parents.clone(),
            features,
            stride: map.parent_stride(),
            extent: map.parent_extent(),
        })
    }

    /// Replicates each parent row to its recorded children, then projects.
    /// Restores the exact pre-downsample coordinate list.
    pub fn up(&self, tape: &mut Tape, params: &Params, set: &SparseVoxelSet, map: &CoordMap) -> Result<SparseVoxelSet> {
        if set.coords != map.parents {
            return Err(Error::contract("upsample input coordinates do not match the map's parents"));
        }
        let replicated = tape.gather_rows(set.features, &map.parent_of_child())?;
        let features = self.proj.forward(tape, params, replicated)?;
        Ok(SparseVoxelSet {
            coords: map.child_coords.clone(),
            features,
            stride: map.child_stride,
            extent: map.child_extent,
        })
    }
}

/// Downsamples by `factor`, returning the coarse set and the map that
/// inverts it.
pub fn downsample(
    tape: &mut Tape,
    params: &Params,
    set: &SparseVoxelSet,
    factor: [usize; 3],
    op: &Resample,
) -> Result<(SparseVoxelSet, CoordMap)> {
    let map = CoordMap::build(&set.coords, factor, set.stride, set.extent)?;
    let out = op.down(tape, params, set, &map)?;
    Ok((out, map))
}

pub fn upsample(tape: &mut Tape, params: &Params, set: &SparseVoxelSet, map: &CoordMap, op: &Resample) -> Result<SparseVoxelSet> {
    op.up(tape, params, set, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_bounds() -> Bounds {
        Bounds::new([0.0; 3], [4.0; 3]).unwrap()
    }

    #[test]
    fn two_points_one_voxel_mean_extra() {
        let cloud = PointCloud::new(vec![[0.2, 0.2, 0.2], [0.7, 0.6, 0.1]], vec![1.0, 3.0], 1, unit_bounds()).unwrap();
        let b = bin_points(&cloud, [1.0; 3]).unwrap();
        assert_eq!(b.coords, vec![[0, 0, 0]]);
        let raw = raw_voxel_features(&cloud, &b, [1.0; 3]);
        assert_eq!(raw.get(0, 3), 2.0);
        assert!((raw.get(0, 0) - (0.45 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn upper_bound_is_exclusive() {
        let cloud = PointCloud::new(vec![[4.0, 1.0, 1.0], [1.0, 1.0, 1.0]], vec![], 0, unit_bounds()).unwrap();
        let b = bin_points(&cloud, [1.0; 3]).unwrap();
        assert_eq!(b.coords, vec![[1, 1, 1]]);
        let only_edge = PointCloud::new(vec![[4.0, 4.0, 4.0]], vec![], 0, unit_bounds()).unwrap();
        assert!(matches!(bin_points(&only_edge, [1.0; 3]), Err(Error::EmptyScene)));
    }

    #[test]
    fn identity_factor_gives_identity_partition() {
        let coords = vec![[3, 1, 0], [0, 0, 0], [2, 2, 2]];
        let m = CoordMap::build(&coords, [1, 1, 1], [1, 1, 1], [4, 4, 4]).unwrap();
        let mut parents = m.parents.clone();
        parents.sort();
        let mut sorted = coords.clone();
        sorted.sort();
        assert_eq!(parents, sorted);
        assert!(m.children.iter().all(|c| c.len() == 1));
        assert!(CoordMap::build(&coords, [0, 1, 1], [1; 3], [4; 3]).is_err());
    }

    #[test]
    fn mean_pooling_of_two_children() {
        let mut params = Params::default();
        let op = Resample::new("d", 2);
        params.insert("d.proj.weight", Array::identity(2)).unwrap();
        params.insert("d.proj.bias", Array::zeros(&[2])).unwrap();
        let mut tape = Tape::new();
        let f = tape.input(Array::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]])).unwrap();
        let set = SparseVoxelSet {
            coords: vec![[0, 0, 0], [1, 0, 0]],
            features: f,
            stride: [1; 3],
            extent: [4; 3],
        };
        let (down, map) = downsample(&mut tape, &params, &set, [2, 2, 2], &op).unwrap();
        assert_eq!(down.coords, vec![[0, 0, 0]]);
        assert_eq!(tape.value(down.features).data(), &[2.0, 4.0]);
        assert_eq!(down.stride, [2, 2, 2]);
        assert_eq!(down.extent, [2, 2, 2]);
        let up = upsample(&mut tape, &params, &down, &map, &op).unwrap();
        assert_eq!(up.coords, set.coords);
        assert_eq!(tape.value(up.features).data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn upsample_rejects_foreign_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::default();
        let op = Resample::new("u", 1);
        op.init(&mut params, &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.input(Array::zeros(&[2, 1])).unwrap();
        let set = SparseVoxelSet {
            coords: vec![[0, 0, 0], [5, 0, 0]],
            features: f,
            stride: [1; 3],
            extent: [8; 3],
        };
        let map = CoordMap::build(&set.coords, [2; 3], set.stride, set.extent).unwrap();
        let wrong = SparseVoxelSet {
            coords: vec![[0, 0, 0], [1, 0, 0]],
            ..set.clone()
        };
        assert!(matches!(op.up(&mut tape, &params, &wrong, &map), Err(Error::Contract(_))));
    }
}
