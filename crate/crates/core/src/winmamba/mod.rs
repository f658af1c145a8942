//! Window-based Mamba backbone over sparse voxels.
//!
//! Each stage runs a two-level pyramid inside the block: dual-stream
//! encoding down, feature bridging at the bottom, collaborative decoding back
//! up, then a trailing downsample. Every sequence model sees voxels in window
//! order; with shift fusion on, the shifted and unshifted orders are processed
//! jointly as one sequence. Auxiliary paths run at the finer stride with a
//! window scaled so both paths cover the same physical extent.

mod block;
mod config;
mod layer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use block::{MapStack, WinMambaBlock};
pub use config::{wsa_window, AwfParts, BackboneConfig, StageConfig, DEFAULT_STAGE_WINDOWS};
pub use layer::{fuse_sets, wsf_apply, PosEmbed, WinMambaLayer};

use crate::error::{Error, Result};
use crate::numerics::{grad_check, Array, GradCheckOptions, GradCheckReport, Mode, Params, Tape};
use crate::voxelgrid::{Bounds, PointCloud, SparseVoxelSet, VoxelEncoder};

/// Shape summary of one stage's output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageTrace {
    pub stage: usize,
    pub window: [usize; 3],
    pub voxels_in: usize,
    pub stride_in: [usize; 3],
    pub extent_in: [usize; 3],
    pub voxels_out: usize,
    pub stride_out: [usize; 3],
    pub extent_out: [usize; 3],
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub input: SparseVoxelSet,
    pub stages: Vec<SparseVoxelSet>,
    pub trace: Vec<StageTrace>,
}

impl BackboneOutput {
    pub fn last(&self) -> &SparseVoxelSet {
        self.stages.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub encoder: VoxelEncoder,
    pub blocks: Vec<WinMambaBlock>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = VoxelEncoder::new("vfe", cfg.extra_channels, cfg.channels(), cfg.cell);
        let blocks = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| WinMambaBlock::new(&format!("stage{i}"), s, cfg.trailing_factor, &cfg.ssm))
            .collect();
        Ok(Self { cfg, encoder, blocks })
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn init_params(&self) -> Result<Params> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut params = Params::default();
        self.encoder.init(&mut params, &mut rng)?;
        for b in &self.blocks {
            b.init(&mut params, &mut rng)?;
        }
        Ok(params)
    }

    pub fn forward_cloud(&self, tape: &mut Tape, params: &Params, cloud: &PointCloud, mode: Mode) -> Result<BackboneOutput> {
        let (set, _) = self.encoder.forward(tape, params, cloud)?;
        self.forward_set(tape, params, &set, mode)
    }

    pub fn forward_set(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, mode: Mode) -> Result<BackboneOutput> {
        if input.is_empty() {
            return Err(Error::EmptyScene);
        }
        input.validate(tape)?;
        let mut stages = Vec::with_capacity(self.blocks.len());
        let mut trace = Vec::with_capacity(self.blocks.len());
        let mut cur = input.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let next = b.forward(tape, params, &cur, mode)?;
            trace.push(StageTrace {
                stage: i,
                window: b.cfg.window,
                voxels_in: cur.len(),
                stride_in: cur.stride,
                extent_in: cur.extent,
                voxels_out: next.len(),
                stride_out: next.stride,
                extent_out: next.extent,
                channels: next.channels(tape),
            });
            stages.push(next.clone());
            cur = next;
        }
        Ok(BackboneOutput {
            input: input.clone(),
            stages,
            trace,
        })
    }
}

/// Max-pools a sparse set over Z into a dense `X × Y × C` grid; empty
/// columns are zero.
pub fn bev_max_pool(tape: &Tape, set: &SparseVoxelSet) -> Array {
    let f = tape.value(set.features);
    let (nx, ny, c) = (set.extent[0], set.extent[1], f.cols());
    let mut out = vec![f64::NEG_INFINITY; nx * ny * c];
    let mut filled = vec![false; nx * ny];
    for (r, co) in set.coords.iter().enumerate() {
        let cell = co[0] as usize * ny + co[1] as usize;
        filled[cell] = true;
        for k in 0..c {
            let v = &mut out[cell * c + k];
            *v = v.max(f.get(r, k));
        }
    }
    for (cell, on) in filled.iter().enumerate() {
        if !on {
            out[cell * c..(cell + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Array::from_vec(&[nx, ny, c], out).expect("shape matches")
}

/// Small configuration for gradient checks and quick runs: a
/// `8·stages`-voxel-wide grid with compact windows.
pub fn compact_config(stages: usize, channels: usize, seed: u64) -> BackboneConfig {
    let windows = [[4, 4, 4], [4, 4, 2], [4, 4, 2], [4, 4, 1]];
    let mut cfg = BackboneConfig {
        stages: (0..stages)
            .map(|i| StageConfig {
                window: windows[i.min(3)],
                channels,
                ..StageConfig::default()
            })
            .collect(),
        seed,
        cell: [1.0; 3],
        bounds: Bounds {
            min: [0.0; 3],
            max: [8.0, 8.0, 4.0],
        },
        ..BackboneConfig::default()
    };
    cfg.ssm.d_state = 4;
    cfg
}

/// A deterministic cloud with one point in each of `voxels` distinct cells.
pub fn scatter_cloud(cfg: &BackboneConfig, voxels: usize, seed: u64) -> Result<PointCloud> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let ext = cfg.grid_extent();
    let total = ext[0] * ext[1] * ext[2];
    if voxels == 0 || voxels > total {
        return Err(Error::Config(format!("cannot place {voxels} voxels in a grid of {total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(&mut rng);
    let mut positions = Vec::with_capacity(voxels);
    let mut extras = Vec::with_capacity(voxels * cfg.extra_channels);
    for &cell in &cells[..voxels] {
        let idx = [cell / (ext[1] * ext[2]), (cell / ext[2]) % ext[1], cell % ext[2]];
        positions.push(std::array::from_fn(|a| {
            cfg.bounds.min[a] + (idx[a] as f64 + rng.gen_range(0.1..0.9)) * cfg.cell[a]
        }));
        for _ in 0..cfg.extra_channels {
            extras.push(rng.gen_range(0.0..1.0));
        }
    }
    PointCloud::new(positions, extras, cfg.extra_channels, cfg.bounds)
}

/// Gradient check of the whole backbone on a scattered cloud: the loss is
/// a fixed random weighting of the last stage's features.
pub fn gradcheck_backbone(cfg: &BackboneConfig, voxels: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    use rand::Rng;
    let model = Backbone::new(cfg.clone())?;
    let params = model.init_params()?;
    let cloud = scatter_cloud(cfg, voxels, cfg.seed ^ 0x5eed)?;
    let probe = {
        let mut tape = Tape::detached();
        let out = model.forward_cloud(&mut tape, &params, &cloud, Mode::Train)?;
        tape.value(out.last().features).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let weights: Vec<f64> = (0..probe).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_check(
        |tape: &mut Tape, p: &Params| {
            let out = model.forward_cloud(tape, p, &cloud, Mode::Train)?;
            tape.weighted_sum(out.last().features, &weights)
        },
        &params,
        opts,
    )
}
