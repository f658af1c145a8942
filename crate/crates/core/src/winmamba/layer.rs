use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Array, BatchNorm, Linear, Mode, Params, Tape, Var};
use crate::serialize::{gather_sequence, serialize_set, unserialize, ScanAxis, WindowSpec};
use crate::ssm::{rms_norm_on_tape, MambaBlock, SsmConfig};
use crate::voxelgrid::{Coord, SparseVoxelSet};

/// `Linear(3→C) → BN → ReLU → Linear(C→C)` over raw integer coordinates.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl PosEmbed {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), 3, channels),
            bn: BatchNorm::new(&format!("{prefix}.bn"), channels),
            fc2: Linear::new(&format!("{prefix}.fc2"), channels, channels),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        self.fc1.init(params, rng)?;
        self.bn.init(params)?;
        self.fc2.init(params, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, coords: &[Coord], mode: Mode) -> Result<Var> {
        let rows: Vec<f64> = coords.iter().flat_map(|c| c.iter().map(|&v| v as f64)).collect();
        let x = tape.input(Array::from_vec(&[coords.len(), 3], rows)?)?;
        let h = self.fc1.forward(tape, params, x)?;
        let h = self.bn.forward(tape, params, h, mode)?;
        let h = tape.activation(h, Activation::Relu)?;
        self.fc2.forward(tape, params, h)
    }
}

/// Runs `block` over the window serialization of `set` under `spec`.
///
/// With `fuse` on, the unshifted and the shifted serializations are
/// concatenated into one sequence, processed in a single pass, split at the
/// midpoint, scattered back to voxel order and summed. With `fuse` off only
/// the unshifted serialization is used.
pub fn wsf_apply(
    tape: &mut Tape,
    params: &Params,
    set: &SparseVoxelSet,
    features: Var,
    spec: &WindowSpec,
    block: &MambaBlock,
    fuse: bool,
) -> Result<Var> {
    let s0 = serialize_set(set, &spec.without_shift())?;
    let seq0 = gather_sequence(tape, features, &s0)?;
    if !fuse {
        let out = block.forward(tape, params, seq0)?;
        return unserialize(tape, out, &s0);
    }
    let s1 = serialize_set(set, spec)?;
    let seq1 = gather_sequence(tape, features, &s1)?;
    let joint = tape.concat_rows(seq0, seq1)?;
    let out = block.forward(tape, params, joint)?;
    let n = set.len();
    if tape.value(out).rows() != 2 * n {
        return Err(Error::contract("fused sequence length changed inside the block"));
    }
    let o0 = tape.slice_rows(out, 0, n)?;
    let o1 = tape.slice_rows(out, n, 2 * n)?;
    let r0 = unserialize(tape, o0, &s0)?;
    let r1 = unserialize(tape, o1, &s1)?;
    tape.add(r0, r1)
}

/// Row-wise RMS normalization plus position embedding, then one
/// window-serialized Mamba pass along X and one along Y, each with its own
/// parameters.
#[derive(Clone, Debug)]
pub struct WinMambaLayer {
    pub prefix: String,
    pub norm_scale: String,
    pub pos: PosEmbed,
    pub mamba_x: MambaBlock,
    pub mamba_y: MambaBlock,
}

impl WinMambaLayer {
    pub fn new(prefix: &str, channels: usize, ssm: &SsmConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            norm_scale: format!("{prefix}.norm.scale"),
            pos: PosEmbed::new(&format!("{prefix}.pos"), channels),
            mamba_x: MambaBlock::new(&format!("{prefix}.mamba_x"), channels, ssm),
            mamba_y: MambaBlock::new(&format!("{prefix}.mamba_y"), channels, ssm),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        let c = self.mamba_x.channels;
        params.insert(self.norm_scale.clone(), Array::full(&[c], 1.0))?;
        self.pos.init(params, rng)?;
        self.mamba_x.init(params, rng)?;
        self.mamba_y.init(params, rng)
    }

    /// Keeps coordinates, stride and extent; replaces features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        set: &SparseVoxelSet,
        window: [usize; 3],
        shift: [usize; 3],
        fuse: bool,
        mode: Mode,
    ) -> Result<SparseVoxelSet> {
        if set.is_empty() {
            return Err(Error::EmptySequence);
        }
        let g = tape.param(params, &self.norm_scale)?;
        let f = rms_norm_on_tape(tape, set.features, g)?;
        let pe = self.pos.forward(tape, params, &set.coords, mode)?;
        let f = tape.add(f, pe)?;
        let spec_x = WindowSpec::new(window, ScanAxis::X, shift)?;
        let f = wsf_apply(tape, params, set, f, &spec_x, &self.mamba_x, fuse)?;
        let spec_y = WindowSpec::new(window, ScanAxis::Y, shift)?;
        let f = wsf_apply(tape, params, set, f, &spec_y, &self.mamba_y, fuse)?;
        Ok(set.with_features(f))
    }
}

/// Adds two feature sets that must live on the identical coordinate list.
pub fn fuse_sets(tape: &mut Tape, a: &SparseVoxelSet, b: &SparseVoxelSet) -> Result<SparseVoxelSet> {
    if a.coords != b.coords || a.stride != b.stride {
        return Err(Error::contract(format!(
            "fusion inputs differ: {} voxels at stride {:?} vs {} at {:?}",
            a.len(),
            a.stride,
            b.len(),
            b.stride
        )));
    }
    tape.bump("fusion");
    let f = tape.add(a.features, b.features)?;
    Ok(a.with_features(f))
}
