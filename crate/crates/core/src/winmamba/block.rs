use rand::Rng;

use super::config::{wsa_window, StageConfig};
use super::layer::{fuse_sets, WinMambaLayer};
use crate::error::{Error, Result};
use crate::numerics::{Mode, Params, Tape};
use crate::ssm::SsmConfig;
use crate::voxelgrid::{CoordMap, Resample, SparseVoxelSet};

/// LIFO store of the coordinate maps recorded while descending a block.
#[derive(Clone, Debug, Default)]
pub struct MapStack {
    maps: Vec<CoordMap>,
}

impl MapStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, map: CoordMap) {
        self.maps.push(map);
    }

    pub fn pop(&mut self) -> Result<CoordMap> {
        self.maps.pop().ok_or_else(|| Error::contract("no coordinate map left to pop"))
    }

    pub fn peek(&self) -> Result<&CoordMap> {
        self.maps.last().ok_or_else(|| Error::contract("no coordinate map recorded"))
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }
}

/// One backbone stage: a two-level in-block pyramid with optional
/// auxiliary paths, followed by the trailing downsample.
#[derive(Clone, Debug)]
pub struct WinMambaBlock {
    pub prefix: String,
    pub cfg: StageConfig,
    pub trailing: [usize; 3],
    dse_down: Resample,
    dse_wl: WinMambaLayer,
    dse_aux: Option<(WinMambaLayer, Resample)>,
    fb_down: Resample,
    fb_wl: WinMambaLayer,
    fb_up: Resample,
    fb_aux: Option<WinMambaLayer>,
    cd_wl: WinMambaLayer,
    cd_up: Resample,
    cd_aux: Option<(Resample, WinMambaLayer)>,
    out_down: Resample,
}

fn mul3(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|i| a[i] * b[i])
}

impl WinMambaBlock {
    pub fn new(prefix: &str, cfg: &StageConfig, trailing: [usize; 3], ssm: &SsmConfig) -> Self {
        let c = cfg.channels;
        let wl = |name: &str| WinMambaLayer::new(&format!("{prefix}.{name}"), c, ssm);
        let rs = |name: &str| Resample::new(&format!("{prefix}.{name}"), c);
        let awf = cfg.awf;
        Self {
            prefix: prefix.to_string(),
            cfg: cfg.clone(),
            trailing,
            dse_down: rs("dse.down"),
            dse_wl: wl("dse.wl"),
            dse_aux: awf.dual_stream.then(|| (wl("dse.aux_wl"), rs("dse.aux_down"))),
            fb_down: rs("fb.down"),
            fb_wl: wl("fb.wl"),
            fb_up: rs("fb.up"),
            fb_aux: awf.bridging.then(|| wl("fb.aux_wl")),
            cd_wl: wl("cd.wl"),
            cd_up: rs("cd.up"),
            cd_aux: awf.decoding.then(|| (rs("cd.aux_up"), wl("cd.aux_wl"))),
            out_down: rs("out.down"),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        self.dse_down.init(params, rng)?;
        self.dse_wl.init(params, rng)?;
        if let Some((wl, rs)) = &self.dse_aux {
            wl.init(params, rng)?;
            rs.init(params, rng)?;
        }
        self.fb_down.init(params, rng)?;
        self.fb_wl.init(params, rng)?;
        self.fb_up.init(params, rng)?;
        if let Some(wl) = &self.fb_aux {
            wl.init(params, rng)?;
        }
        self.cd_wl.init(params, rng)?;
        self.cd_up.init(params, rng)?;
        if let Some((rs, wl)) = &self.cd_aux {
            rs.init(params, rng)?;
            wl.init(params, rng)?;
        }
        self.out_down.init(params, rng)
    }

    fn wl(&self, tape: &mut Tape, params: &Params, layer: &WinMambaLayer, set: &SparseVoxelSet, window: [usize; 3], mode: Mode) -> Result<SparseVoxelSet> {
        layer.forward(tape, params, set, window, self.cfg.shift_for(window), self.cfg.wsf, mode)
    }

    /// Auxiliary window for a path at stride `fs_aux` paired with a main
    /// path at stride `fs_main` running the stage window.
    pub fn aux_window(&self, fs_main: [usize; 3], fs_aux: [usize; 3]) -> Result<[usize; 3]> {
        wsa_window(fs_main, fs_aux, self.cfg.window)
    }

    /// Dual-stream encoding. Returns the level-1 output and the map from
    /// level 0 to level 1.
    pub fn dse_forward(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, mode: Mode) -> Result<(SparseVoxelSet, CoordMap)> {
        let d = self.cfg.factor3();
        let map0 = CoordMap::build(&input.coords, d, input.stride, input.extent)?;
        let down = self.dse_down.down(tape, params, input, &map0)?;
        let o1 = self.wl(tape, params, &self.dse_wl, &down, self.cfg.window, mode)?;
        let out = match &self.dse_aux {
            Some((aux_wl, aux_down)) => {
                let ws = self.aux_window(o1.stride, input.stride)?;
                let a = self.wl(tape, params, aux_wl, input, ws, mode)?;
                let o2 = aux_down.down(tape, params, &a, &map0)?;
                fuse_sets(tape, &o1, &o2)?
            }
            None => o1,
        };
        Ok((out, map0))
    }

    /// Feature bridging at the pyramid bottom; `stack` holds the level-1
    /// map only for the duration of the call.
    pub fn fb_forward(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, stack: &mut MapStack, mode: Mode) -> Result<SparseVoxelSet> {
        let d = self.cfg.factor3();
        stack.push(CoordMap::build(&input.coords, d, input.stride, input.extent)?);
        let down = self.fb_down.down(tape, params, input, stack.peek()?)?;
        let mid = self.wl(tape, params, &self.fb_wl, &down, self.cfg.window, mode)?;
        let map1 = stack.pop()?;
        let mut out = self.fb_up.up(tape, params, &mid, &map1)?;
        if let Some(aux) = &self.fb_aux {
            let ws = self.aux_window(mid.stride, input.stride)?;
            let o2 = self.wl(tape, params, aux, input, ws, mode)?;
            out = fuse_sets(tape, &out, &o2)?;
        }
        if self.cfg.awf.legacy_residual {
            out = fuse_sets(tape, &out, input)?;
        }
        Ok(out)
    }

    /// Collaborative decoding back to level 0 through `map0`.
    pub fn cd_forward(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, map0: &CoordMap, mode: Mode) -> Result<SparseVoxelSet> {
        let mid = self.wl(tape, params, &self.cd_wl, input, self.cfg.window, mode)?;
        let o1 = self.cd_up.up(tape, params, &mid, map0)?;
        match &self.cd_aux {
            Some((aux_up, aux_wl)) => {
                let up = aux_up.up(tape, params, input, map0)?;
                let ws = self.aux_window(input.stride, up.stride)?;
                let o2 = self.wl(tape, params, aux_wl, &up, ws, mode)?;
                fuse_sets(tape, &o1, &o2)
            }
            None => Ok(o1),
        }
    }

    /// The in-block pyramid without the trailing downsample. Output
    /// coordinates equal the input coordinates.
    pub fn pyramid_forward(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, mode: Mode) -> Result<SparseVoxelSet> {
        let mut stack = MapStack::new();
        let (oa, map0) = self.dse_forward(tape, params, input, mode)?;
        stack.push(map0);
        let ob = self.fb_forward(tape, params, &oa, &mut stack, mode)?;
        let oc = self.cd_forward(tape, params, &ob, stack.peek()?, mode)?;
        stack.pop()?;
        debug_assert_eq!(stack.depth(), 0);
        Ok(oc)
    }

    /// Pyramid followed by the trailing downsample.
    pub fn forward(&self, tape: &mut Tape, params: &Params, input: &SparseVoxelSet, mode: Mode) -> Result<SparseVoxelSet> {
        let oc = self.pyramid_forward(tape, params, input, mode)?;
        let map = CoordMap::build(&oc.coords, self.trailing, oc.stride, oc.extent)?;
        self.out_down.down(tape, params, &oc, &map)
    }

    /// Output stride for an input at `stride`.
    pub fn output_stride(&self, stride: [usize; 3]) -> [usize; 3] {
        mul3(stride, self.trailing)
    }
}
