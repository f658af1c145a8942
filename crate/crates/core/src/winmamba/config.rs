use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serialize::half_shift;
use crate::ssm::SsmConfig;
use crate::voxelgrid::Bounds;

/// Which adaptive-window-fusion parts are active.
///
/// `A` dual-stream encoding, `B` feature bridging, `C` collaborative
/// decoding, `D` the plain FPN residual around bridging. A disabled part
/// keeps only its main-path branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AwfParts {
    pub dual_stream: bool,
    pub bridging: bool,
    pub decoding: bool,
    pub legacy_residual: bool,
}

impl AwfParts {
    pub const NONE: AwfParts = AwfParts {
        dual_stream: false,
        bridging: false,
        decoding: false,
        legacy_residual: false,
    };

    pub fn abc() -> Self {
        "ABC".parse().unwrap()
    }
}

impl FromStr for AwfParts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = AwfParts::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s == "-" {
            return Ok(p);
        }
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'A' => p.dual_stream = true,
                'B' => p.bridging = true,
                'C' => p.decoding = true,
                'D' => p.legacy_residual = true,
                _ => return Err(Error::Config(format!("unknown AWF part `{ch}` in `{s}`"))),
            }
        }
        Ok(p)
    }
}

impl fmt::Display for AwfParts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = [
            (self.dual_stream, 'A'),
            (self.bridging, 'B'),
            (self.decoding, 'C'),
            (self.legacy_residual, 'D'),
        ];
        let s: String = flags.iter().filter(|(on, _)| *on).map(|(_, c)| *c).collect();
        if s.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&s)
        }
    }
}

impl TryFrom<String> for AwfParts {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AwfParts> for String {
    fn from(p: AwfParts) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Main-path window extent in voxels at the main path's stride.
    pub window: [usize; 3],
    /// In-block sampling factor `d` (= `u`), applied on every axis.
    pub factor: usize,
    pub channels: usize,
    pub wsf: bool,
    pub awf: AwfParts,
    /// Shift override for main-path windows; `None` is half the window.
    pub shift: Option<[usize; 3]>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            window: [13, 13, 32],
            factor: 2,
            channels: 64,
            wsf: true,
            awf: AwfParts::abc(),
            shift: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.channels == 0 || self.window.contains(&0) {
            return Err(Error::Config(format!("stage sizes must be positive: {self:?}")));
        }
        if let Some(s) = self.shift {
            if (0..3).any(|a| s[a] >= self.window[a]) {
                return Err(Error::Config(format!("shift {s:?} must be below window {:?}", self.window)));
            }
        }
        Ok(())
    }

    pub fn factor3(&self) -> [usize; 3] {
        [self.factor; 3]
    }

    /// Shift for a window derived from this stage's main window by an
    /// integer per-axis ratio: an override scales with the window, the
    /// default is half the window.
    pub fn shift_for(&self, window: [usize; 3]) -> [usize; 3] {
        match self.shift {
            Some(s) => std::array::from_fn(|a| s[a] * window[a] / self.window[a]),
            None => half_shift(window),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    /// Main-path pyramid depth inside a block; only 2 is supported.
    pub fpn_levels: usize,
    pub seed: u64,
    pub cell: [f64; 3],
    pub bounds: Bounds,
    /// Extra per-point channels consumed by the voxel encoder.
    pub extra_channels: usize,
    /// Downsampling factor between blocks.
    pub trailing_factor: [usize; 3],
    pub ssm: SsmConfig,
}

pub const DEFAULT_STAGE_WINDOWS: [[usize; 3]; 4] = [[13, 13, 32], [13, 13, 16], [13, 13, 8], [13, 13, 4]];

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGE_WINDOWS
                .iter()
                .map(|w| StageConfig {
                    window: *w,
                    ..StageConfig::default()
                })
                .collect(),
            fpn_levels: 2,
            seed: 0,
            cell: [0.4, 0.4, 0.125],
            bounds: Bounds {
                min: [0.0, 0.0, -2.0],
                max: [20.8, 20.8, 2.0],
            },
            extra_channels: 1,
            trailing_factor: [1, 1, 2],
            ssm: SsmConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.fpn_levels != 2 {
            return Err(Error::Config(format!("fpn_levels = {} is not supported (only 2)", self.fpn_levels)));
        }
        for s in &self.stages {
            s.validate()?;
        }
        let c = self.stages[0].channels;
        if self.stages.iter().any(|s| s.channels != c) {
            return Err(Error::Config("all stages must share one channel width".into()));
        }
        if self.stages.windows(2).any(|w| w[1].window[2] > w[0].window[2]) {
            return Err(Error::Config("stage window Z extents must be non-increasing".into()));
        }
        if self.trailing_factor.contains(&0) {
            return Err(Error::Config("trailing factor must be ≥ 1".into()));
        }
        if self.cell.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Config(format!("cell sizes must be positive: {:?}", self.cell)));
        }
        self.bounds.validate()?;
        self.ssm.validate()
    }

    pub fn channels(&self) -> usize {
        self.stages[0].channels
    }

    pub fn grid_extent(&self) -> [usize; 3] {
        self.bounds.grid_extent(self.cell)
    }

    /// Applies the same setting to every stage.
    pub fn set_wsf(&mut self, on: bool) {
        self.stages.iter_mut().for_each(|s| s.wsf = on);
    }

    pub fn set_awf(&mut self, parts: AwfParts) {
        self.stages.iter_mut().for_each(|s| s.awf = parts);
    }

    pub fn set_channels(&mut self, c: usize) {
        self.stages.iter_mut().for_each(|s| s.channels = c);
    }
}

/// Auxiliary-path window from the main path's window and both paths'
/// strides: `ws_aux = ws_main · fs_main / fs_aux`, exact per axis.
pub fn wsa_window(fs_main: [usize; 3], fs_aux: [usize; 3], ws_main: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let (m, x) = (fs_main[a], fs_aux[a]);
        if m == 0 || x == 0 {
            return Err(Error::contract("strides must be positive"));
        }
        if m % x != 0 && x % m != 0 {
            return Err(Error::contract(format!("strides {m} and {x} are not commensurate")));
        }
        let num = ws_main[a] * m;
        if num % x != 0 {
            return Err(Error::contract(format!(
                "window {} × stride {m} is not divisible by stride {x}",
                ws_main[a]
            )));
        }
        out[a] = num / x;
    }
    Ok(out)
}
