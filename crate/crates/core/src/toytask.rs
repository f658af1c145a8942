//! Synthetic foreground segmentation task.
//!
//! Scenes are axis-aligned boxes sampled densely inside a sparse cloud of
//! uniform clutter. The backbone's last-stage voxels are classified as
//! object or background by a normalized linear head trained with
//! per-voxel binary cross-entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Array, BatchNorm, Linear, Mode, Params, StatUpdate, Tape};
use crate::voxelgrid::{point_coord, Bounds, Coord, PointCloud};
use crate::winmamba::{AwfParts, Backbone, BackboneConfig, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBox {
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl ToyBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= 0.5 * self.extent[a])
    }

    pub fn min(&self, a: usize) -> f64 {
        self.center[a] - 0.5 * self.extent[a]
    }

    pub fn max(&self, a: usize) -> f64 {
        self.center[a] + 0.5 * self.extent[a]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub noise_points: usize,
    /// Centre every box on an unshifted window boundary line.
    pub boundary: bool,
    /// Spacing of window boundary lines along X and Y, in metres.
    pub line_spacing: [f64; 2],
    pub bounds: Bounds,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let cfg = ToyConfig::default();
        cfg.scene_config()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    /// Per point: inside at least one box.
    pub labels: Vec<bool>,
    pub boxes: Vec<ToyBox>,
    pub seed: u64,
}

fn sample_extent(rng: &mut ChaCha8Rng, bounds: &Bounds) -> [f64; 3] {
    let span: [f64; 3] = std::array::from_fn(|a| bounds.max[a] - bounds.min[a]);
    [
        rng.gen_range(1.6..3.2f64).min(0.5 * span[0]),
        rng.gen_range(1.6..3.2f64).min(0.5 * span[1]),
        rng.gen_range(0.6..1.4f64).min(span[2]),
    ]
}

/// Interior boundary lines `min + k·spacing` with room for a box of
/// half-width `half` on both sides.
fn boundary_lines(lo: f64, hi: f64, spacing: f64, half: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 1;
    loop {
        let x = lo + k as f64 * spacing;
        if x >= hi {
            break;
        }
        if x - half >= lo && x + half < hi {
            out.push(x);
        }
        k += 1;
    }
    out
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.bounds.validate()?;
    let b = &cfg.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let extent = sample_extent(&mut rng, b);
        let mut center = [0.0; 3];
        for a in 0..2 {
            let half = 0.5 * extent[a];
            center[a] = rng.gen_range(b.min[a] + half..b.max[a] - half);
        }
        center[2] = b.min[2] + 0.5 * extent[2];
        if cfg.boundary {
            let axis = rng.gen_range(0..2usize);
            let lines = boundary_lines(b.min[axis], b.max[axis], cfg.line_spacing[axis], 0.5 * extent[axis]);
            let line = lines.choose(&mut rng).ok_or_else(|| {
                Error::Config(format!("no window boundary fits a box along axis {axis}; bounds too small"))
            })?;
            center[axis] = *line;
        }
        boxes.push(ToyBox { center, extent });
    }
    let mut positions = Vec::new();
    let mut extras = Vec::new();
    for bx in &boxes {
        for _ in 0..cfg.points_per_object {
            let p: [f64; 3] = std::array::from_fn(|a| {
                let lo = bx.min(a).max(b.min[a]);
                let hi = bx.max(a).min(b.max[a]);
                rng.gen_range(lo..hi)
            });
            positions.push(p);
            extras.push(rng.gen_range(0.35..0.85));
        }
    }
    for _ in 0..cfg.noise_points {
        let p: [f64; 3] = std::array::from_fn(|a| rng.gen_range(b.min[a]..b.max[a]));
        positions.push(p);
        extras.push(rng.gen_range(0.15..0.65));
    }
    let labels = positions.iter().map(|p| boxes.iter().any(|bx| bx.contains(p))).collect();
    let cloud = PointCloud::new(positions, extras, 1, *b)?;
    Ok(SyntheticScene {
        cloud,
        labels,
        boxes,
        seed,
    })
}

/// Labels of the voxels at `stride` (base voxels grouped by integer
/// division): majority of member points, ties count as object. Returned in
/// lexicographic coordinate order.
pub fn voxel_labels(scene: &SyntheticScene, cell: [f64; 3], stride: [usize; 3]) -> (Vec<Coord>, Vec<bool>) {
    let mut votes: BTreeMap<Coord, (usize, usize)> = BTreeMap::new();
    for (p, &lab) in scene.cloud.positions.iter().zip(&scene.labels) {
        let c = point_coord(p, &scene.cloud.bounds, cell);
        let k = [c[0] / stride[0] as u32, c[1] / stride[1] as u32, c[2] / stride[2] as u32];
        let e = votes.entry(k).or_default();
        if lab {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    votes.into_iter().map(|(c, (obj, bg))| (c, obj >= bg)).unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub backbone: BackboneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_objects: usize,
    pub points_per_object: usize,
    pub noise_points: usize,
    pub boundary: bool,
    /// Stop once an epoch's training accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let mut backbone = BackboneConfig {
            stages: [[13, 13, 4], [13, 13, 2]]
                .iter()
                .map(|w| StageConfig {
                    window: *w,
                    channels: 16,
                    ..StageConfig::default()
                })
                .collect(),
            cell: [0.4, 0.4, 0.4],
            bounds: Bounds {
                min: [0.0, 0.0, 0.0],
                max: [20.8, 20.8, 1.6],
            },
            ..BackboneConfig::default()
        };
        backbone.ssm.d_state = 8;
        Self {
            backbone,
            train_scenes: 32,
            val_scenes: 8,
            epochs: 200,
            batch_size: 4,
            lr: AdamConfig::default().lr,
            seed: 0,
            n_objects: 3,
            points_per_object: 80,
            noise_points: 60,
            boundary: true,
            stop_at_accuracy: None,
        }
    }
}

impl ToyConfig {
    /// The reduced budget used for seeded ablation sweeps.
    pub fn ablation_default() -> Self {
        let mut cfg = Self {
            train_scenes: 8,
            val_scenes: 4,
            epochs: 30,
            ..Self::default()
        };
        cfg.backbone.set_channels(8);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.train_scenes == 0 || self.batch_size == 0 {
            return Err(Error::Config("train_scenes and batch_size must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// Physical spacing of the first stage's unshifted window boundaries:
    /// the main window runs one in-block downsample below the input.
    pub fn line_spacing(&self) -> [f64; 2] {
        let s = &self.backbone.stages[0];
        let c = self.backbone.cell;
        [(s.window[0] * s.factor) as f64 * c[0], (s.window[1] * s.factor) as f64 * c[1]]
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            n_objects: self.n_objects,
            points_per_object: self.points_per_object,
            noise_points: self.noise_points,
            boundary: self.boundary,
            line_spacing: self.line_spacing(),
            bounds: self.backbone.bounds,
        }
    }

    /// Stride of the backbone's last stage relative to base voxels.
    pub fn final_stride(&self) -> [usize; 3] {
        let t = self.backbone.trailing_factor;
        let n = self.backbone.stages.len() as u32;
        std::array::from_fn(|a| t[a].pow(n))
    }

    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn val_seed(&self, i: usize) -> u64 {
        self.train_seed(i).wrapping_add(500_000)
    }
}

/// `BN → Linear(C → 1)` producing one logit per voxel.
#[derive(Clone, Debug)]
pub struct ToyHead {
    pub bn: BatchNorm,
    pub fc: Linear,
}

impl ToyHead {
    pub fn new(channels: usize) -> Self {
        Self {
            bn: BatchNorm::new("head.bn", channels),
            fc: Linear::new("head.fc", channels, 1),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        self.bn.init(params)?;
        self.fc.init(params, rng)
    }
}

/// A scene with the labels of its last-stage voxels.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: SyntheticScene,
    pub coords: Vec<Coord>,
    pub targets: Vec<f64>,
}

pub fn prepare_scene(cfg: &ToyConfig, seed: u64) -> Result<PreparedScene> {
    let scene = gen_scene(seed, &cfg.scene_config())?;
    let (coords, labels) = voxel_labels(&scene, cfg.backbone.cell, cfg.final_stride());
    let targets = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    Ok(PreparedScene { scene, coords, targets })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_logits(logits: &[f64], targets: &[f64]) -> Self {
        let mut c = Confusion::default();
        for (z, t) in logits.iter().zip(targets) {
            match (*z >= 0.0, *t >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
            voxels: self.total(),
        }
    }
}

/// Per-voxel metrics at logit threshold 0 (probability 0.5). Precision and
/// recall are 0 when their denominators are empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training metrics accumulated over the epoch's forward passes.
    pub train: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ToyConfig,
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub final_train: Metrics,
    pub validation: Option<Metrics>,
    /// First epoch (1-based) whose training accuracy reached the stop
    /// threshold, if one was set and reached.
    pub reached_at: Option<usize>,
    pub mean_voxels_per_scene: f64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn best_train_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.train.accuracy).fold(0.0, f64::max)
    }

    /// `epoch,loss,accuracy,precision,recall` lines.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,precision,recall\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.loss, e.train.accuracy, e.train.precision, e.train.recall);
        }
        s
    }
}

/// Backbone plus head with the parameters they own.
pub struct ToyModel {
    pub backbone: Backbone,
    pub head: ToyHead,
}

struct SceneResult {
    loss: f64,
    confusion: Confusion,
    grads: Option<BTreeMap<String, Array>>,
    stats: Vec<StatUpdate>,
}

impl ToyModel {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let head = ToyHead::new(cfg.backbone.channels());
        Ok(Self { backbone, head })
    }

    pub fn init_params(&self) -> Result<Params> {
        let mut params = self.backbone.init_params()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.backbone.cfg.seed ^ 0x4ead);
        self.head.init(&mut params, &mut rng)?;
        Ok(params)
    }

    /// Logits for the last-stage voxels, checked against the prepared
    /// coordinate list.
    fn logits(&self, tape: &mut Tape, params: &Params, s: &PreparedScene, mode: Mode) -> Result<crate::numerics::Var> {
        let out = self.backbone.forward_cloud(tape, params, &s.scene.cloud, mode)?;
        let last = out.last();
        if last.coords != s.coords {
            return Err(Error::contract("last-stage voxels differ from the labelled voxel list"));
        }
        let h = self.head.bn.forward(tape, params, last.features, mode)?;
        self.head.fc.forward(tape, params, h)
    }

    fn run_scene(&self, params: &Params, s: &PreparedScene, mode: Mode, with_grad: bool) -> Result<SceneResult> {
        let mut tape = if with_grad { Tape::new() } else { Tape::detached() };
        let z = self.logits(&mut tape, params, s, mode)?;
        let loss = tape.bce_with_logits(z, &s.targets)?;
        let confusion = Confusion::from_logits(tape.value(z).data(), &s.targets);
        let grads = if with_grad {
            Some(tape.backward(loss, params)?.into_params())
        } else {
            None
        };
        Ok(SceneResult {
            loss: tape.value(loss).data()[0],
            confusion,
            grads,
            stats: tape.take_stat_updates(),
        })
    }

    /// Mean loss and pooled metrics in eval mode.
    pub fn evaluate(&self, params: &Params, scenes: &[PreparedScene]) -> Result<(f64, Metrics)> {
        let results: Vec<SceneResult> = scenes
            .par_iter()
            .map(|s| self.run_scene(params, s, Mode::Eval, false))
            .collect::<Result<_>>()?;
        let mut conf = Confusion::default();
        let mut loss = 0.0;
        for r in &results {
            conf.merge(&r.confusion);
            loss += r.loss;
        }
        Ok((loss / scenes.len().max(1) as f64, conf.metrics()))
    }
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains the toy model; scene batches are evaluated in parallel and
/// reduced in scene order, so results do not depend on the thread count.
pub fn train_toy(cfg: &ToyConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut bcfg = cfg.clone();
    bcfg.backbone.seed = cfg.seed;
    let model = ToyModel::new(&bcfg)?;
    let mut params = model.init_params()?;
    let train: Vec<PreparedScene> = (0..cfg.train_scenes)
        .into_par_iter()
        .map(|i| prepare_scene(cfg, cfg.train_seed(i)))
        .collect::<Result<_>>()?;
    let val: Vec<PreparedScene> = (0..cfg.val_scenes)
        .into_par_iter()
        .map(|i| prepare_scene(cfg, cfg.val_seed(i)))
        .collect::<Result<_>>()?;
    let base_voxels: usize = train
        .iter()
        .map(|s| voxel_labels(&s.scene, cfg.backbone.cell, [1, 1, 1]).0.len())
        .sum();
    let mean_voxels = base_voxels as f64 / train.len() as f64;

    let initial: Vec<f64> = train
        .par_iter()
        .map(|s| model.run_scene(&params, s, Mode::Train, false).map(|r| r.loss))
        .collect::<Result<_>>()
        .map_err(|e| divergence(0, e))?;
    let initial_loss = initial.iter().sum::<f64>() / train.len() as f64;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "initial loss is not finite".into(),
        });
    }

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ca1ab1e);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut reached_at = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut conf = Confusion::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SceneResult> = batch
                .par_iter()
                .map(|&i| model.run_scene(&params, &train[i], Mode::Train, true))
                .collect::<Result<_>>()
                .map_err(|e| divergence(epoch, e))?;
            let mut grads: BTreeMap<String, Array> = BTreeMap::new();
            for r in &results {
                loss_sum += r.loss;
                conf.merge(&r.confusion);
                for (k, g) in r.grads.as_ref().expect("recorded") {
                    match grads.get_mut(k) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            grads.insert(k.clone(), g.clone());
                        }
                    }
                }
            }
            let inv = 1.0 / results.len() as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.step(&mut params, &grads)?;
            for r in &results {
                params.apply_stat_updates(&r.stats)?;
            }
        }
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("epoch loss {loss}"),
            });
        }
        let train_metrics = conf.metrics();
        epochs.push(EpochStats {
            epoch,
            loss,
            train: train_metrics,
        });
        if let Some(target) = cfg.stop_at_accuracy {
            if train_metrics.accuracy >= target {
                reached_at = Some(epoch);
                break;
            }
        }
    }
    let final_train = epochs
        .last()
        .map(|e| e.train)
        .unwrap_or_else(|| Confusion::default().metrics());
    let validation = if val.is_empty() {
        None
    } else {
        Some(model.evaluate(&params, &val)?.1)
    };
    Ok(TrainReport {
        config: bcfg,
        initial_loss,
        epochs,
        final_train,
        validation,
        reached_at,
        mean_voxels_per_scene: mean_voxels,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub base: ToyConfig,
    pub wsf: Vec<bool>,
    pub awf: Vec<AwfParts>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: ToyConfig::ablation_default(),
            wsf: vec![false, true],
            awf: vec![AwfParts::abc()],
            seeds: (0..5).collect(),
        }
    }
}

impl AblationConfig {
    /// The AWF part subsets `∅, B, AB, ABC, ABCD`.
    pub fn parts_grid() -> Vec<AwfParts> {
        ["none", "B", "AB", "ABC", "ABCD"].iter().map(|s| s.parse().unwrap()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub wsf: bool,
    pub awf: AwfParts,
    pub seeds: Vec<u64>,
    pub val_accuracy: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: AblationConfig,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, wsf: bool, awf: AwfParts) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.wsf == wsf && c.awf == awf)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<5} {:<6} {:>8} {:>8}\n", "wsf", "awf", "mean", "sd");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<5} {:<6} {:>8.4} {:>8.4}",
                if c.wsf { "on" } else { "off" },
                c.awf.to_string(),
                c.mean,
                c.sd
            );
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Validation accuracy for every `(wsf, awf)` cell over every seed.
pub fn ablate(cfg: &AblationConfig) -> Result<AblationTable> {
    if cfg.wsf.is_empty() || cfg.awf.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one wsf, awf and seed value".into()));
    }
    if cfg.base.val_scenes == 0 {
        return Err(Error::Config("ablation needs validation scenes".into()));
    }
    let mut jobs = Vec::new();
    for &wsf in &cfg.wsf {
        for &awf in &cfg.awf {
            for &seed in &cfg.seeds {
                jobs.push((wsf, awf, seed));
            }
        }
    }
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(wsf, awf, seed)| {
            let mut run = cfg.base.clone();
            run.seed = seed;
            run.backbone.set_wsf(wsf);
            run.backbone.set_awf(awf);
            let report = train_toy(&run)?;
            Ok(report.validation.expect("validation scenes present").accuracy)
        })
        .collect::<Result<_>>()?;
    let per_cell = cfg.seeds.len();
    let cells = accs
        .chunks(per_cell)
        .zip(jobs.chunks(per_cell))
        .map(|(acc, job)| {
            let (mean, sd) = mean_sd(acc);
            AblationCell {
                wsf: job[0].0,
                awf: job[0].1,
                seeds: cfg.seeds.clone(),
                val_accuracy: acc.to_vec(),
                mean,
                sd,
            }
        })
        .collect();
    Ok(AblationTable {
        config: cfg.clone(),
        cells,
    })
}
