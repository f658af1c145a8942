//! Reference selective state-space (Mamba) block.
//!
//! `x, g = split(in_proj(rms(s)))`, `x = silu(conv(x))` with a causal depthwise
//! convolution, `Δ = softplus(dt_proj(x) + bias)`, `B, C` projected from `x`,
//! `y = scan(x, Δ, A, B, C, D)`, `out = out_proj(y ⊙ silu(g)) + s`.
//!
//! The scan recurrence per inner channel `d` is
//! `h_t = exp(Δ_t·A_d) ⊙ h_{t−1} + Δ_t·B_t·u_t`, `y_t = ⟨C_t, h_t⟩ + D_d·u_t`
//! with `h_0 = 0`. [`selective_scan`] evaluates it sequentially and is the
//! reference; [`selective_scan_blocked`] evaluates the same recurrence as a
//! chunked prefix composition.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Array, CustomOp, Linear, Params, Tape, Var};

/// Borrowed scan operands, all row-major.
///
/// `u`, `delta`: `len × channels`; `a`: `channels × state`; `b`, `c`:
/// `len × state`; `d`: `channels`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (l, dch, n) = (self.len, self.channels, self.state);
        let sizes = [
            (self.u.len(), l * dch, "u"),
            (self.delta.len(), l * dch, "delta"),
            (self.a.len(), dch * n, "A"),
            (self.b.len(), l * n, "B"),
            (self.c.len(), l * n, "C"),
            (self.d.len(), dch, "D"),
        ];
        for (got, want, what) in sizes {
            if got != want {
                return Err(Error::dim("selective_scan", format!("{what} has {got} values, expected {want}")));
            }
        }
        if let Some(bad) = self.delta.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::contract(format!("scan step Δ must be positive, got {bad}")));
        }
        Ok(())
    }
}

/// Sequential recurrence over time, one channel at a time.
pub fn selective_scan(inp: &ScanInputs<'_>) -> Result<Vec<f64>> {
    inp.validate()?;
    let (l, dch, n) = (inp.len, inp.channels, inp.state);
    let mut y = vec![0.0; l * dch];
    let mut h = vec![0.0; n];
    for d in 0..dch {
        h.iter_mut().for_each(|v| *v = 0.0);
        let a = &inp.a[d * n..(d + 1) * n];
        for t in 0..l {
            let dt = inp.delta[t * dch + d];
            let u = inp.u[t * dch + d];
            let b = &inp.b[t * n..(t + 1) * n];
            let c = &inp.c[t * n..(t + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                h[s] = (dt * a[s]).exp() * h[s] + dt * b[s] * u;
                acc += c[s] * h[s];
            }
            y[t * dch + d] = acc + inp.d[d] * u;
        }
    }
    Ok(y)
}

/// The same recurrence evaluated chunk-wise: each chunk is first scanned
/// from a zero state while accumulating the product of its decay factors,
/// chunk carries are then composed with the associative rule
/// `(a₁, b₁)∘(a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`, and a final pass adds the
/// decayed carry into every position. Channels run in parallel.
pub fn selective_scan_blocked(inp: &ScanInputs<'_>, chunk: usize) -> Result<Vec<f64>> {
    inp.validate()?;
    let chunk = chunk.max(1);
    let (l, dch, n) = (inp.len, inp.channels, inp.state);
    let per_channel: Vec<Vec<f64>> = (0..dch)
        .into_par_iter()
        .map(|d| {
            let a = &inp.a[d * n..(d + 1) * n];
            let n_chunks = l.div_ceil(chunk);
            // local states from zero, and cumulative decay within the chunk
            let mut local = vec![0.0; l * n];
            let mut decay = vec![0.0; l * n];
            for k in 0..n_chunks {
                let (lo, hi) = (k * chunk, ((k + 1) * chunk).min(l));
                for t in lo..hi {
                    let dt = inp.delta[t * dch + d];
                    let u = inp.u[t * dch + d];
                    for s in 0..n {
                        let at = (dt * a[s]).exp();
                        let bt = dt * inp.b[t * n + s] * u;
                        let (prev_h, prev_a) = if t == lo {
                            (0.0, 1.0)
                        } else {
                            (local[(t - 1) * n + s], decay[(t - 1) * n + s])
                        };
                        local[t * n + s] = at * prev_h + bt;
                        decay[t * n + s] = at * prev_a;
                    }
                }
            }
            // carries entering each chunk
            let mut carry = vec![0.0; n_chunks * n];
            for k in 1..n_chunks {
                let end = k * chunk - 1;
                for s in 0..n {
                    carry[k * n + s] = decay[end * n + s] * carry[(k - 1) * n + s] + local[end * n + s];
                }
            }
            let mut y = vec![0.0; l];
            for t in 0..l {
                let k = t / chunk;
                let u = inp.u[t * dch + d];
                let mut acc = 0.0;
                for s in 0..n {
                    let h = local[t * n + s] + decay[t * n + s] * carry[k * n + s];
                    acc += inp.c[t * n + s] * h;
                }
                y[t] = acc + inp.d[d] * u;
            }
            y
        })
        .collect();
    let mut y = vec![0.0; l * dch];
    for (d, col) in per_channel.into_iter().enumerate() {
        for t in 0..l {
            y[t * dch + d] = col[t];
        }
    }
    Ok(y)
}

/// Causal depthwise convolution: `y[t,d] = b[d] + Σ_k w[d,k]·x[t−K+1+k, d]`
/// with zero left padding.
pub fn causal_conv(x: &[f64], w: &[f64], b: &[f64], len: usize, channels: usize, kernel: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        for d in 0..channels {
            let mut acc = b[d];
            for k in 0..kernel {
                let src = t as isize - (kernel as isize - 1) + k as isize;
                if src >= 0 {
                    acc += w[d * kernel + k] * x[src as usize * channels + d];
                }
            }
            y[t * channels + d] = acc;
        }
    }
    y
}

struct ConvOp {
    kernel: usize,
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, dch, k) = (x.rows(), x.cols(), self.kernel);
        let g = grad.data();
        let mut gx = Array::zeros(x.shape());
        let mut gw = Array::zeros(w.shape());
        let mut gb = Array::zeros(inputs[2].shape());
        for t in 0..l {
            for d in 0..dch {
                let gv = g[t * dch + d];
                gb.data_mut()[d] += gv;
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        let src = src as usize;
                        gx.data_mut()[src * dch + d] += gv * w.data()[d * k + j];
                        gw.data_mut()[d * k + j] += gv * x.data()[src * dch + d];
                    }
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// Epsilon inside the row-wise RMS normalization.
pub const RMS_EPS: f64 = 1e-5;

/// `y[i,j] = g[j] · x[i,j] / sqrt(mean_j x[i,j]² + ε)`, row by row.
pub fn rms_norm(x: &[f64], g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / cols as f64 + RMS_EPS).sqrt();
        for j in 0..cols {
            y[i * cols + j] = g[j] * row[j] * r;
        }
    }
    y
}

struct RmsNormOp;

impl CustomOp for RmsNormOp {
    fn name(&self) -> &'static str {
        "rms_norm"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (x, g) = (inputs[0], inputs[1]);
        let (n, c) = (x.rows(), x.cols());
        let (xd, gd, dy) = (x.data(), g.data(), grad.data());
        let mut gx = Array::zeros(x.shape());
        let mut gg = Array::zeros(g.shape());
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / c as f64 + RMS_EPS).sqrt();
            let mut dot = 0.0;
            for j in 0..c {
                dot += gd[j] * dy[i * c + j] * row[j];
                gg.data_mut()[j] += dy[i * c + j] * row[j] * r;
            }
            for j in 0..c {
                gx.data_mut()[i * c + j] = r * gd[j] * dy[i * c + j] - r * r * r * row[j] * dot / c as f64;
            }
        }
        vec![Some(gx), Some(gg)]
    }
}

/// Appends a row-wise RMS normalization to the tape.
pub fn rms_norm_on_tape(tape: &mut Tape, x: Var, g: Var) -> Result<Var> {
    let (xv, gv) = (tape.value(x), tape.value(g));
    let (n, c) = (xv.rows(), xv.cols());
    if gv.len() != c {
        return Err(Error::dim("rms_norm", format!("scale has {} entries for {c} columns", gv.len())));
    }
    let y = rms_norm(xv.data(), gv.data(), n, c);
    tape.custom(&[x, g], Array::matrix(n, c, y)?, Box::new(RmsNormOp))
}

struct ScanOp;

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let [u, delta, a, b, c, dskip] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]];
        let (l, dch, n) = (u.rows(), u.cols(), a.cols());
        let (ud, dd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), c.data());
        let g = grad.data();
        let mut gu = vec![0.0; l * dch];
        let mut gdelta = vec![0.0; l * dch];
        let mut ga = vec![0.0; dch * n];
        let mut gb = vec![0.0; l * n];
        let mut gc = vec![0.0; l * n];
        let mut gd = vec![0.0; dch];
        let mut states = vec![0.0; l * n];
        let mut dh = vec![0.0; n];
        for d in 0..dch {
            let ar = &ad[d * n..(d + 1) * n];
            let mut h = vec![0.0; n];
            for t in 0..l {
                let (dt, uv) = (dd[t * dch + d], ud[t * dch + d]);
                for s in 0..n {
                    h[s] = (dt * ar[s]).exp() * h[s] + dt * bd[t * n + s] * uv;
                }
                states[t * n..(t + 1) * n].copy_from_slice(&h);
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..l).rev() {
                let (dt, uv) = (dd[t * dch + d], ud[t * dch + d]);
                let gy = g[t * dch + d];
                gd[d] += gy * uv;
                gu[t * dch + d] += gy * dskip.data()[d];
                let mut g_dt = 0.0;
                let mut g_u = 0.0;
                for s in 0..n {
                    dh[s] += gy * cd[t * n + s];
                    gc[t * n + s] += gy * states[t * n + s];
                    let decay = (dt * ar[s]).exp();
                    let prev = if t > 0 { states[(t - 1) * n + s] } else { 0.0 };
                    g_dt += dh[s] * (decay * ar[s] * prev + bd[t * n + s] * uv);
                    ga[d * n + s] += dh[s] * decay * dt * prev;
                    gb[t * n + s] += dh[s] * dt * uv;
                    g_u += dh[s] * dt * bd[t * n + s];
                    dh[s] *= decay;
                }
                gdelta[t * dch + d] += g_dt;
                gu[t * dch + d] += g_u;
            }
        }
        let mk = |shape: &[usize], v: Vec<f64>| Some(Array::from_vec(shape, v).expect("shape"));
        vec![
            mk(u.shape(), gu),
            mk(delta.shape(), gdelta),
            mk(a.shape(), ga),
            mk(b.shape(), gb),
            mk(c.shape(), gc),
            mk(dskip.shape(), gd),
        ]
    }
}

/// Appends a causal depthwise convolution to the tape.
pub fn conv_on_tape(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    let (l, dch) = (xv.rows(), xv.cols());
    if wv.rows() != dch || bv.len() != dch {
        return Err(Error::dim("causal_conv", "kernel/bias channels differ from input"));
    }
    let k = wv.cols();
    let y = causal_conv(xv.data(), wv.data(), bv.data(), l, dch, k);
    tape.custom(&[x, w, b], Array::matrix(l, dch, y)?, Box::new(ConvOp { kernel: k }))
}

/// Appends a selective scan to the tape (sequential evaluation).
pub fn scan_on_tape(tape: &mut Tape, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let (l, dch) = (tape.value(u).rows(), tape.value(u).cols());
    let n = tape.value(a).cols();
    let y = selective_scan(&ScanInputs {
        u: tape.value(u).data(),
        delta: tape.value(delta).data(),
        a: tape.value(a).data(),
        b: tape.value(b).data(),
        c: tape.value(c).data(),
        d: tape.value(d).data(),
        len: l,
        channels: dch,
        state: n,
    })?;
    tape.custom(&[u, delta, a, b, c, d], Array::matrix(l, dch, y)?, Box::new(ScanOp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub expand: usize,
    pub d_state: usize,
    pub d_conv: usize,
    /// Rank of the Δ projection; `None` means `ceil(C / 16)`.
    pub dt_rank: Option<usize>,
    pub bidirectional: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            expand: 2,
            d_state: 16,
            d_conv: 4,
            dt_rank: None,
            bidirectional: false,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expand == 0 || self.d_state == 0 || self.d_conv == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config(format!("ssm sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Convolution and scan parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub conv_weight: String,
    pub conv_bias: String,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: String,
    pub skip: String,
}

impl ScanBranch {
    fn new(prefix: &str, inner: usize, rank: usize, state: usize) -> Self {
        Self {
            conv_weight: format!("{prefix}.conv.weight"),
            conv_bias: format!("{prefix}.conv.bias"),
            x_proj: Linear::without_bias(&format!("{prefix}.x_proj"), inner, rank + 2 * state),
            dt_proj: Linear::new(&format!("{prefix}.dt_proj"), rank, inner),
            a_log: format!("{prefix}.a_log"),
            skip: format!("{prefix}.d"),
        }
    }

    fn init<R: Rng>(&self, params: &mut Params, rng: &mut R, inner: usize, state: usize, kernel: usize) -> Result<()> {
        params.init_uniform(&self.conv_weight, &[inner, kernel], kernel, rng)?;
        params.insert(self.conv_bias.clone(), Array::zeros(&[inner]))?;
        self.x_proj.init(params, rng)?;
        self.dt_proj.init(params, rng)?;
        // Δ bias: inverse softplus of a step drawn log-uniformly in [1e-2, 1e-1]
        let bias = params.get_mut(self.dt_proj.bias.as_ref().unwrap()).unwrap();
        for v in bias.data_mut() {
            let dt: f64 = (rng.gen_range((1e-2f64).ln()..(1e-1f64).ln())).exp();
            *v = dt + (-(-dt).exp_m1()).ln();
        }
        let a_log = (0..inner).flat_map(|_| (1..=state).map(|s| (s as f64).ln())).collect();
        params.insert(self.a_log.clone(), Array::matrix(inner, state, a_log)?)?;
        params.insert(self.skip.clone(), Array::full(&[inner], 1.0))?;
        Ok(())
    }

    /// conv → silu → scan on an `L × inner` input.
    fn forward(&self, tape: &mut Tape, params: &Params, x: Var, rank: usize, state: usize) -> Result<Var> {
        let w = tape.param(params, &self.conv_weight)?;
        let b = tape.param(params, &self.conv_bias)?;
        let xc = conv_on_tape(tape, x, w, b)?;
        let xa = tape.activation(xc, Activation::Silu)?;
        let proj = self.x_proj.forward(tape, params, xa)?;
        let dt_in = tape.slice_cols(proj, 0, rank)?;
        let bmat = tape.slice_cols(proj, rank, rank + state)?;
        let cmat = tape.slice_cols(proj, rank + state, rank + 2 * state)?;
        let dt = self.dt_proj.forward(tape, params, dt_in)?;
        let dt = tape.activation(dt, Activation::Softplus)?;
        let a_log = tape.param(params, &self.a_log)?;
        let a = tape.activation(a_log, Activation::Exp)?;
        let a = tape.scale(a, -1.0)?;
        let dskip = tape.param(params, &self.skip)?;
        scan_on_tape(tape, xa, dt, a, bmat, cmat, dskip)
    }
}

/// Gated selective state-space block with a residual connection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub prefix: String,
    pub channels: usize,
    pub inner: usize,
    pub rank: usize,
    pub state: usize,
    pub kernel: usize,
    pub norm_scale: String,
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub forward_branch: ScanBranch,
    pub reverse_branch: Option<ScanBranch>,
}

impl MambaBlock {
    pub fn new(prefix: &str, channels: usize, cfg: &SsmConfig) -> Self {
        let inner = cfg.expand * channels;
        let rank = cfg.dt_rank.unwrap_or_else(|| channels.div_ceil(16));
        Self {
            prefix: prefix.to_string(),
            channels,
            inner,
            rank,
            state: cfg.d_state,
            kernel: cfg.d_conv,
            norm_scale: format!("{prefix}.norm.scale"),
            in_proj: Linear::without_bias(&format!("{prefix}.in_proj"), channels, 2 * inner),
            out_proj: Linear::without_bias(&format!("{prefix}.out_proj"), inner, channels),
            forward_branch: ScanBranch::new(prefix, inner, rank, cfg.d_state),
            reverse_branch: cfg
                .bidirectional
                .then(|| ScanBranch::new(&format!("{prefix}.rev"), inner, rank, cfg.d_state)),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        params.insert(self.norm_scale.clone(), Array::full(&[self.channels], 1.0))?;
        self.in_proj.init(params, rng)?;
        self.forward_branch.init(params, rng, self.inner, self.state, self.kernel)?;
        if let Some(rev) = &self.reverse_branch {
            rev.init(params, rng, self.inner, self.state, self.kernel)?;
        }
        self.out_proj.init(params, rng)
    }

    /// `L × C → L × C`. An empty sequence is returned unchanged.
    pub fn forward(&self, tape: &mut Tape, params: &Params, seq: Var) -> Result<Var> {
        let (l, c) = (tape.value(seq).rows(), tape.value(seq).cols());
        if c != self.channels {
            return Err(Error::dim("mamba_block", format!("{c} channels, block expects {}", self.channels)));
        }
        if l == 0 {
            return Ok(seq);
        }
        let g = tape.param(params, &self.norm_scale)?;
        let normed = rms_norm_on_tape(tape, seq, g)?;
        let xz = self.in_proj.forward(tape, params, normed)?;
        let x = tape.slice_cols(xz, 0, self.inner)?;
        let gate = tape.slice_cols(xz, self.inner, 2 * self.inner)?;
        let mut y = self.forward_branch.forward(tape, params, x, self.rank, self.state)?;
        if let Some(rev) = &self.reverse_branch {
            let flip: Vec<usize> = (0..l).rev().collect();
            let xr = tape.gather_rows(x, &flip)?;
            let yr = rev.forward(tape, params, xr, self.rank, self.state)?;
            let yr = tape.gather_rows(yr, &flip)?;
            y = tape.add(y, yr)?;
        }
        let gate = tape.activation(gate, Activation::Silu)?;
        let y = tape.mul(y, gate)?;
        let out = self.out_proj.forward(tape, params, y)?;
        tape.add(out, seq)
    }

    /// Zeroes the output projection, making the block an identity map.
    pub fn zero_output(&self, params: &mut Params) {
        if let Some(w) = params.get_mut(&self.out_proj.weight) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
