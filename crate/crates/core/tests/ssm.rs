use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winmamba_core::numerics::{grad_check, Array, GradCheckOptions, Params, Tape};
use winmamba_core::ssm::*;

struct Owned {
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    len: usize,
    channels: usize,
    state: usize,
}

impl Owned {
    fn random(rng: &mut ChaCha8Rng, len: usize, channels: usize, state: usize) -> Self {
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        Self {
            u: v(len * channels, -1.0, 1.0),
            delta: v(len * channels, 0.01, 0.5),
            a: v(channels * state, -2.0, -0.1),
            b: v(len * state, -1.0, 1.0),
            c: v(len * state, -1.0, 1.0),
            d: v(channels, -1.0, 1.0),
            len,
            channels,
            state,
        }
    }

    fn view(&self) -> ScanInputs<'_> {
        ScanInputs {
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d: &self.d,
            len: self.len,
            channels: self.channels,
            state: self.state,
        }
    }

    fn truncated(&self, len: usize) -> Self {
        let (dc, n) = (self.channels, self.state);
        Self {
            u: self.u[..len * dc].to_vec(),
            delta: self.delta[..len * dc].to_vec(),
            a: self.a.clone(),
            b: self.b[..len * n].to_vec(),
            c: self.c[..len * n].to_vec(),
            d: self.d.clone(),
            len,
            channels: dc,
            state: n,
        }
    }
}

#[test]
fn blocked_scan_matches_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..30 {
        let len = rng.gen_range(1..90);
        let (ch, st) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let inp = Owned::random(&mut rng, len, ch, st);
        let reference = selective_scan(&inp.view()).unwrap();
        for chunk in [1, 3, 8, 64] {
            let blocked = selective_scan_blocked(&inp.view(), chunk).unwrap();
            let err = reference.iter().zip(&blocked).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10, "case {case} chunk {chunk}: {err}");
        }
    }
}

#[test]
fn non_positive_step_is_a_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inp = Owned::random(&mut rng, 4, 2, 2);
    inp.delta[3] = 0.0;
    assert!(selective_scan(&inp.view()).is_err());
}

#[test]
fn empty_sequence_scans_to_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inp = Owned::random(&mut rng, 0, 3, 4);
    assert!(selective_scan(&inp.view()).unwrap().is_empty());
    assert!(selective_scan_blocked(&inp.view(), 4).unwrap().is_empty());
}

proptest! {
    #[test]
    fn output_ignores_future_inputs(seed in any::<u64>(), len in 2usize..40, t in 0usize..39) {
        let t = t % (len - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = Owned::random(&mut rng, len, 3, 4);
        let y = selective_scan(&inp.view()).unwrap();
        let mut changed = inp.truncated(len);
        for s in (t + 1)..len {
            for d in 0..3 {
                changed.u[s * 3 + d] += 5.0;
                changed.delta[s * 3 + d] *= 2.0;
            }
            for k in 0..4 {
                changed.b[s * 4 + k] -= 1.0;
                changed.c[s * 4 + k] += 1.0;
            }
        }
        let y2 = selective_scan(&changed.view()).unwrap();
        prop_assert_eq!(&y[..(t + 1) * 3], &y2[..(t + 1) * 3]);
    }

    #[test]
    fn prefix_scan_is_a_prefix(seed in any::<u64>(), len in 1usize..40, cut in 0usize..40) {
        let cut = cut % (len + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = Owned::random(&mut rng, len, 2, 3);
        let y = selective_scan(&inp.view()).unwrap();
        let yp = selective_scan(&inp.truncated(cut).view()).unwrap();
        prop_assert_eq!(&y[..cut * 2], &yp[..]);
    }
}

fn block_with_params(seed: u64, channels: usize, cfg: &SsmConfig) -> (MambaBlock, Params) {
    let block = MambaBlock::new("m", channels, cfg);
    let mut params = Params::default();
    block.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // move away from the structured init so every weight matters
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    let names: Vec<String> = params.trainable().keys().cloned().collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    (block, params)
}

fn get<'a>(p: &'a Params, name: &str) -> &'a [f64] {
    p.get(name).unwrap().data()
}

/// `x (rows × k) · w (k × m)` with loops.
fn mm(x: &[f64], w: &[f64], rows: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * m];
    for i in 0..rows {
        for j in 0..m {
            for t in 0..k {
                y[i * m + j] += x[i * k + t] * w[t * m + j];
            }
        }
    }
    y
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Straight-line evaluation of the block from its parameters.
fn oracle(p: &Params, s: &[f64], l: usize, c: usize, cfg: &SsmConfig) -> Vec<f64> {
    let e = cfg.expand * c;
    let r = c.div_ceil(16);
    let n = cfg.d_state;
    let k = cfg.d_conv;
    let g = get(p, "m.norm.scale");
    let mut normed = vec![0.0; l * c];
    for i in 0..l {
        let ms: f64 = (0..c).map(|j| s[i * c + j].powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            normed[i * c + j] = g[j] * s[i * c + j] / (ms + 1e-5).sqrt();
        }
    }
    let xz = mm(&normed, get(p, "m.in_proj.weight"), l, c, 2 * e);
    let mut x = vec![0.0; l * e];
    let mut z = vec![0.0; l * e];
    for i in 0..l {
        for j in 0..e {
            x[i * e + j] = xz[i * 2 * e + j];
            z[i * 2 * e - i * e + j] = xz[i * 2 * e + e + j];
        }
    }
    let (cw, cb) = (get(p, "m.conv.weight"), get(p, "m.conv.bias"));
    let mut xa = vec![0.0; l * e];
    for t in 0..l {
        for d in 0..e {
            let mut acc = cb[d];
            for j in 0..k {
                if t + j + 1 >= k {
                    acc += cw[d * k + j] * x[(t + j + 1 - k) * e + d];
                }
            }
            xa[t * e + d] = silu(acc);
        }
    }
    let proj = mm(&xa, get(p, "m.x_proj.weight"), l, e, r + 2 * n);
    let (dw, db) = (get(p, "m.dt_proj.weight"), get(p, "m.dt_proj.bias"));
    let (alog, dd) = (get(p, "m.a_log"), get(p, "m.d"));
    let mut y = vec![0.0; l * e];
    for d in 0..e {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let mut pre = db[d];
            for q in 0..r {
                pre += proj[t * (r + 2 * n) + q] * dw[q * e + d];
            }
            let dt = (1.0 + pre.exp()).ln();
            let u = xa[t * e + d];
            let mut acc = 0.0;
            for s_ in 0..n {
                let a = -alog[d * n + s_].exp();
                let b = proj[t * (r + 2 * n) + r + s_];
                let cc = proj[t * (r + 2 * n) + r + n + s_];
                h[s_] = (dt * a).exp() * h[s_] + dt * b * u;
                acc += cc * h[s_];
            }
            y[t * e + d] = (acc + dd[d] * u) * silu(z[t * e + d]);
        }
    }
    let out = mm(&y, get(p, "m.out_proj.weight"), l, e, c);
    out.iter().zip(s).map(|(o, s)| o + s).collect()
}

#[test]
fn block_matches_straight_line_oracle() {
    let (l, c) = (16, 8);
    let cfg = SsmConfig::default();
    for seed in 0..3 {
        let (block, params) = block_with_params(seed, c, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let s: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.input(Array::matrix(l, c, s.clone()).unwrap()).unwrap();
        let y = block.forward(&mut tape, &params, x).unwrap();
        let want = oracle(&params, &s, l, c, &cfg);
        let err = tape.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn block_is_causal() {
    let (l, c) = (12, 4);
    let (block, params) = block_with_params(5, c, &SsmConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s2 = s.clone();
    for v in &mut s2[7 * c..] {
        *v += 3.0;
    }
    let run = |data: Vec<f64>| {
        let mut tape = Tape::detached();
        let x = tape.input(Array::matrix(l, c, data).unwrap()).unwrap();
        let y = block.forward(&mut tape, &params, x).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(s)[..7 * c], run(s2)[..7 * c]);
}

#[test]
fn zero_output_projection_is_identity() {
    let (block, mut params) = block_with_params(1, 4, &SsmConfig::default());
    block.zero_output(&mut params);
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 - 1.0).collect();
    let x = tape.input(Array::matrix(5, 4, data.clone()).unwrap()).unwrap();
    let y = block.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn empty_sequence_passes_through() {
    let (block, params) = block_with_params(1, 4, &SsmConfig::default());
    let mut tape = Tape::new();
    let x = tape.input(Array::zeros(&[0, 4])).unwrap();
    let y = block.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.value(y).rows(), 0);
}

#[test]
fn block_gradients_match_finite_differences() {
    for bidirectional in [false, true] {
        let cfg = SsmConfig {
            d_state: 4,
            bidirectional,
            ..SsmConfig::default()
        };
        let (block, params) = block_with_params(3, 4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Array::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let weights: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            |tape: &mut Tape, p: &Params| {
                let x = tape.input(input.clone())?;
                let y = block.forward(tape, p, x)?;
                tape.weighted_sum(y, &weights)
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "bidirectional {bidirectional}: {}", report.max_rel_err);
    }
}

#[test]
fn rms_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = Params::default();
    params.insert("x", Array::matrix(5, 3, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()).unwrap();
    params.insert("g", Array::vector((0..3).map(|_| rng.gen_range(0.5..1.5)).collect())).unwrap();
    let weights: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        |tape: &mut Tape, p: &Params| {
            let x = tape.param(p, "x")?;
            let g = tape.param(p, "g")?;
            let y = rms_norm_on_tape(tape, x, g)?;
            tape.weighted_sum(y, &weights)
        },
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.pass, "{}", report.max_rel_err);
}

#[test]
fn conv_matches_explicit_sum() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = causal_conv(&x, &[0.5, -1.0, 2.0], &[0.25], 4, 1, 3);
    assert_eq!(y, vec![0.25 + 2.0, 0.25 - 1.0 + 4.0, 0.25 + 0.5 - 2.0 + 6.0, 0.25 + 1.0 - 3.0 + 8.0]);
}
