//! Finite-difference verification of every analytic gradient against
//! independent double-precision reference implementations.
//!
//! The reference forwards here are naive loops kept deliberately separate
//! from the production kernels; the checks confirm both that the production
//! forward matches the reference and that the hand-derived backward matches
//! central finite differences of the reference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::groundtruth::{isoheight_from_boundary, IsoheightMap, Mask};
use crate::losses;
use crate::tensor::{
    batchnorm_backward, conv2d_backward, deconv2d_backward, relu_backward, relu_forward,
    softmax_channels, BatchNormParams, ConvParams, DeconvParams, Tensor,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn result(name: impl Into<String>, rel_err: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        rel_err,
        tolerance,
        pass: rel_err <= tolerance,
    }
}

/// Max-norm relative error between two gradient vectors.
fn rel_err(analytic: &[f32], fd: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &b) in analytic.iter().zip(fd) {
        diff = diff.max((a as f64 - b).abs());
        scale = scale.max((a as f64).abs()).max(b.abs());
    }
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` around `x0`.
fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let up = f(&x);
        x[i] = x0[i] - step;
        let down = f(&x);
        x[i] = x0[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

fn to_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------------------
// reference forwards (naive loops, f64)

#[allow(clippy::too_many_arguments)]
fn ref_conv2d(
    x: &[f64],
    (n, in_c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (out_c, kc, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    assert_eq!(in_c, kc);
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * out_c * out_h * out_w];
    for bi in 0..n {
        for oc in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut sum = bias[oc];
                    for ic in 0..in_c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    sum += x[((bi * in_c + ic) * h + iy as usize) * w + ix as usize]
                                        * k[((oc * in_c + ic) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                    out[((bi * out_c + oc) * out_h + oy) * out_w + ox] = sum;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn ref_deconv2d(
    x: &[f64],
    (n, in_c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (kic, out_c, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Vec<f64> {
    assert_eq!(in_c, kic);
    let out_h = (h - 1) * stride + kh + out_pad - 2 * pad;
    let out_w = (w - 1) * stride + kw + out_pad - 2 * pad;
    let mut out = vec![0.0; n * out_c * out_h * out_w];
    for bi in 0..n {
        for oc in 0..out_c {
            for i in 0..out_h * out_w {
                out[(bi * out_c + oc) * out_h * out_w + i] = bias[oc];
            }
            for ic in 0..in_c {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x[((bi * in_c + ic) * h + iy) * w + ix];
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let oy = (iy * stride + dy) as isize - pad as isize;
                                let ox = (ix * stride + dx) as isize - pad as isize;
                                if oy >= 0 && oy < out_h as isize && ox >= 0 && ox < out_w as isize
                                {
                                    out[((bi * out_c + oc) * out_h + oy as usize) * out_w
                                        + ox as usize] +=
                                        v * k[((ic * out_c + oc) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn ref_batchnorm_train(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let count = (n * h * w) as f64;
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let mut mean = 0.0;
        for bi in 0..n {
            for i in 0..h * w {
                mean += x[(bi * c + ci) * h * w + i];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for bi in 0..n {
            for i in 0..h * w {
                let d = x[(bi * c + ci) * h * w + i] - mean;
                var += d * d;
            }
        }
        var /= count;
        let inv = 1.0 / (var + eps).sqrt();
        for bi in 0..n {
            for i in 0..h * w {
                let idx = (bi * c + ci) * h * w + i;
                out[idx] = gamma[ci] * (x[idx] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

fn ref_softmax_channels(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..n {
        for i in 0..h * w {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[(bi * c + ci) * h * w + i]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                sum += (x[(bi * c + ci) * h * w + i] - m).exp();
            }
            for ci in 0..c {
                out[(bi * c + ci) * h * w + i] = (x[(bi * c + ci) * h * w + i] - m).exp() / sum;
            }
        }
    }
    out
}

fn ref_ce_plus_dice(
    logits: &[f64],
    dims: (usize, usize, usize, usize),
    targets: &[u8],
) -> f64 {
    let (n, c, h, w) = dims;
    let probs = ref_softmax_channels(logits, dims);
    let plane = h * w;
    let npix = (n * plane) as f64;
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut tsum = vec![0.0; c];
    for bi in 0..n {
        for i in 0..plane {
            let t = targets[bi * plane + i] as usize;
            ce -= probs[(bi * c + t) * plane + i].ln();
            for ci in 0..c {
                let p = probs[(bi * c + ci) * plane + i];
                psum[ci] += p;
                if ci == t {
                    inter[ci] += p;
                    tsum[ci] += 1.0;
                }
            }
        }
    }
    ce /= npix;
    let mut dice = 0.0;
    for ci in 0..c {
        dice += (2.0 * inter[ci] + 1.0) / (psum[ci] + tsum[ci] + 1.0);
    }
    ce + 1.0 - dice / c as f64
}

/// Single-batch (c, h*w) layout; `fg` has length h*w.
fn ref_smooth_l1(pred: &[f64], target: &[f64], fg: &[bool], channels: usize) -> f64 {
    let plane_len = fg.len();
    assert_eq!(pred.len(), channels * plane_len);
    let fg_count = fg.iter().filter(|&&v| v).count();
    if fg_count == 0 {
        return 0.0;
    }
    let mut loss = 0.0;
    let mut count = 0usize;
    for ci in 0..channels {
        for i in 0..plane_len {
            if !fg[i] {
                continue;
            }
            let d = pred[ci * plane_len + i] - target[ci * plane_len + i];
            loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            count += 1;
        }
    }
    loss / count as f64
}

/// Rounded-read boundary loss on continuous distances (single batch item).
fn ref_nb_loss(
    bd: &[f64],
    (h, w): (usize, usize),
    fg: &[bool],
    psi: &IsoheightMap,
    tau: f64,
    e: f64,
) -> f64 {
    let plane = h * w;
    let fg_count = fg.iter().filter(|&&v| v).count();
    if fg_count == 0 {
        return 0.0;
    }
    let clamp = |v: f64, max: usize| {
        if v <= 0.0 {
            0
        } else if v >= (max - 1) as f64 {
            max - 1
        } else {
            v as usize
        }
    };
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            for (ci, horiz, sign) in [(0, true, -1.0), (1, true, 1.0), (2, false, -1.0), (3, false, 1.0)] {
                let d: f64 = bd[ci * plane + y * w + x];
                let r = d.round();
                let (py, px) = if horiz {
                    (y, clamp(x as f64 + sign * r, w))
                } else {
                    (clamp(y as f64 + sign * r, h), x)
                };
                sum += psi.at(py, px) as f64;
            }
        }
    }
    sum / (tau * (4 * fg_count) as f64 + e)
}

// ---------------------------------------------------------------------------
// individual checks

fn rand_tensor(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0f32))
}

fn check_conv(rng: &mut ChaCha8Rng, k: usize, stride: usize, out: &mut Vec<CheckResult>) {
    let (n, in_c, h, w) = (2, 3, 6, 6);
    let out_c = 4;
    let pad = if k == 3 { 1 } else { 0 };
    let x = rand_tensor(rng, n, in_c, h, w);
    let kernel = rand_tensor(rng, out_c, in_c, k, k);
    let bias: Vec<f32> = (0..out_c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let p = ConvParams::new(kernel.clone(), bias.clone(), stride, pad).unwrap();
    let y = crate::tensor::conv2d_forward(&x, &p).unwrap();
    let go = rand_tensor(rng, y.dims().0, y.dims().1, y.dims().2, y.dims().3);
    let (gx, gk, gb) = conv2d_backward(&x, &p, &go).unwrap();

    let go64 = to_f64(go.data());
    let kdims = (out_c, in_c, k, k);
    let loss = |xv: &[f64], kv: &[f64], bv: &[f64]| {
        ref_conv2d(xv, (n, in_c, h, w), kv, kdims, bv, stride, pad)
            .iter()
            .zip(&go64)
            .map(|(a, g)| a * g)
            .sum::<f64>()
    };
    let x64 = to_f64(x.data());
    let k64 = to_f64(kernel.data());
    let b64 = to_f64(&bias);
    let name = format!("conv2d k{k} s{stride}");
    let fd_x = central_diff(|v| loss(v, &k64, &b64), &x64, FD_STEP);
    out.push(result(format!("{name} dx"), rel_err(gx.data(), &fd_x), DEFAULT_TOLERANCE));
    let fd_k = central_diff(|v| loss(&x64, v, &b64), &k64, FD_STEP);
    out.push(result(format!("{name} dkernel"), rel_err(gk.data(), &fd_k), DEFAULT_TOLERANCE));
    let fd_b = central_diff(|v| loss(&x64, &k64, v), &b64, FD_STEP);
    out.push(result(format!("{name} dbias"), rel_err(&gb, &fd_b), DEFAULT_TOLERANCE));

    // forward agreement with the naive oracle
    let fwd = loss(&x64, &k64, &b64);
    let impl_fwd: f64 = y.data().iter().zip(&go64).map(|(&a, g)| a as f64 * g).sum();
    out.push(result(
        format!("{name} forward-oracle"),
        (fwd - impl_fwd).abs() / fwd.abs().max(1.0),
        1e-5,
    ));
}

fn check_deconv(rng: &mut ChaCha8Rng, k: usize, out: &mut Vec<CheckResult>) {
    let (n, in_c, h, w) = (2, 3, 4, 4);
    let out_c = 3;
    let (stride, pad, out_pad) = if k == 3 { (2, 1, 1) } else { (2, 0, 1) };
    let x = rand_tensor(rng, n, in_c, h, w);
    let kernel = rand_tensor(rng, in_c, out_c, k, k);
    let bias: Vec<f32> = (0..out_c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let p = DeconvParams::new(kernel.clone(), bias.clone(), stride, pad, out_pad).unwrap();
    let y = crate::tensor::deconv2d_forward(&x, &p).unwrap();
    let go = rand_tensor(rng, y.dims().0, y.dims().1, y.dims().2, y.dims().3);
    let (gx, gk, gb) = deconv2d_backward(&x, &p, &go).unwrap();

    let go64 = to_f64(go.data());
    let loss = |xv: &[f64], kv: &[f64], bv: &[f64]| {
        ref_deconv2d(xv, (n, in_c, h, w), kv, (in_c, out_c, k, k), bv, stride, pad, out_pad)
            .iter()
            .zip(&go64)
            .map(|(a, g)| a * g)
            .sum::<f64>()
    };
    let x64 = to_f64(x.data());
    let k64 = to_f64(kernel.data());
    let b64 = to_f64(&bias);
    let name = format!("deconv2d k{k} s{stride}");
    let fd_x = central_diff(|v| loss(v, &k64, &b64), &x64, FD_STEP);
    out.push(result(format!("{name} dx"), rel_err(gx.data(), &fd_x), DEFAULT_TOLERANCE));
    let fd_k = central_diff(|v| loss(&x64, v, &b64), &k64, FD_STEP);
    out.push(result(format!("{name} dkernel"), rel_err(gk.data(), &fd_k), DEFAULT_TOLERANCE));
    let fd_b = central_diff(|v| loss(&x64, &k64, v), &b64, FD_STEP);
    out.push(result(format!("{name} dbias"), rel_err(&gb, &fd_b), DEFAULT_TOLERANCE));

    let fwd = loss(&x64, &k64, &b64);
    let impl_fwd: f64 = y.data().iter().zip(&go64).map(|(&a, g)| a as f64 * g).sum();
    out.push(result(
        format!("{name} forward-oracle"),
        (fwd - impl_fwd).abs() / fwd.abs().max(1.0),
        1e-5,
    ));
}

fn check_batchnorm(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let dims = (2, 4, 6, 6);
    let (n, c, h, w) = dims;
    let x = rand_tensor(rng, n, c, h, w);
    let mut p = BatchNormParams::new(c);
    for i in 0..c {
        p.gamma[i] = rng.random_range(0.5..1.5);
        p.beta[i] = rng.random_range(-0.5..0.5);
    }
    let go = rand_tensor(rng, n, c, h, w);
    let (gx, gg, gb) = batchnorm_backward(&x, &p, &go).unwrap();

    let go64 = to_f64(go.data());
    let eps = p.eps as f64;
    let loss = |xv: &[f64], gv: &[f64], bv: &[f64]| {
        ref_batchnorm_train(xv, dims, gv, bv, eps)
            .iter()
            .zip(&go64)
            .map(|(a, g)| a * g)
            .sum::<f64>()
    };
    let x64 = to_f64(x.data());
    let g64 = to_f64(&p.gamma);
    let b64 = to_f64(&p.beta);
    let fd_x = central_diff(|v| loss(v, &g64, &b64), &x64, FD_STEP);
    out.push(result("batchnorm dx", rel_err(gx.data(), &fd_x), DEFAULT_TOLERANCE));
    let fd_g = central_diff(|v| loss(&x64, v, &b64), &g64, FD_STEP);
    out.push(result("batchnorm dgamma", rel_err(&gg, &fd_g), DEFAULT_TOLERANCE));
    let fd_b = central_diff(|v| loss(&x64, &g64, v), &b64, FD_STEP);
    out.push(result("batchnorm dbeta", rel_err(&gb, &fd_b), DEFAULT_TOLERANCE));
}

fn check_relu_softmax(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let dims = (2, 4, 6, 6);
    let (n, c, h, w) = dims;
    // keep activations away from the relu kink
    let x = Tensor::from_fn(n, c, h, w, |_, _, _, _| {
        let v: f32 = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let go = rand_tensor(rng, n, c, h, w);
    let g = relu_backward(&x, &go);
    let go64 = to_f64(go.data());
    let x64 = to_f64(x.data());
    let fd = central_diff(
        |v| {
            v.iter()
                .zip(&go64)
                .map(|(&a, g)| a.max(0.0) * g)
                .sum::<f64>()
        },
        &x64,
        FD_STEP,
    );
    out.push(result("relu dx", rel_err(g.data(), &fd), DEFAULT_TOLERANCE));
    let fwd_diff = relu_forward(&x)
        .data()
        .iter()
        .zip(&x64)
        .map(|(&a, &b)| (a as f64 - b.max(0.0)).abs())
        .fold(0.0f64, f64::max);
    out.push(result("relu forward-oracle", fwd_diff, 1e-6));

    // softmax gradient via the loss sum(g * softmax(x))
    let probs = softmax_channels(&x);
    let plane = h * w;
    let mut gs = Tensor::zeros(n, c, h, w);
    for bi in 0..n {
        for i in 0..plane {
            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += go.plane(bi, ci)[i] as f64 * probs.plane(bi, ci)[i] as f64;
            }
            for ci in 0..c {
                let p = probs.plane(bi, ci)[i] as f64;
                gs.plane_mut(bi, ci)[i] = (p * (go.plane(bi, ci)[i] as f64 - dot)) as f32;
            }
        }
    }
    let fd = central_diff(
        |v| {
            ref_softmax_channels(v, dims)
                .iter()
                .zip(&go64)
                .map(|(a, g)| a * g)
                .sum::<f64>()
        },
        &x64,
        FD_STEP,
    );
    out.push(result("softmax dx", rel_err(gs.data(), &fd), DEFAULT_TOLERANCE));
    let sm_diff = probs
        .data()
        .iter()
        .zip(ref_softmax_channels(&x64, dims))
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0f64, f64::max);
    out.push(result("softmax forward-oracle", sm_diff, 1e-6));
}

fn check_ce_dice(rng: &mut ChaCha8Rng, class_count: usize, out: &mut Vec<CheckResult>) {
    let (n, h, w) = (2, 4, 4);
    let logits = rand_tensor(rng, n, class_count, h, w);
    let targets: Vec<u8> = (0..n * h * w)
        .map(|_| rng.random_range(0..class_count as u8))
        .collect();
    let (_, grad) = losses::ce_plus_dice(&logits, &targets, class_count).unwrap();
    let x64 = to_f64(logits.data());
    let fd = central_diff(
        |v| ref_ce_plus_dice(v, (n, class_count, h, w), &targets),
        &x64,
        FD_STEP,
    );
    out.push(result(
        format!("ce_plus_dice C={class_count} dlogits"),
        rel_err(grad.data(), &fd),
        DEFAULT_TOLERANCE,
    ));
}

fn check_smooth_l1(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let (h, w) = (5, 5);
    let target = rand_tensor(rng, 1, 4, h, w);
    // residuals kept away from the |d| = 1 kink
    let pred = Tensor::from_fn(1, 4, h, w, |_, c, y, x| {
        let mut d: f32 = rng.random_range(-1.8..1.8);
        if (d.abs() - 1.0).abs() < 2e-3 {
            d += 0.01;
        }
        target.at(0, c, y, x) + d
    });
    let fg: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
    let (_, grad) = losses::smooth_l1(&pred, &target, &fg).unwrap();
    let p64 = to_f64(pred.data());
    let t64 = to_f64(target.data());
    let fd = central_diff(|v| ref_smooth_l1(v, &t64, &fg, 4), &p64, FD_STEP);
    out.push(result("smooth_l1 dpred", rel_err(grad.data(), &fd), DEFAULT_TOLERANCE));
}

fn nb_fixture(rng: &mut ChaCha8Rng) -> (Tensor, Vec<bool>, IsoheightMap) {
    let (h, w) = (8, 8);
    let mut boundary = Mask::new(h, w);
    for i in 1..7 {
        boundary.set(1, i, true);
        boundary.set(6, i, true);
        boundary.set(i, 1, true);
        boundary.set(i, 6, true);
    }
    let psi = isoheight_from_boundary(&boundary, 5).unwrap();
    // foreground restricted to the middle so probed positions stay interior
    let mut fg = vec![false; h * w];
    for y in 3..5 {
        for x in 3..5 {
            fg[y * w + x] = true;
        }
    }
    let bd = Tensor::from_fn(1, 4, h, w, |_, _, _, _| rng.random_range(0.2..1.3f32));
    (bd, fg, psi)
}

/// The boundary-loss gradient is defined through rounding, so the probe step
/// is exactly 1: rounding commutes with integer shifts, making the step-1
/// central difference of the rounded-read loss equal the analytic
/// straight-through gradient.
fn check_nb_loss(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let (bd, fg, psi) = nb_fixture(rng);
    let cfg = losses::IsoheightConfig::default();
    let (value, grad) = losses::nb_loss_train(&bd, &fg, std::slice::from_ref(&psi), &cfg).unwrap();
    let (_, _, h, w) = bd.dims();
    let bd64 = to_f64(bd.data());
    let fd = central_diff(
        |v| ref_nb_loss(v, (h, w), &fg, &psi, cfg.tau as f64, cfg.e),
        &bd64,
        1.0,
    );
    out.push(result("nb_loss dbd (step 1)", rel_err(grad.data(), &fd), DEFAULT_TOLERANCE));
    let direct = ref_nb_loss(&bd64, (h, w), &fg, &psi, cfg.tau as f64, cfg.e);
    out.push(result(
        "nb_loss forward-oracle",
        (value - direct).abs(),
        1e-9,
    ));
}

fn check_total_loss(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let (h, w) = (8, 8);
    let (bd_pred, fg, psi) = nb_fixture(rng);
    let np_logits = rand_tensor(rng, 1, 2, h, w);
    let nt_logits = rand_tensor(rng, 1, 7, h, w);
    let np_t: Vec<u8> = fg.iter().map(|&f| f as u8).collect();
    let nt_t: Vec<u8> = fg.iter().map(|&f| if f { 3 } else { 0 }).collect();
    let bd_t = rand_tensor(rng, 1, 4, h, w);
    let psi_vec = vec![psi];
    let targets = losses::LossTargets {
        np: &np_t,
        nt: &nt_t,
        bd: &bd_t,
        fg: &fg,
        psi: &psi_vec,
    };
    let weights = losses::LossWeights {
        np: 0.7,
        nt: 1.3,
        bd: 0.9,
        nb: 0.4,
    };
    let iso = losses::IsoheightConfig::default();
    let (_, grads) =
        losses::total_loss(&np_logits, &nt_logits, &bd_pred, &targets, &weights, &iso).unwrap();

    // np and nt gradients against finite differences of the weighted reference
    let np64 = to_f64(np_logits.data());
    let fd_np = central_diff(
        |v| weights.np * ref_ce_plus_dice(v, (1, 2, h, w), &np_t),
        &np64,
        FD_STEP,
    );
    out.push(result("total_loss dnp", rel_err(grads.np.data(), &fd_np), DEFAULT_TOLERANCE));
    let nt64 = to_f64(nt_logits.data());
    let fd_nt = central_diff(
        |v| weights.nt * ref_ce_plus_dice(v, (1, 7, h, w), &nt_t),
        &nt64,
        FD_STEP,
    );
    out.push(result("total_loss dnt", rel_err(grads.nt.data(), &fd_nt), DEFAULT_TOLERANCE));

    // bd gradient must recompose linearly from the two checked components
    let (_, g_sl1) = losses::smooth_l1(&bd_pred, &bd_t, &fg).unwrap();
    let (_, g_nb) = losses::nb_loss_train(&bd_pred, &fg, &psi_vec, &iso).unwrap();
    let recomposed: Vec<f32> = g_sl1
        .data()
        .iter()
        .zip(g_nb.data())
        .map(|(a, b)| weights.bd as f32 * a + weights.nb as f32 * b)
        .collect();
    let diff = grads
        .bd
        .data()
        .iter()
        .zip(&recomposed)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    out.push(result("total_loss dbd (recomposition)", diff, 1e-9));
}

/// Run every gradient and oracle check with a fixed seed.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut out = Vec::new();
    check_conv(&mut rng, 3, 1, &mut out);
    check_conv(&mut rng, 3, 2, &mut out);
    check_conv(&mut rng, 1, 1, &mut out);
    check_deconv(&mut rng, 3, &mut out);
    check_deconv(&mut rng, 1, &mut out);
    check_batchnorm(&mut rng, &mut out);
    check_relu_softmax(&mut rng, &mut out);
    check_ce_dice(&mut rng, 2, &mut out);
    check_ce_dice(&mut rng, 7, &mut out);
    check_smooth_l1(&mut rng, &mut out);
    check_nb_loss(&mut rng, &mut out);
    check_total_loss(&mut rng, &mut out);
    out
}
