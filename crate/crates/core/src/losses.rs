//! The four training losses and their gradients w.r.t. the network outputs:
//! cross-entropy + soft-DICE for the mask and type heads, Smooth-L1 for the
//! boundary-distance head, and the isoheight boundary loss.

use crate::error::{CoreError, Result};
use crate::groundtruth::IsoheightMap;
use crate::tensor::{softmax_channels, Tensor};

/// Weights of the four loss components; the total is their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub np: f64,
    pub nt: f64,
    pub bd: f64,
    pub nb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            np: 1.0,
            nt: 1.0,
            bd: 1.0,
            nb: 1.0,
        }
    }
}

/// Isoheight construction and boundary-loss smoothing constants.
#[derive(Clone, Copy, Debug)]
pub struct IsoheightConfig {
    pub tau: u8,
    pub e: f64,
}

impl Default for IsoheightConfig {
    fn default() -> Self {
        IsoheightConfig { tau: 5, e: 1.0 }
    }
}

impl IsoheightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(CoreError::InvalidConfig("tau must be >= 1".into()));
        }
        if self.e <= 0.0 {
            return Err(CoreError::InvalidConfig("smoothing constant e must be > 0".into()));
        }
        Ok(())
    }
}

const DICE_SMOOTH: f64 = 1.0;

/// Mean softmax cross-entropy plus soft-DICE loss against integer labels,
/// with the gradient w.r.t. the logits.
pub fn ce_plus_dice(
    logits: &Tensor,
    targets: &[u8],
    class_count: usize,
) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = logits.dims();
    if c != class_count {
        return Err(CoreError::shape(
            "ce_plus_dice",
            format!("logit channels {c} != class count {class_count}"),
        ));
    }
    if targets.len() != n * h * w {
        return Err(CoreError::shape(
            "ce_plus_dice",
            format!("target length {} != {}", targets.len(), n * h * w),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= class_count) {
        return Err(CoreError::InvalidConfig(format!(
            "target label {bad} out of range 0..{class_count}"
        )));
    }

    let probs = softmax_channels(logits);
    let plane = h * w;
    let npix = (n * plane) as f64;

    // cross-entropy and per-class soft-DICE accumulators
    let mut ce = 0.0f64;
    let mut inter = vec![0.0f64; c]; // sum p_c * t_c
    let mut psum = vec![0.0f64; c];
    let mut tsum = vec![0.0f64; c];
    for bi in 0..n {
        for i in 0..plane {
            let t = targets[bi * plane + i] as usize;
            let pt = probs.plane(bi, t)[i] as f64;
            ce -= pt.max(1e-300).ln();
            for ci in 0..c {
                let p = probs.plane(bi, ci)[i] as f64;
                psum[ci] += p;
                if ci == t {
                    inter[ci] += p;
                    tsum[ci] += 1.0;
                }
            }
        }
    }
    ce /= npix;

    let mut dice_mean = 0.0f64;
    let mut num = vec![0.0f64; c];
    let mut den = vec![0.0f64; c];
    for ci in 0..c {
        num[ci] = 2.0 * inter[ci] + DICE_SMOOTH;
        den[ci] = psum[ci] + tsum[ci] + DICE_SMOOTH;
        dice_mean += num[ci] / den[ci];
    }
    dice_mean /= c as f64;
    let loss = ce + (1.0 - dice_mean);

    // gradient w.r.t. logits, chained through the softmax
    let mut grad = Tensor::zeros(n, c, h, w);
    let mut dldp = vec![0.0f64; c];
    for bi in 0..n {
        for i in 0..plane {
            let t = targets[bi * plane + i] as usize;
            // dL/dp_c at this pixel
            for ci in 0..c {
                let tci = if ci == t { 1.0 } else { 0.0 };
                dldp[ci] = -(2.0 * tci * den[ci] - num[ci]) / (den[ci] * den[ci]) / c as f64;
            }
            dldp[t] += -1.0 / (probs.plane(bi, t)[i] as f64).max(1e-300) / npix;

            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += dldp[ci] * probs.plane(bi, ci)[i] as f64;
            }
            for ci in 0..c {
                let p = probs.plane(bi, ci)[i] as f64;
                grad.plane_mut(bi, ci)[i] = (p * (dldp[ci] - dot)) as f32;
            }
        }
    }
    Ok((loss, grad))
}

/// Smooth-L1 over foreground pixels and the four distance channels;
/// background pixels are excluded. Empty foreground yields loss 0.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, fg: &[bool]) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = pred.dims();
    if pred.dims() != target.dims() {
        return Err(CoreError::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", pred.dims(), target.dims()),
        ));
    }
    if fg.len() != n * h * w {
        return Err(CoreError::shape(
            "smooth_l1",
            format!("mask length {} != {}", fg.len(), n * h * w),
        ));
    }
    let plane = h * w;
    let fg_count: usize = fg.iter().filter(|&&v| v).count();
    let mut grad = Tensor::zeros(n, c, h, w);
    if fg_count == 0 {
        return Ok((0.0, grad));
    }
    let count = (fg_count * c) as f64;
    let mut loss = 0.0f64;
    for bi in 0..n {
        for ci in 0..c {
            let pp = pred.plane(bi, ci);
            let tp = target.plane(bi, ci);
            let gp = grad.plane_mut(bi, ci);
            for i in 0..plane {
                if !fg[bi * plane + i] {
                    continue;
                }
                let d = pp[i] as f64 - tp[i] as f64;
                if d.abs() < 1.0 {
                    loss += 0.5 * d * d;
                    gp[i] = (d / count) as f32;
                } else {
                    loss += d.abs() - 0.5;
                    gp[i] = (d.signum() / count) as f32;
                }
            }
        }
    }
    Ok((loss / count, grad))
}

/// The boundary loss of a set of predicted boundary pixels: the isoheight sum
/// over the set divided by (tau * |NB| + e).
pub fn nb_loss(nb: &[(usize, usize)], psi: &IsoheightMap, cfg: &IsoheightConfig) -> f64 {
    if nb.is_empty() {
        return 0.0;
    }
    let sum: f64 = nb.iter().map(|&(y, x)| psi.at(y, x) as f64).sum();
    sum / (cfg.tau as f64 * nb.len() as f64 + cfg.e)
}

fn clamp_pos(v: f32, max: usize) -> usize {
    if v <= 0.0 {
        0
    } else if v as usize >= max {
        max - 1
    } else {
        v as usize
    }
}

/// Training-time boundary loss. Every foreground pixel casts four rays at its
/// rounded predicted boundary positions (no vote threshold); the loss reads
/// the isoheight map at those positions. The gradient w.r.t. each continuous
/// distance is the straight-through spatial central difference of the
/// isoheight map at the rounded position, which equals the (step 1) central
/// difference of the loss itself away from the image border.
pub fn nb_loss_train(
    bd_pred: &Tensor,
    fg: &[bool],
    psi: &[IsoheightMap],
    cfg: &IsoheightConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let (n, c, h, w) = bd_pred.dims();
    if c != 4 {
        return Err(CoreError::shape(
            "nb_loss_train",
            format!("expected 4 distance channels, got {c}"),
        ));
    }
    if fg.len() != n * h * w || psi.len() != n {
        return Err(CoreError::shape(
            "nb_loss_train",
            "mask or isoheight batch size mismatch",
        ));
    }
    let plane = h * w;
    let tau = cfg.tau as f64;
    let mut grad = Tensor::zeros(n, c, h, w);
    let mut total = 0.0f64;
    for bi in 0..n {
        let pm = &psi[bi];
        let fg_count = fg[bi * plane..(bi + 1) * plane].iter().filter(|&&v| v).count();
        if fg_count == 0 {
            continue;
        }
        let rays = (4 * fg_count) as f64;
        let denom = tau * rays + cfg.e;
        let mut sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                if !fg[bi * plane + y * w + x] {
                    continue;
                }
                // (channel, axis is x?, direction sign): left, right, up, down
                for (ci, horiz, sign) in [
                    (0usize, true, -1.0f64),
                    (1, true, 1.0),
                    (2, false, -1.0),
                    (3, false, 1.0),
                ] {
                    let d = bd_pred.plane(bi, ci)[y * w + x];
                    let r = d.round();
                    let (py, px) = if horiz {
                        (y, clamp_pos(x as f32 + sign as f32 * r, w))
                    } else {
                        (clamp_pos(y as f32 + sign as f32 * r, h), x)
                    };
                    sum += pm.at(py, px) as f64;
                    // spatial slope of psi along the ray axis at the rounded
                    // position; one-sided at the border
                    let slope = if horiz {
                        spatial_slope(|xx| pm.at(py, xx) as f64, px, w)
                    } else {
                        spatial_slope(|yy| pm.at(yy, px) as f64, py, h)
                    };
                    grad.plane_mut(bi, ci)[y * w + x] += (sign * slope / denom / n as f64) as f32;
                }
            }
        }
        total += sum / denom;
    }
    Ok((total / n as f64, grad))
}

fn spatial_slope(get: impl Fn(usize) -> f64, pos: usize, len: usize) -> f64 {
    if len == 1 {
        0.0
    } else if pos == 0 {
        get(1) - get(0)
    } else if pos == len - 1 {
        get(len - 1) - get(len - 2)
    } else {
        (get(pos + 1) - get(pos - 1)) / 2.0
    }
}

/// Per-component loss values and the weighted total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub np: f64,
    pub nt: f64,
    pub bd: f64,
    pub nb: f64,
    pub total: f64,
}

/// Gradients of the weighted total w.r.t. the three network outputs.
pub struct LossGrads {
    pub np: Tensor,
    pub nt: Tensor,
    pub bd: Tensor,
}

pub struct LossTargets<'a> {
    pub np: &'a [u8],
    pub nt: &'a [u8],
    pub bd: &'a Tensor,
    pub fg: &'a [bool],
    pub psi: &'a [IsoheightMap],
}

/// Weighted sum of the four components, with per-component values reported.
pub fn total_loss(
    np_logits: &Tensor,
    nt_logits: &Tensor,
    bd_out: &Tensor,
    targets: &LossTargets,
    weights: &LossWeights,
    iso: &IsoheightConfig,
) -> Result<(LossValues, LossGrads)> {
    let (l_np, mut g_np) = ce_plus_dice(np_logits, targets.np, 2)?;
    let (l_nt, mut g_nt) = ce_plus_dice(nt_logits, targets.nt, 7)?;
    let (l_bd, g_bd1) = smooth_l1(bd_out, targets.bd, targets.fg)?;
    let (l_nb, g_bd2) = nb_loss_train(bd_out, targets.fg, targets.psi, iso)?;

    for (name, v) in [("L_np", l_np), ("L_nt", l_nt), ("L_bd", l_bd), ("L_nb", l_nb)] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                component: name.to_string(),
            });
        }
    }

    let total = weights.np * l_np + weights.nt * l_nt + weights.bd * l_bd + weights.nb * l_nb;
    for g in g_np.data_mut() {
        *g *= weights.np as f32;
    }
    for g in g_nt.data_mut() {
        *g *= weights.nt as f32;
    }
    let mut g_bd = Tensor::zeros(bd_out.dims().0, 4, bd_out.dims().2, bd_out.dims().3);
    for ((g, a), b) in g_bd.data_mut().iter_mut().zip(g_bd1.data()).zip(g_bd2.data()) {
        *g = (weights.bd as f32) * a + (weights.nb as f32) * b;
    }

    Ok((
        LossValues {
            np: l_np,
            nt: l_nt,
            bd: l_bd,
            nb: l_nb,
            total,
        },
        LossGrads {
            np: g_np,
            nt: g_nt,
            bd: g_bd,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{isoheight_from_boundary, Mask};

    #[test]
    fn saturated_logits_drive_both_terms_to_zero() {
        // strongly correct predictions: CE -> 0 and soft-DICE loss -> ~0
        let mut logits = Tensor::zeros(1, 2, 2, 2);
        let targets = [0u8, 1, 1, 0];
        for (i, &t) in targets.iter().enumerate() {
            logits.plane_mut(0, t as usize)[i] = 40.0;
            logits.plane_mut(0, 1 - t as usize)[i] = -40.0;
        }
        let (loss, _) = ce_plus_dice(&logits, &targets, 2).unwrap();
        // on balanced targets the DICE smoothing cancels exactly
        let d = 1.0 - 0.5 * ((2.0 * 2.0 + 1.0) / (2.0 + 2.0 + 1.0) + (2.0 * 2.0 + 1.0) / (5.0));
        assert!((loss - d).abs() < 1e-4, "loss {loss} expect {d}");
        assert!(loss < 1e-3);
    }

    #[test]
    fn uniform_binary_logits_give_ln2_cross_entropy() {
        let logits = Tensor::zeros(1, 2, 2, 2);
        let targets = [0u8, 1, 0, 1];
        let (loss, _) = ce_plus_dice(&logits, &targets, 2).unwrap();
        // CE = ln 2; DICE with p = 0.5 everywhere: per class (2*1+1)/(2+2+1) = 0.6
        let expect = (2.0f64).ln() + (1.0 - 0.6);
        assert!((loss - expect).abs() < 1e-6, "loss {loss} expect {expect}");
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = Tensor::zeros(1, 2, 1, 1);
        assert!(ce_plus_dice(&logits, &[2u8], 2).is_err());
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let pred = Tensor::full(1, 4, 2, 2, 0.5);
        let target = Tensor::zeros(1, 4, 2, 2);
        let fg = vec![true; 4];
        let (loss, _) = smooth_l1(&pred, &target, &fg).unwrap();
        assert!((loss - 0.125).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_linear_branch() {
        let pred = Tensor::full(1, 4, 2, 2, 2.0);
        let target = Tensor::zeros(1, 4, 2, 2);
        let fg = vec![true; 4];
        let (loss, _) = smooth_l1(&pred, &target, &fg).unwrap();
        assert!((loss - 1.5).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_empty_foreground_is_zero() {
        let pred = Tensor::full(1, 4, 2, 2, 3.0);
        let target = Tensor::zeros(1, 4, 2, 2);
        let fg = vec![false; 4];
        let (loss, grad) = smooth_l1(&pred, &target, &fg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn smooth_l1_background_excluded() {
        let mut pred = Tensor::zeros(1, 4, 1, 2);
        for c in 0..4 {
            pred.plane_mut(0, c)[0] = 2.0; // fg pixel, |d| = 2
            pred.plane_mut(0, c)[1] = 100.0; // bg pixel, must not count
        }
        let target = Tensor::zeros(1, 4, 1, 2);
        let (loss, grad) = smooth_l1(&pred, &target, &[true, false]).unwrap();
        assert!((loss - 1.5).abs() < 1e-9);
        assert_eq!(grad.plane(0, 0)[1], 0.0);
    }

    fn square_psi() -> IsoheightMap {
        let mut b = Mask::new(8, 8);
        for i in 2..6 {
            b.set(2, i, true);
            b.set(5, i, true);
            b.set(i, 2, true);
            b.set(i, 5, true);
        }
        isoheight_from_boundary(&b, 5).unwrap()
    }

    #[test]
    fn nb_loss_zero_on_exact_boundary() {
        let psi = square_psi();
        let nb: Vec<(usize, usize)> = vec![(2, 2), (2, 3), (5, 5)];
        let cfg = IsoheightConfig::default();
        assert_eq!(nb_loss(&nb, &psi, &cfg), 0.0);
        assert_eq!(nb_loss(&[], &psi, &cfg), 0.0);
    }

    #[test]
    fn nb_loss_saturates_toward_one() {
        let b = Mask::new(16, 16); // empty boundary: psi = tau everywhere
        let psi = isoheight_from_boundary(&b, 5).unwrap();
        let nb: Vec<(usize, usize)> = (0..16).flat_map(|y| (0..16).map(move |x| (y, x))).collect();
        let cfg = IsoheightConfig::default();
        let loss = nb_loss(&nb, &psi, &cfg);
        let expect = 5.0 * 256.0 / (5.0 * 256.0 + 1.0);
        assert!((loss - expect).abs() < 1e-12);
        assert!(loss < 1.0);
    }

    #[test]
    fn nb_loss_matches_direct_formula_on_random_sets() {
        let psi = square_psi();
        let cfg = IsoheightConfig::default();
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for _ in 0..20 {
            let count = next() % 30 + 1;
            let nb: Vec<(usize, usize)> = (0..count).map(|_| (next() % 8, next() % 8)).collect();
            let direct: f64 = nb.iter().map(|&(y, x)| psi.at(y, x) as f64).sum::<f64>()
                / (5.0 * nb.len() as f64 + 1.0);
            assert!((nb_loss(&nb, &psi, &cfg) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_weight_projection() {
        let np_logits = Tensor::from_fn(1, 2, 4, 4, |_, c, y, x| ((c + y + x) % 3) as f32 - 1.0);
        let nt_logits = Tensor::from_fn(1, 7, 4, 4, |_, c, y, x| ((c * 2 + y + x) % 5) as f32 * 0.3);
        let bd_out = Tensor::full(1, 4, 4, 4, 1.0);
        let np_t = vec![0u8; 16];
        let nt_t = vec![0u8; 16];
        let bd_t = Tensor::zeros(1, 4, 4, 4);
        let fg = vec![false; 16];
        let psi = vec![isoheight_from_boundary(&Mask::new(4, 4), 5).unwrap()];
        let targets = LossTargets {
            np: &np_t,
            nt: &nt_t,
            bd: &bd_t,
            fg: &fg,
            psi: &psi,
        };
        let iso = IsoheightConfig::default();

        let zero = LossWeights {
            np: 0.0,
            nt: 0.0,
            bd: 0.0,
            nb: 0.0,
        };
        let (v, g) = total_loss(&np_logits, &nt_logits, &bd_out, &targets, &zero, &iso).unwrap();
        assert_eq!(v.total, 0.0);
        assert!(g.np.data().iter().all(|&x| x == 0.0));
        assert!(g.bd.data().iter().all(|&x| x == 0.0));

        let only_np = LossWeights {
            np: 1.0,
            nt: 0.0,
            bd: 0.0,
            nb: 0.0,
        };
        let (v2, _) = total_loss(&np_logits, &nt_logits, &bd_out, &targets, &only_np, &iso).unwrap();
        assert!((v2.total - v2.np).abs() < 1e-12);

        let wsum = LossWeights {
            np: 0.5,
            nt: 2.0,
            bd: 1.5,
            nb: 0.25,
        };
        let (v3, _) = total_loss(&np_logits, &nt_logits, &bd_out, &targets, &wsum, &iso).unwrap();
        let recompose = 0.5 * v3.np + 2.0 * v3.nt + 1.5 * v3.bd + 0.25 * v3.nb;
        assert!((v3.total - recompose).abs() < 1e-9);
    }
}
