//! From network outputs to labeled, classified instances: boundary voting,
//! connectivity analysis, boundary-pixel reattachment and majority-vote
//! typing.

use crate::error::{CoreError, Result};
use crate::groundtruth::{BDMap, InstanceMap, Mask, BD_DOWN, BD_LEFT, BD_RIGHT, BD_UP};
use crate::tensor::{softmax_channels, Tensor};

/// Boundary-voting threshold. A pixel joins the boundary map when its vote
/// count is strictly greater than `e_t`.
#[derive(Clone, Copy, Debug)]
pub struct BvmConfig {
    pub e_t: u32,
}

impl Default for BvmConfig {
    fn default() -> Self {
        BvmConfig { e_t: 3 }
    }
}

/// Per-pixel binary boundary indicator.
pub type NBMap = Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostMode {
    /// Full chain: boundary voting, component split, reattachment.
    Bvm,
    /// Connected components directly on the foreground mask, no voting.
    Naive,
}

/// Full post-processing configuration.
#[derive(Clone, Copy, Debug)]
pub struct SegmentConfig {
    pub bvm: BvmConfig,
    /// Boundary pixels farther than this from every instance stay background.
    pub r_max: f64,
    pub mode: PostMode,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            bvm: BvmConfig::default(),
            r_max: 10.0,
            mode: PostMode::Bvm,
        }
    }
}

/// Vote accumulation: each foreground pixel converts its four distances
/// (rounded half away from zero) to absolute positions and casts one vote at
/// each; out-of-image positions are clamped to the border.
pub fn bvm_votes(bd: &BDMap, np_mask: &Mask) -> Result<Vec<u32>> {
    if (bd.h, bd.w) != (np_mask.h, np_mask.w) {
        return Err(CoreError::shape(
            "bvm",
            format!(
                "bd {}x{} vs mask {}x{}",
                bd.h, bd.w, np_mask.h, np_mask.w
            ),
        ));
    }
    let (h, w) = (bd.h, bd.w);
    let mut votes = vec![0u32; h * w];
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            if !np_mask.at(y, x) {
                continue;
            }
            let dl = bd.at(BD_LEFT, y, x).round() as isize;
            let dr = bd.at(BD_RIGHT, y, x).round() as isize;
            let du = bd.at(BD_UP, y, x).round() as isize;
            let dd = bd.at(BD_DOWN, y, x).round() as isize;
            votes[y * w + clamp(x as isize - dl, w)] += 1;
            votes[y * w + clamp(x as isize + dr, w)] += 1;
            votes[clamp(y as isize - du, h) * w + x] += 1;
            votes[clamp(y as isize + dd, h) * w + x] += 1;
        }
    }
    Ok(votes)
}

/// Boundary Voting Mechanism: positions with votes strictly greater than
/// `e_t` form the nucleus boundary map.
pub fn bvm(bd: &BDMap, np_mask: &Mask, cfg: &BvmConfig) -> Result<NBMap> {
    let votes = bvm_votes(bd, np_mask)?;
    Ok(Mask {
        h: bd.h,
        w: bd.w,
        data: votes.iter().map(|&v| v > cfg.e_t).collect(),
    })
}

/// 4-connected components labeled 1..=K in raster-scan discovery order.
pub fn connected_components(fg: &Mask) -> InstanceMap {
    let (h, w) = (fg.h, fg.w);
    let mut inst = InstanceMap::new(h, w);
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !fg.data[start] || inst.labels[start] != 0 {
            continue;
        }
        next += 1;
        inst.labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let visit = |j: usize, inst: &mut InstanceMap, queue: &mut std::collections::VecDeque<usize>| {
                if fg.data[j] && inst.labels[j] == 0 {
                    inst.labels[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w, &mut inst, &mut queue);
            }
            if y + 1 < h {
                visit(i + w, &mut inst, &mut queue);
            }
            if x > 0 {
                visit(i - 1, &mut inst, &mut queue);
            }
            if x + 1 < w {
                visit(i + 1, &mut inst, &mut queue);
            }
        }
    }
    inst
}

/// Attach every foreground boundary pixel to the instance owning its nearest
/// (Euclidean) interior pixel; ties go to the smaller instance id; pixels with
/// no instance within `r_max` stay background.
pub fn assign_boundary_pixels(
    inst: &InstanceMap,
    nb: &NBMap,
    np_mask: &Mask,
    r_max: f64,
) -> InstanceMap {
    let (h, w) = (inst.h, inst.w);
    let mut out = inst.clone();
    let radius = r_max.floor() as isize;
    let r2_max = r_max * r_max;
    for y in 0..h {
        for x in 0..w {
            if !nb.at(y, x) || !np_mask.at(y, x) || inst.at(y, x) != 0 {
                continue;
            }
            let mut best: Option<(i64, u32)> = None; // (squared distance, label)
            for dy in -radius..=radius {
                let ny = y as isize + dy;
                if ny < 0 || ny >= h as isize {
                    continue;
                }
                for dx in -radius..=radius {
                    let nx = x as isize + dx;
                    if nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let l = inst.at(ny as usize, nx as usize);
                    if l == 0 {
                        continue;
                    }
                    let d2 = (dy * dy + dx * dx) as i64;
                    if d2 as f64 > r2_max {
                        continue;
                    }
                    match best {
                        Some((bd2, bl)) if (d2, l) >= (bd2, bl) => {}
                        _ => best = Some((d2, l)),
                    }
                }
            }
            if let Some((_, l)) = best {
                out.set(y, x, l);
            }
        }
    }
    out
}

/// Per-instance classification result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceClass {
    pub id: u32,
    pub class: u8,
    pub pixel_count: u32,
}

/// Majority vote over classes 1..=6 inside each instance; background votes
/// are ignored unless unanimous, in which case the image-wide most frequent
/// nonzero class is used (fallback 1). Modal ties go to the smaller class.
pub fn classify_instances(inst: &InstanceMap, nt_pred: &[u8]) -> Vec<InstanceClass> {
    let k = inst.max_label() as usize;
    let mut hist = vec![[0u32; 7]; k + 1];
    let mut sizes = vec![0u32; k + 1];
    let mut global = [0u64; 7];
    for (i, &l) in inst.labels.iter().enumerate() {
        let c = nt_pred[i] as usize;
        global[c.min(6)] += 1;
        if l > 0 {
            hist[l as usize][c.min(6)] += 1;
            sizes[l as usize] += 1;
        }
    }
    let global_mode = (1..=6)
        .max_by_key(|&c| (global[c], std::cmp::Reverse(c)))
        .filter(|&c| global[c] > 0)
        .unwrap_or(1) as u8;
    (1..=k)
        .filter(|&l| sizes[l] > 0)
        .map(|l| {
            let modal = (1..=6)
                .max_by_key(|&c| (hist[l][c], std::cmp::Reverse(c)))
                .filter(|&c| hist[l][c] > 0);
            InstanceClass {
                id: l as u32,
                class: modal.map(|c| c as u8).unwrap_or(global_mode),
                pixel_count: sizes[l],
            }
        })
        .collect()
}

/// The full pipeline: argmax the mask logits, vote the boundary, split into
/// components, reattach boundary pixels, classify.
pub fn segment(
    np_logits: &Tensor,
    nt_logits: &Tensor,
    bd: &Tensor,
    cfg: &SegmentConfig,
) -> Result<(InstanceMap, Vec<InstanceClass>)> {
    let (n, c2, h, w) = np_logits.dims();
    if n != 1 || c2 != 2 {
        return Err(CoreError::shape(
            "segment",
            format!("np logits must be (1,2,H,W), got {:?}", np_logits.dims()),
        ));
    }
    if nt_logits.dims() != (1, 7, h, w) || bd.dims() != (1, 4, h, w) {
        return Err(CoreError::shape(
            "segment",
            "nt/bd output dims disagree with np logits",
        ));
    }

    let np_mask = np_mask_from_logits(np_logits);
    let nt_map = nt_argmax(nt_logits);
    let bd_map = bd_map_from_tensor(bd, 0);

    let components = match cfg.mode {
        PostMode::Bvm => {
            let nb = bvm(&bd_map, &np_mask, &cfg.bvm)?;
            let interior = Mask {
                h,
                w,
                data: np_mask
                    .data
                    .iter()
                    .zip(&nb.data)
                    .map(|(&f, &b)| f && !b)
                    .collect(),
            };
            let comps = connected_components(&interior);
            assign_boundary_pixels(&comps, &nb, &np_mask, cfg.r_max)
        }
        PostMode::Naive => connected_components(&np_mask),
    };
    let classes = classify_instances(&components, &nt_map);
    Ok((components, classes))
}

/// Foreground mask from 2-channel mask logits (argmax).
pub fn np_mask_from_logits(np_logits: &Tensor) -> Mask {
    let (_, _, h, w) = np_logits.dims();
    let bg = np_logits.plane(0, 0);
    let fg = np_logits.plane(0, 1);
    Mask {
        h,
        w,
        data: bg.iter().zip(fg).map(|(&b, &f)| f > b).collect(),
    }
}

/// Per-pixel argmax class from 7-channel type logits.
pub fn nt_argmax(nt_logits: &Tensor) -> Vec<u8> {
    let (_, c, h, w) = nt_logits.dims();
    let probs = softmax_channels(nt_logits);
    let mut out = vec![0u8; h * w];
    for i in 0..h * w {
        let mut best = 0usize;
        let mut bv = f32::NEG_INFINITY;
        for ci in 0..c {
            let v = probs.plane(0, ci)[i];
            if v > bv {
                bv = v;
                best = ci;
            }
        }
        out[i] = best as u8;
    }
    out
}

/// View one batch item of a (N,4,H,W) tensor as a BDMap.
pub fn bd_map_from_tensor(bd: &Tensor, batch: usize) -> BDMap {
    let (_, _, h, w) = bd.dims();
    let mut m = BDMap::new(h, w);
    for dir in 0..4 {
        m.data[dir * h * w..(dir + 1) * h * w].copy_from_slice(bd.plane(batch, dir));
    }
    m
}
