//! Segmentation and classification evaluation: DICE overlap, Aggregated
//! Jaccard Index, Panoptic Quality, and the class-averaged mPQ.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::groundtruth::{InstanceMap, Mask};

/// Per-image evaluation summary.
#[derive(Clone, Debug)]
pub struct SegReport {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    /// PQ per class 1..=6; None when the class is absent from both maps.
    pub per_class_pq: [Option<f64>; 6],
    pub mpq: f64,
    pub matches: Vec<(u32, u32, f64)>,
}

/// DICE overlap of two binary masks; 0 when both are empty.
pub fn dice(x: &Mask, y: &Mask) -> f64 {
    assert_eq!((x.h, x.w), (y.h, y.w), "dice: mask dims differ");
    let mut inter = 0usize;
    let mut xs = 0usize;
    let mut ys = 0usize;
    for (&a, &b) in x.data.iter().zip(&y.data) {
        if a && b {
            inter += 1;
        }
        if a {
            xs += 1;
        }
        if b {
            ys += 1;
        }
    }
    if xs + ys == 0 {
        0.0
    } else {
        2.0 * inter as f64 / (xs + ys) as f64
    }
}

/// Pixel counts per instance plus pairwise intersections.
struct OverlapTable {
    gt_sizes: Vec<usize>,   // index 1..=n
    pred_sizes: Vec<usize>, // index 1..=m
    inter: HashMap<(u32, u32), usize>,
}

fn overlaps(gt: &InstanceMap, pred: &InstanceMap) -> Result<OverlapTable> {
    if (gt.h, gt.w) != (pred.h, pred.w) {
        return Err(CoreError::shape(
            "metrics",
            format!("gt {}x{} vs pred {}x{}", gt.h, gt.w, pred.h, pred.w),
        ));
    }
    let mut t = OverlapTable {
        gt_sizes: vec![0; gt.max_label() as usize + 1],
        pred_sizes: vec![0; pred.max_label() as usize + 1],
        inter: HashMap::new(),
    };
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g > 0 {
            t.gt_sizes[g as usize] += 1;
        }
        if p > 0 {
            t.pred_sizes[p as usize] += 1;
        }
        if g > 0 && p > 0 {
            *t.inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok(t)
}

fn iou_of(t: &OverlapTable, g: u32, p: u32) -> f64 {
    let i = *t.inter.get(&(g, p)).unwrap_or(&0);
    if i == 0 {
        return 0.0;
    }
    let u = t.gt_sizes[g as usize] + t.pred_sizes[p as usize] - i;
    i as f64 / u as f64
}

/// Aggregated Jaccard Index. Each ground-truth instance is matched with the
/// prediction maximizing IoU (positive overlap required; ties to the smaller
/// prediction id); the denominator adds every prediction that was never a
/// best match.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let t = overlaps(gt, pred)?;
    let n = gt.max_label();
    let m = pred.max_label();
    let mut used = vec![false; m as usize + 1];
    let mut num = 0usize;
    let mut den = 0usize;
    for g in 1..=n {
        if t.gt_sizes[g as usize] == 0 {
            continue;
        }
        let mut best: Option<(f64, u32)> = None;
        for p in 1..=m {
            let iou = iou_of(&t, g, p);
            if iou > 0.0 {
                let better = match best {
                    None => true,
                    Some((biou, bp)) => iou > biou || (iou == biou && p < bp),
                };
                if better {
                    best = Some((iou, p));
                }
            }
        }
        match best {
            Some((_, p)) => {
                let i = *t.inter.get(&(g, p)).unwrap_or(&0);
                let u = t.gt_sizes[g as usize] + t.pred_sizes[p as usize] - i;
                num += i;
                den += u;
                used[p as usize] = true;
            }
            None => {
                den += t.gt_sizes[g as usize];
            }
        }
    }
    for p in 1..=m {
        if !used[p as usize] && t.pred_sizes[p as usize] > 0 {
            den += t.pred_sizes[p as usize];
        }
    }
    if den == 0 {
        return Ok(if num == 0 { 0.0 } else { 1.0 });
    }
    Ok(num as f64 / den as f64)
}

/// Detection counts and matched pairs behind a PQ value.
#[derive(Clone, Debug, Default)]
pub struct PqResult {
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub false_neg: usize,
    /// (gt id, pred id, IoU) for each match with IoU > 0.5.
    pub matches: Vec<(u32, u32, f64)>,
}

/// Panoptic Quality: detection F1 times the mean IoU over matched pairs.
/// Matching requires IoU strictly greater than 0.5, which makes the matching
/// one-to-one. PQ is 0 when there are no matches.
pub fn pq(gt: &InstanceMap, pred: &InstanceMap) -> Result<PqResult> {
    let t = overlaps(gt, pred)?;
    let n = gt.max_label();
    let m = pred.max_label();
    let gt_count = (1..=n).filter(|&g| t.gt_sizes[g as usize] > 0).count();
    let pred_count = (1..=m).filter(|&p| t.pred_sizes[p as usize] > 0).count();

    let mut matches = Vec::new();
    let mut iou_sum = 0.0f64;
    for (&(g, p), _) in t.inter.iter() {
        let iou = iou_of(&t, g, p);
        if iou > 0.5 {
            matches.push((g, p, iou));
            iou_sum += iou;
        }
    }
    matches.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let tp = matches.len();
    let fp = pred_count - tp;
    let false_neg = gt_count - tp;
    let pq = if tp == 0 {
        0.0
    } else {
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + false_neg as f64);
        f1 * (iou_sum / tp as f64)
    };
    Ok(PqResult {
        pq,
        tp,
        fp,
        false_neg,
        matches,
    })
}

fn restrict_to_class(inst: &InstanceMap, classes: &[u8], class: u8) -> InstanceMap {
    let mut out = InstanceMap::new(inst.h, inst.w);
    for (o, &l) in out.labels.iter_mut().zip(&inst.labels) {
        if l > 0 && classes.get(l as usize - 1).copied() == Some(class) {
            *o = l;
        }
    }
    out
}

/// Multi-class PQ plus the binary metrics, as one report. `gt_classes` and
/// `pred_classes` give the class of instance id i at index i-1. Classes
/// absent from both maps are excluded from the mPQ mean.
pub fn mpq(
    gt: &InstanceMap,
    gt_classes: &[u8],
    pred: &InstanceMap,
    pred_classes: &[u8],
) -> Result<SegReport> {
    let dice_v = dice(&gt.foreground(), &pred.foreground());
    let aji_v = aji(gt, pred)?;
    let pq_all = pq(gt, pred)?;

    let mut per_class_pq = [None; 6];
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for class in 1..=6u8 {
        let g = restrict_to_class(gt, gt_classes, class);
        let p = restrict_to_class(pred, pred_classes, class);
        if g.instance_count() == 0 && p.instance_count() == 0 {
            continue;
        }
        let r = pq(&g, &p)?;
        per_class_pq[class as usize - 1] = Some(r.pq);
        sum += r.pq;
        count += 1;
    }
    let mpq = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(SegReport {
        dice: dice_v,
        aji: aji_v,
        pq: pq_all.pq,
        per_class_pq,
        mpq,
        matches: pq_all.matches,
    })
}
