use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use repsnet_core::groundtruth::{dataset, InstanceMap};
use repsnet_core::metrics::mpq;

use crate::error::{CliError, Result};

fn stems_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
    {
        let fname = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = fname.strip_suffix(suffix) {
            out.insert(stem.to_string());
        }
    }
    Ok(out)
}

/// Ground-truth per-instance classes: the type of the instance's pixels.
fn gt_classes(inst: &InstanceMap, types: &[u8]) -> Vec<u8> {
    let k = inst.max_label() as usize;
    let mut hist = vec![[0u32; 7]; k + 1];
    for (i, &l) in inst.labels.iter().enumerate() {
        if l > 0 {
            hist[l as usize][types[i].min(6) as usize] += 1;
        }
    }
    (1..=k)
        .map(|l| {
            (1..=6)
                .max_by_key(|&c| (hist[l][c], std::cmp::Reverse(c)))
                .filter(|&c| hist[l][c] > 0)
                .unwrap_or(1) as u8
        })
        .collect()
}

fn read_pred_classes(path: &Path, max_label: u32) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut classes = vec![1u8; max_label as usize];
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let id: u32 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Validation(format!("bad classes row: {line}")))?;
        let class: u8 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Validation(format!("bad classes row: {line}")))?;
        if id >= 1 && id <= max_label {
            classes[id as usize - 1] = class;
        }
    }
    Ok(classes)
}

pub fn run(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Result<()> {
    let gt_names = stems_with_suffix(gt_dir, "_inst.png")?;
    let pred_names = stems_with_suffix(pred_dir, "_pred.png")?;
    let matched: Vec<&String> = gt_names.intersection(&pred_names).collect();
    let missing_pred: Vec<&String> = gt_names.difference(&pred_names).collect();
    let missing_gt: Vec<&String> = pred_names.difference(&gt_names).collect();

    if matched.is_empty() {
        return Err(CliError::Validation("no matching basenames between pred and gt".into()));
    }

    let mut csv = String::from("name,dice,aji,pq,mpq,pq_c1,pq_c2,pq_c3,pq_c4,pq_c5,pq_c6\n");
    let mut sums = [0.0f64; 4];
    for name in &matched {
        let gt_inst = dataset::load_instance_map(&gt_dir.join(format!("{name}_inst.png")))?;
        let gt_types = dataset::load_type_map(&gt_dir.join(format!("{name}_types.png")))?;
        let pred_inst = dataset::load_instance_map(&pred_dir.join(format!("{name}_pred.png")))?;
        let g_classes = gt_classes(&gt_inst, &gt_types.types);
        let p_classes = read_pred_classes(
            &pred_dir.join(format!("{name}_classes.csv")),
            pred_inst.max_label(),
        )?;
        let report = mpq(&gt_inst, &g_classes, &pred_inst, &p_classes)?;
        let per_class: Vec<String> = report
            .per_class_pq
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect();
        let _ = writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.6},{}",
            report.dice,
            report.aji,
            report.pq,
            report.mpq,
            per_class.join(",")
        );
        sums[0] += report.dice;
        sums[1] += report.aji;
        sums[2] += report.pq;
        sums[3] += report.mpq;
    }
    let k = matched.len() as f64;
    let summary = format!(
        "images={}\nDICE={:.6}\nAJI={:.6}\nPQ={:.6}\nmPQ={:.6}\n",
        matched.len(),
        sums[0] / k,
        sums[1] / k,
        sums[2] / k,
        sums[3] / k
    );
    let out_dir = out.unwrap_or(pred_dir);
    super::create_dir(out_dir)?;
    std::fs::write(out_dir.join("per_image.csv"), &csv)?;
    std::fs::write(out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");

    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("basename mismatches skipped:");
        for n in missing_pred {
            let _ = write!(msg, " {n} (no prediction)");
        }
        for n in missing_gt {
            let _ = write!(msg, " {n} (no ground truth)");
        }
        return Err(CliError::Validation(msg));
    }
    Ok(())
}
