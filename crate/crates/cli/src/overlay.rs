//! Instance-boundary overlays: the input image with each predicted
//! instance's inner boundary drawn in its class color.

use std::path::Path;

use image::{Rgb, RgbImage};

use repsnet_core::groundtruth::{inner_boundary, InstanceMap};
use repsnet_core::postprocess::InstanceClass;

use crate::error::{CliError, Result};

/// One bright color per class 1..=6.
const CLASS_PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 200, 60],
    [70, 90, 235],
    [235, 200, 40],
    [200, 60, 220],
    [40, 210, 210],
];

pub fn save_overlay(
    path: &Path,
    rgb: &[u8],
    h: usize,
    w: usize,
    inst: &InstanceMap,
    classes: &[InstanceClass],
) -> Result<()> {
    let mut class_of = vec![1u8; inst.max_label() as usize + 1];
    for c in classes {
        if (c.id as usize) < class_of.len() {
            class_of[c.id as usize] = c.class;
        }
    }
    let boundary = inner_boundary(inst);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (xu, yu) = (x as usize, y as usize);
        if boundary.at(yu, xu) {
            let class = class_of[inst.at(yu, xu) as usize].clamp(1, 6);
            Rgb(CLASS_PALETTE[class as usize - 1])
        } else {
            let i = (yu * w + xu) * 3;
            Rgb([rgb[i], rgb[i + 1], rgb[i + 2]])
        }
    });
    img.save(path)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}
