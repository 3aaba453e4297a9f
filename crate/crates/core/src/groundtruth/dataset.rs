//! On-disk dataset layout: per sample an 8-bit RGB image PNG, a 16-bit
//! grayscale instance-map PNG and an 8-bit grayscale type-map PNG, plus
//! plain-text index files listing sample basenames.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{CoreError, Result};
use crate::groundtruth::{InstanceMap, SynthSample, TypeMap};

pub fn image_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.png"))
}

pub fn inst_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_inst.png"))
}

pub fn types_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_types.png"))
}

pub fn save_instance_map(path: &Path, inst: &InstanceMap) -> Result<()> {
    if inst.max_label() > u16::MAX as u32 {
        return Err(CoreError::InvalidConfig(
            "instance labels exceed 16-bit PNG range".into(),
        ));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(
        inst.w as u32,
        inst.h as u32,
        |x, y| Luma([inst.at(y as usize, x as usize) as u16]),
    );
    img.save(path)
        .map_err(|e| CoreError::Format(format!("writing {}: {e}", path.display())))
}

pub fn load_instance_map(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("reading {}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut inst = InstanceMap::new(h, w);
    for (x, y, p) in img.enumerate_pixels() {
        inst.set(y as usize, x as usize, p.0[0] as u32);
    }
    Ok(inst)
}

pub fn save_type_map(path: &Path, types: &TypeMap) -> Result<()> {
    let img = GrayImage::from_fn(types.w as u32, types.h as u32, |x, y| {
        Luma([types.at(y as usize, x as usize)])
    });
    img.save(path)
        .map_err(|e| CoreError::Format(format!("writing {}: {e}", path.display())))
}

pub fn load_type_map(path: &Path) -> Result<TypeMap> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("reading {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut types = TypeMap::new(h, w);
    for (x, y, p) in img.enumerate_pixels() {
        types.types[y as usize * w + x as usize] = p.0[0];
    }
    Ok(types)
}

pub fn save_sample(dir: &Path, name: &str, sample: &SynthSample) -> Result<()> {
    let img = RgbImage::from_raw(sample.w as u32, sample.h as u32, sample.rgb.clone())
        .ok_or_else(|| CoreError::Format("rgb buffer does not match dims".into()))?;
    img.save(image_path(dir, name))
        .map_err(|e| CoreError::Format(format!("writing image: {e}")))?;
    save_instance_map(&inst_path(dir, name), &sample.inst)?;
    save_type_map(&types_path(dir, name), &sample.types)
}

pub fn load_sample(dir: &Path, name: &str) -> Result<SynthSample> {
    let img = image::open(image_path(dir, name))
        .map_err(|e| CoreError::Format(format!("reading image {name}: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let inst = load_instance_map(&inst_path(dir, name))?;
    let types = load_type_map(&types_path(dir, name))?;
    if (inst.h, inst.w) != (h, w) || (types.h, types.w) != (h, w) {
        return Err(CoreError::shape(
            "load_sample",
            format!("map dims disagree with image for {name}"),
        ));
    }
    Ok(SynthSample {
        h,
        w,
        rgb: img.into_raw(),
        inst,
        types,
    })
}

/// Split sizes in the 7:1:2 train/val/test ratio.
pub fn split_counts(total: usize) -> (usize, usize, usize) {
    let train = total * 7 / 10;
    let val = total / 10;
    (train, val, total - train - val)
}

pub fn write_index(path: &Path, names: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for n in names {
        writeln!(f, "{n}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{synth_sample, SynthSpec};

    #[test]
    fn split_is_7_1_2() {
        assert_eq!(split_counts(100), (70, 10, 20));
        assert_eq!(split_counts(10), (7, 1, 2));
        let (a, b, c) = split_counts(203);
        assert_eq!(a + b + c, 203);
    }

    #[test]
    fn sample_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_sample(77, &SynthSpec::default()).unwrap();
        save_sample(dir.path(), "sample_00000", &s).unwrap();
        let back = load_sample(dir.path(), "sample_00000").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let p = dir.path().join("index.txt");
        write_index(&p, &names).unwrap();
        assert_eq!(read_index(&p).unwrap(), names);
    }
}
