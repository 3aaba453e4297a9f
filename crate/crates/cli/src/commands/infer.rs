use std::path::Path;

use repsnet_core::groundtruth::dataset;
use repsnet_core::network::{Mode, RepSNet};
use repsnet_core::postprocess::segment;
use repsnet_core::tensor::io::Checkpoint;
use repsnet_core::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::overlay;

/// Image basenames: the index file when present, otherwise every *.png that
/// is not a mask, prediction or overlay artifact.
fn image_names(dir: &Path) -> Result<Vec<String>> {
    let index = dir.join("index.txt");
    if index.exists() {
        return dataset::read_index(&index).map_err(CliError::from);
    }
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let fname = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = fname.strip_suffix(".png") {
            if ["_inst", "_types", "_pred", "_overlay"]
                .iter()
                .any(|sfx| stem.ends_with(sfx))
            {
                continue;
            }
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn load_image_tensor(path: &Path) -> Result<(Tensor, Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.into_raw();
    let t = Tensor::from_fn(1, 3, h, w, |_, c, y, x| rgb[(y * w + x) * 3 + c] as f32 / 255.0);
    Ok((t, rgb, h, w))
}

fn write_classes_csv(path: &Path, classes: &[repsnet_core::postprocess::InstanceClass]) -> Result<()> {
    let mut text = String::from("instance_id,class,pixel_count\n");
    for c in classes {
        text.push_str(&format!("{},{},{}\n", c.id, c.class, c.pixel_count));
    }
    std::fs::write(path, text)?;
    Ok(())
}

struct Job {
    name: String,
}

fn process_one(
    net: &RepSNet,
    cfg: &RunConfig,
    naive: bool,
    want_overlay: bool,
    images: &Path,
    out: &Path,
    job: &Job,
) -> Result<()> {
    let (x, rgb, h, w) = load_image_tensor(&images.join(format!("{}.png", job.name)))?;
    let outputs = net.forward(&x)?;
    let seg_cfg = cfg.segment_config(naive);
    let (inst, classes) = segment(&outputs.np_logits, &outputs.nt_logits, &outputs.bd, &seg_cfg)?;
    dataset::save_instance_map(&out.join(format!("{}_pred.png", job.name)), &inst)?;
    write_classes_csv(&out.join(format!("{}_classes.csv", job.name)), &classes)?;
    if want_overlay {
        overlay::save_overlay(
            &out.join(format!("{}_overlay.png", job.name)),
            &rgb,
            h,
            w,
            &inst,
            &classes,
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    fused: bool,
    naive: bool,
    want_overlay: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", checkpoint.display())))?;
    let mut net = RepSNet::from_checkpoint(&ck)?;
    if fused && net.mode == Mode::Train {
        net = net.reparameterize()?;
    }
    if !fused && net.mode == Mode::Fused {
        return Err(CliError::Validation(
            "checkpoint is fused; rerun with --mode fused".into(),
        ));
    }
    super::create_dir(out)?;
    let names = image_names(images)?;
    if names.is_empty() {
        return Err(CliError::Usage(format!("no images found in {}", images.display())));
    }
    let jobs: Vec<Job> = names.into_iter().map(|name| Job { name }).collect();

    if cfg.threads <= 1 {
        for job in &jobs {
            process_one(&net, cfg, naive, want_overlay, images, out, job)?;
        }
    } else {
        // deterministic regardless of thread count: each image is independent
        let errors = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for chunk in jobs.chunks(jobs.len().div_ceil(cfg.threads)) {
                let net = &net;
                let errors = &errors;
                scope.spawn(move || {
                    for job in chunk {
                        if let Err(e) = process_one(net, cfg, naive, want_overlay, images, out, job)
                        {
                            errors.lock().unwrap().push(format!("{}: {e}", job.name));
                        }
                    }
                });
            }
        });
        let errors = errors.into_inner().unwrap();
        if !errors.is_empty() {
            return Err(CliError::Validation(errors.join("; ")));
        }
    }
    println!("segmented {} images into {}", jobs.len(), out.display());
    Ok(())
}
