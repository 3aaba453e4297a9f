use std::path::Path;

use repsnet_core::groundtruth::{dataset, synth_sample};

use crate::config::RunConfig;
use crate::error::Result;

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    super::create_dir(out)?;
    let spec = cfg.synth_spec();
    let mut names = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let name = format!("sample_{i:05}");
        let sample = synth_sample(cfg.seed.wrapping_add(i as u64), &spec)?;
        dataset::save_sample(out, &name, &sample)?;
        names.push(name);
    }
    dataset::write_index(&out.join("index.txt"), &names)?;
    let (n_train, n_val, _) = dataset::split_counts(names.len());
    dataset::write_index(&out.join("train.txt"), &names[..n_train])?;
    dataset::write_index(&out.join("val.txt"), &names[n_train..n_train + n_val])?;
    dataset::write_index(&out.join("test.txt"), &names[n_train + n_val..])?;
    std::fs::write(out.join("run.log"), cfg.echo())?;
    println!(
        "wrote {} samples to {} (train {} / val {} / test {})",
        names.len(),
        out.display(),
        n_train,
        n_val,
        names.len() - n_train - n_val
    );
    Ok(())
}
