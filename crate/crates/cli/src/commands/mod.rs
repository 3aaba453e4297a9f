pub mod bench;
pub mod checkgrad;
pub mod eval;
pub mod fuse;
pub mod infer;
pub mod synth;
pub mod train;

use std::path::Path;

use repsnet_core::groundtruth::{dataset, SynthSample};

use crate::error::{CliError, Result};

/// Load the samples named by one split index file.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SynthSample>> {
    let index = dir.join(format!("{split}.txt"));
    let names = dataset::read_index(&index)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", index.display())))?;
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        out.push(dataset::load_sample(dir, name)?);
    }
    Ok(out)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}
