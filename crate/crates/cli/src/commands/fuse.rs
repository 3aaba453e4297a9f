use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repsnet_core::network::{flops_analytic, param_count_analytic, Mode, RepSNet};
use repsnet_core::tensor::io::Checkpoint;
use repsnet_core::Tensor;

use crate::error::{CliError, Result};

const EQUIVALENCE_TOLERANCE: f32 = 1e-3;
const VERIFY_INPUTS: usize = 5;

pub fn run(input: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", input.display())))?;
    let mut net = RepSNet::from_checkpoint(&ck)?;
    let mut fused = net.reparameterize()?;

    // verify output equivalence on random inputs before writing anything
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let d = net.config.divisor();
    let (h, w) = (d * 8, d * 8);
    let mut worst = 0.0f32;
    for _ in 0..VERIFY_INPUTS {
        let x = Tensor::from_fn(1, 3, h, w, |_, _, _, _| rng.random_range(0.0..1.0f32));
        let a = net.forward(&x)?;
        let b = fused.forward(&x)?;
        worst = worst
            .max(a.np_logits.max_abs_diff(&b.np_logits))
            .max(a.nt_logits.max_abs_diff(&b.nt_logits))
            .max(a.bd.max_abs_diff(&b.bd));
    }
    if worst > EQUIVALENCE_TOLERANCE {
        return Err(CliError::Validation(format!(
            "fusion equivalence check failed: max abs output diff {worst:.3e} > {EQUIVALENCE_TOLERANCE:.0e}; nothing written"
        )));
    }

    let before = net.param_count();
    let after = fused.param_count();
    let analytic_before = param_count_analytic(&net.config, net.mode);
    let analytic_after = param_count_analytic(&fused.config, Mode::Fused);
    fused.to_checkpoint().save(output)?;
    println!("fusion verified on {VERIFY_INPUTS} random inputs (max abs diff {worst:.3e})");
    println!(
        "parameters: {before} -> {after} ({:.2}% of original; analytic {analytic_before} -> {analytic_after})",
        100.0 * after as f64 / before as f64
    );
    println!(
        "analytic FLOPs per {h}x{w} image: {} -> {}",
        flops_analytic(&net.config, net.mode, h, w),
        flops_analytic(&fused.config, Mode::Fused, h, w)
    );
    if before == after {
        println!("input was already fused; output is a verified copy");
    }
    Ok(())
}
