use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repsnet_core::network::{flops_analytic, param_count_analytic, Mode, RepSNet};
use repsnet_core::tensor::io::Checkpoint;
use repsnet_core::Tensor;

use crate::error::{CliError, Result};

pub struct BenchReport {
    pub train_ms: f64,
    pub fused_ms: f64,
    pub train_params: usize,
    pub fused_params: usize,
    pub train_flops: u64,
    pub fused_flops: u64,
}

pub fn run(checkpoint: &Path, runs: usize, height: usize, width: usize, seed: u64) -> Result<BenchReport> {
    let ck = Checkpoint::load(checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", checkpoint.display())))?;
    let mut net = RepSNet::from_checkpoint(&ck)?;
    if net.mode == Mode::Fused {
        return Err(CliError::Validation(
            "bench compares training-mode and fused execution; give a training-mode checkpoint".into(),
        ));
    }
    let d = net.config.divisor();
    if height % d != 0 || width % d != 0 {
        return Err(CliError::Usage(format!(
            "bench size {height}x{width} must be divisible by {d}"
        )));
    }
    let mut fused = net.reparameterize()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = (0..runs.max(1))
        .map(|_| Tensor::from_fn(1, 3, height, width, |_, _, _, _| rng.random_range(0.0..1.0f32)))
        .collect();

    // warm up one pass each, then time identical inputs
    net.forward(&inputs[0])?;
    fused.forward(&inputs[0])?;
    let t0 = Instant::now();
    for x in &inputs {
        net.forward(x)?;
    }
    let train_ms = t0.elapsed().as_secs_f64() * 1000.0 / inputs.len() as f64;
    let t1 = Instant::now();
    for x in &inputs {
        fused.forward(x)?;
    }
    let fused_ms = t1.elapsed().as_secs_f64() * 1000.0 / inputs.len() as f64;

    let report = BenchReport {
        train_ms,
        fused_ms,
        train_params: net.param_count(),
        fused_params: fused.param_count(),
        train_flops: flops_analytic(&net.config, Mode::Train, height, width),
        fused_flops: flops_analytic(&net.config, Mode::Fused, height, width),
    };
    let analytic_train = param_count_analytic(&net.config, Mode::Train);
    let analytic_fused = param_count_analytic(&net.config, Mode::Fused);
    println!("benchmark on {} {height}x{width} images:", inputs.len());
    println!("{:<14} {:>14} {:>14} {:>14}", "mode", "ms/image", "params", "flops");
    println!(
        "{:<14} {:>14.2} {:>14} {:>14}",
        "multi-branch", report.train_ms, report.train_params, report.train_flops
    );
    println!(
        "{:<14} {:>14.2} {:>14} {:>14}",
        "fused", report.fused_ms, report.fused_params, report.fused_flops
    );
    println!(
        "param ratio {:.4} (analytic {:.4}), flop ratio {:.4}",
        report.fused_params as f64 / report.train_params as f64,
        analytic_fused as f64 / analytic_train as f64,
        report.fused_flops as f64 / report.train_flops as f64
    );
    if report.train_params != analytic_train || report.fused_params != analytic_fused {
        return Err(CliError::Validation(
            "measured parameter counts disagree with the analytic formula".into(),
        ));
    }
    Ok(report)
}
