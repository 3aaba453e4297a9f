use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repsnet_core::network::{
    train_epoch, validate_loss, AdamOpt, PlateauScheduler, RepSNet, TrainSettings,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct TrainOptions {
    pub multi_branch: bool,
    pub rep_upsample: bool,
    pub nb_loss: bool,
    pub overfit_one: bool,
    pub overfit_steps: usize,
}

pub fn run(cfg: &RunConfig, data: &Path, out: &Path, options: &TrainOptions) -> Result<()> {
    super::create_dir(out)?;
    let train_samples = super::load_split(data, "train")?;
    let val_samples = super::load_split(data, "val")?;
    if train_samples.is_empty() {
        return Err(CliError::Validation("training split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net_config = cfg.network_config(options.multi_branch, options.rep_upsample);
    let mut net = RepSNet::new(net_config, &mut rng)?;
    let weights = cfg.loss_weights(options.nb_loss);
    let iso = cfg.iso_config();
    let settings = TrainSettings {
        batch_size: cfg.batch_size,
        augment: cfg.augment,
        tau: cfg.tau,
    };

    let mut log = String::from("epoch,L_np,L_nt,L_bd,L_nb,total,val_total,lr\n");
    let best_path = out.join("checkpoint_best.ckpt");
    let last_path = out.join("checkpoint_last.ckpt");
    std::fs::write(out.join("run.log"), cfg.echo())?;

    if options.overfit_one {
        // single-sample overfit mode: fixed step count, no validation
        let one = vec![train_samples[0].clone()];
        let mut opt = AdamOpt::new(cfg.lr);
        let one_settings = TrainSettings {
            batch_size: 1,
            augment: false,
            tau: cfg.tau,
        };
        let mut first = None;
        let mut last = 0.0;
        for step in 0..options.overfit_steps {
            let stats = train_epoch(&mut net, &one, &mut opt, &weights, &iso, &one_settings, &mut rng)?;
            first.get_or_insert(stats.losses.total);
            last = stats.losses.total;
            if step % 20 == 0 || step + 1 == options.overfit_steps {
                let _ = writeln!(
                    log,
                    "{step},{:.6},{:.6},{:.6},{:.6},{:.6},,{}",
                    stats.losses.np, stats.losses.nt, stats.losses.bd, stats.losses.nb,
                    stats.losses.total, opt.lr
                );
            }
        }
        net.to_checkpoint().save(&best_path)?;
        std::fs::write(out.join("loss_log.csv"), &log)?;
        let first = first.unwrap_or(0.0);
        println!(
            "overfit-one: initial loss {first:.4}, final loss {last:.4} ({:.1}% of initial)",
            100.0 * last / first.max(1e-12)
        );
        return Ok(());
    }

    let mut opt = AdamOpt::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.plateau_patience, cfg.lr_factor, cfg.lr_floor);
    let mut best_val = f64::INFINITY;
    // epochs = 0 still emits the initial weights
    net.to_checkpoint().save(&best_path)?;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&mut net, &train_samples, &mut opt, &weights, &iso, &settings, &mut rng)
            .map_err(CliError::from)?;
        let val = validate_loss(&net, &val_samples, &weights, &iso, cfg.tau)?;
        if !val.total.is_finite() {
            return Err(CliError::Numeric("validation loss is not finite".into()));
        }
        if val.total < best_val {
            best_val = val.total;
            net.to_checkpoint().save(&best_path)?;
        }
        opt.lr = sched.observe(val.total, opt.lr);
        let _ = writeln!(
            log,
            "{epoch},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            stats.losses.np, stats.losses.nt, stats.losses.bd, stats.losses.nb,
            stats.losses.total, val.total, opt.lr
        );
        println!(
            "epoch {epoch}: train {:.4} val {:.4} lr {}",
            stats.losses.total, val.total, opt.lr
        );
    }
    net.to_checkpoint().save(&last_path)?;
    std::fs::write(out.join("loss_log.csv"), &log)?;
    println!("best validation loss {best_val:.4}; checkpoints in {}", out.display());
    Ok(())
}
