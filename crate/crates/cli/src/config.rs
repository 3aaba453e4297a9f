//! Flat key=value run configuration. Unknown keys are rejected; the full
//! effective configuration is echoed into run logs for reproducibility.

use std::fmt::Write as _;
use std::path::Path;

use repsnet_core::groundtruth::SynthSpec;
use repsnet_core::losses::{IsoheightConfig, LossWeights};
use repsnet_core::network::RepSNetConfig;
use repsnet_core::postprocess::{BvmConfig, SegmentConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub overlap_prob: f64,
    pub num_blocks: usize,
    pub units_per_block: Vec<usize>,
    pub base_width: usize,
    pub lambda_np: f64,
    pub lambda_nt: f64,
    pub lambda_bd: f64,
    pub lambda_nb: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub lr_floor: f64,
    pub augment: bool,
    pub e_t: u32,
    pub tau: u8,
    pub nb_e: f64,
    pub r_max: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            height: 64,
            width: 64,
            samples: 200,
            nuclei_min: 3,
            nuclei_max: 8,
            radius_min: 4.0,
            radius_max: 9.0,
            overlap_prob: 0.3,
            num_blocks: 4,
            units_per_block: vec![2, 2, 3, 2],
            base_width: 16,
            lambda_np: 1.0,
            lambda_nt: 1.0,
            lambda_bd: 1.0,
            lambda_nb: 1.0,
            lr: 1e-4,
            epochs: 10,
            batch_size: 4,
            plateau_patience: 5,
            lr_factor: 0.5,
            lr_floor: 1e-7,
            augment: true,
            e_t: 3,
            tau: 5,
            nb_e: 1.0,
            r_max: 10.0,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("config line {}: expected key=value, got \"{raw}\"", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| {
                CliError::Validation(format!("config line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "height" => self.height = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "samples" => self.samples = p(key, value)?,
            "nuclei_min" => self.nuclei_min = p(key, value)?,
            "nuclei_max" => self.nuclei_max = p(key, value)?,
            "radius_min" => self.radius_min = p(key, value)?,
            "radius_max" => self.radius_max = p(key, value)?,
            "overlap_prob" => self.overlap_prob = p(key, value)?,
            "num_blocks" => self.num_blocks = p(key, value)?,
            "units_per_block" => {
                self.units_per_block = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("bad value for units_per_block: {e}"))?;
            }
            "base_width" => self.base_width = p(key, value)?,
            "lambda_np" => self.lambda_np = p(key, value)?,
            "lambda_nt" => self.lambda_nt = p(key, value)?,
            "lambda_bd" => self.lambda_bd = p(key, value)?,
            "lambda_nb" => self.lambda_nb = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "plateau_patience" => self.plateau_patience = p(key, value)?,
            "lr_factor" => self.lr_factor = p(key, value)?,
            "lr_floor" => self.lr_floor = p(key, value)?,
            "augment" => self.augment = p(key, value)?,
            "e_t" => self.e_t = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "nb_e" => self.nb_e = p(key, value)?,
            "r_max" => self.r_max = p(key, value)?,
            "threads" => self.threads = p(key, value)?,
            other => return Err(format!("unknown config key \"{other}\"")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CliError::Validation("batch_size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Validation("threads must be >= 1".into()));
        }
        self.network_config(true, true)
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.synth_spec()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.iso_config()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Every effective setting, one key=value per line.
    pub fn echo(&self) -> String {
        let upb: Vec<String> = self.units_per_block.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "nuclei_min={}", self.nuclei_min);
        let _ = writeln!(s, "nuclei_max={}", self.nuclei_max);
        let _ = writeln!(s, "radius_min={}", self.radius_min);
        let _ = writeln!(s, "radius_max={}", self.radius_max);
        let _ = writeln!(s, "overlap_prob={}", self.overlap_prob);
        let _ = writeln!(s, "num_blocks={}", self.num_blocks);
        let _ = writeln!(s, "units_per_block={}", upb.join(","));
        let _ = writeln!(s, "base_width={}", self.base_width);
        let _ = writeln!(s, "lambda_np={}", self.lambda_np);
        let _ = writeln!(s, "lambda_nt={}", self.lambda_nt);
        let _ = writeln!(s, "lambda_bd={}", self.lambda_bd);
        let _ = writeln!(s, "lambda_nb={}", self.lambda_nb);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "plateau_patience={}", self.plateau_patience);
        let _ = writeln!(s, "lr_factor={}", self.lr_factor);
        let _ = writeln!(s, "lr_floor={}", self.lr_floor);
        let _ = writeln!(s, "augment={}", self.augment);
        let _ = writeln!(s, "e_t={}", self.e_t);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "nb_e={}", self.nb_e);
        let _ = writeln!(s, "r_max={}", self.r_max);
        let _ = writeln!(s, "threads={}", self.threads);
        s
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            height: self.height,
            width: self.width,
            nuclei_min: self.nuclei_min,
            nuclei_max: self.nuclei_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            overlap_prob: self.overlap_prob,
            class_weights: [1.0; 6],
        }
    }

    pub fn network_config(&self, multi_branch: bool, rep_upsample: bool) -> RepSNetConfig {
        RepSNetConfig {
            num_blocks: self.num_blocks,
            units_per_block: self.units_per_block.clone(),
            base_width: self.base_width,
            class_count: 7,
            bd_channels: 4,
            multi_branch,
            rep_upsample,
        }
    }

    pub fn loss_weights(&self, nb_enabled: bool) -> LossWeights {
        LossWeights {
            np: self.lambda_np,
            nt: self.lambda_nt,
            bd: self.lambda_bd,
            nb: if nb_enabled { self.lambda_nb } else { 0.0 },
        }
    }

    pub fn iso_config(&self) -> IsoheightConfig {
        IsoheightConfig {
            tau: self.tau,
            e: self.nb_e,
        }
    }

    pub fn segment_config(&self, naive: bool) -> SegmentConfig {
        SegmentConfig {
            bvm: BvmConfig { e_t: self.e_t },
            r_max: self.r_max,
            mode: if naive {
                repsnet_core::postprocess::PostMode::Naive
            } else {
                repsnet_core::postprocess::PostMode::Bvm
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_echo() {
        let cfg = RunConfig::default();
        let echoed = cfg.echo();
        let parsed = RunConfig::parse(&echoed).unwrap();
        assert_eq!(parsed.echo(), echoed);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("sneaky=1\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed=7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
