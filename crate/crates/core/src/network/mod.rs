//! The segmentation network: a shared encoder of re-parameterizable units and
//! two independent decoders with additive skip connections, ending in three
//! heads (mask, type, boundary distance).

mod train;

pub use train::{
    build_batch, derive_targets, train_epoch, validate_loss, AdamOpt, EpochStats,
    PlateauScheduler, TrainSettings,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::reparam::{
    fold_bn_into_conv, fold_bn_into_deconv, fuse_repupsample, fuse_repvgg, FusedConv, FusedDeconv,
    RepUpsampleUnit, RepVggUnit,
};
use crate::tensor::io::{Checkpoint, TensorRecord};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, deconv2d_backward,
    deconv2d_forward, relu_backward, relu_forward, BatchNormParams, ConvParams, DeconvParams,
    Tensor,
};

/// Network architecture settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepSNetConfig {
    pub num_blocks: usize,
    pub units_per_block: Vec<usize>,
    pub base_width: usize,
    pub class_count: usize,
    pub bd_channels: usize,
    /// Multi-branch encoder units; false trains plain 3x3 conv+BN units.
    pub multi_branch: bool,
    /// Dual-branch upsampling; false trains plain 3x3 deconv+BN units.
    pub rep_upsample: bool,
}

impl Default for RepSNetConfig {
    fn default() -> Self {
        RepSNetConfig {
            num_blocks: 4,
            units_per_block: vec![2, 2, 3, 2],
            base_width: 16,
            class_count: 7,
            bd_channels: 4,
            multi_branch: true,
            rep_upsample: true,
        }
    }
}

impl RepSNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.units_per_block.len() != self.num_blocks {
            return Err(CoreError::InvalidConfig(format!(
                "units_per_block length {} != num_blocks {}",
                self.units_per_block.len(),
                self.num_blocks
            )));
        }
        if self.units_per_block.iter().any(|&u| u == 0) {
            return Err(CoreError::InvalidConfig("every block needs >= 1 unit".into()));
        }
        if self.base_width == 0 {
            return Err(CoreError::InvalidConfig("base_width must be >= 1".into()));
        }
        if self.class_count != 7 || self.bd_channels != 4 {
            return Err(CoreError::InvalidConfig(
                "this pipeline is fixed at 7 classes and 4 distance channels".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of encoder block `i`.
    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    /// Spatial divisibility the input must satisfy: the first block keeps
    /// resolution, each later block halves it.
    pub fn divisor(&self) -> usize {
        1 << (self.num_blocks - 1)
    }

    pub fn to_text(&self, mode: Mode) -> String {
        let upb: Vec<String> = self.units_per_block.iter().map(|u| u.to_string()).collect();
        format!(
            "num_blocks={}\nunits_per_block={}\nbase_width={}\nclass_count={}\nbd_channels={}\nmulti_branch={}\nrep_upsample={}\nmode={}\n",
            self.num_blocks,
            upb.join(","),
            self.base_width,
            self.class_count,
            self.bd_channels,
            self.multi_branch,
            self.rep_upsample,
            match mode {
                Mode::Train => "train",
                Mode::Fused => "fused",
            }
        )
    }

    pub fn from_text(text: &str) -> Result<(Self, Mode)> {
        let mut cfg = RepSNetConfig::default();
        let mut mode = Mode::Train;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Format(format!("bad config line: {line}")))?;
            let bad = |e: String| CoreError::Format(format!("bad {key}: {e}"));
            match key {
                "num_blocks" => cfg.num_blocks = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "units_per_block" => {
                    cfg.units_per_block = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(e.to_string()))?;
                }
                "base_width" => cfg.base_width = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "class_count" => cfg.class_count = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "bd_channels" => cfg.bd_channels = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "multi_branch" => cfg.multi_branch = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
                "rep_upsample" => cfg.rep_upsample = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
                "mode" => {
                    mode = match value {
                        "train" => Mode::Train,
                        "fused" => Mode::Fused,
                        other => return Err(CoreError::Format(format!("bad mode {other}"))),
                    }
                }
                other => return Err(CoreError::Format(format!("unknown config key {other}"))),
            }
        }
        cfg.validate()?;
        Ok((cfg, mode))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Fused,
}

/// One encoder slot.
#[derive(Clone, Debug)]
pub enum EncUnit {
    Multi(RepVggUnit),
    Plain { conv: ConvParams, bn: BatchNormParams },
    Fused(FusedConv),
}

/// One decoder upsampling slot.
#[derive(Clone, Debug)]
pub enum UpUnit {
    Multi(RepUpsampleUnit),
    Plain { deconv: DeconvParams, bn: BatchNormParams },
    Fused(FusedDeconv),
}

#[derive(Clone, Debug)]
pub struct DecoderBranch {
    pub ups: Vec<UpUnit>,
    pub projs: Vec<ConvParams>,
}

#[derive(Clone, Debug)]
pub struct RepSNet {
    pub config: RepSNetConfig,
    pub mode: Mode,
    /// Encoder blocks; block 0 keeps resolution, later blocks open stride 2.
    pub enc: Vec<Vec<EncUnit>>,
    pub dec_a: DecoderBranch,
    pub dec_b: DecoderBranch,
    pub head_np: ConvParams,
    pub head_nt: ConvParams,
    pub head_bd: ConvParams,
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub np_logits: Tensor,
    pub nt_logits: Tensor,
    pub bd: Tensor,
}

fn he_kernel(rng: &mut impl Rng, d0: usize, d1: usize, k: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(d0, d1, k, k, |_, _, _, _| dist.sample(rng) as f32)
}

fn new_conv(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> ConvParams {
    ConvParams::new(
        he_kernel(rng, out_c, in_c, k, in_c * k * k),
        vec![0.0; out_c],
        stride,
        pad,
    )
    .expect("valid conv shape")
}

fn new_deconv(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize, pad: usize, out_pad: usize) -> DeconvParams {
    DeconvParams::new(
        he_kernel(rng, in_c, out_c, k, in_c * k * k),
        vec![0.0; out_c],
        2,
        pad,
        out_pad,
    )
    .expect("valid deconv shape")
}

fn decoder_branch(rng: &mut impl Rng, config: &RepSNetConfig) -> DecoderBranch {
    let n = config.num_blocks;
    let mut ups = Vec::new();
    let mut projs = Vec::new();
    for j in 0..n - 1 {
        let in_c = config.width(n - 1 - j);
        let out_c = config.width(n - 2 - j);
        let up = if config.rep_upsample {
            let mut u = RepUpsampleUnit::new(in_c, out_c).expect("valid unit");
            u.deconv3.kernel = he_kernel(rng, in_c, out_c, 3, in_c * 9);
            u.deconv1.kernel = he_kernel(rng, in_c, out_c, 1, in_c);
            UpUnit::Multi(u)
        } else {
            UpUnit::Plain {
                deconv: new_deconv(rng, in_c, out_c, 3, 1, 1),
                bn: BatchNormParams::new(out_c),
            }
        };
        ups.push(up);
        projs.push(new_conv(rng, out_c, out_c, 1, 1, 0));
    }
    DecoderBranch { ups, projs }
}

impl RepSNet {
    /// Fresh network with He-initialized weights, in training mode.
    pub fn new(config: RepSNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.num_blocks;
        let mut enc = Vec::with_capacity(n);
        for i in 0..n {
            let mut block = Vec::new();
            let in_c = if i == 0 { 3 } else { config.width(i - 1) };
            let out_c = config.width(i);
            let first_stride = if i == 0 { 1 } else { 2 };
            for u in 0..config.units_per_block[i] {
                let (ic, stride) = if u == 0 { (in_c, first_stride) } else { (out_c, 1) };
                let unit = if config.multi_branch {
                    let mut unit = RepVggUnit::new(ic, out_c, stride).expect("valid unit");
                    unit.conv3.kernel = he_kernel(rng, out_c, ic, 3, ic * 9);
                    unit.conv1.kernel = he_kernel(rng, out_c, ic, 1, ic);
                    EncUnit::Multi(unit)
                } else {
                    EncUnit::Plain {
                        conv: new_conv(rng, ic, out_c, 3, stride, 1),
                        bn: BatchNormParams::new(out_c),
                    }
                };
                block.push(unit);
            }
            enc.push(block);
        }
        let dec_a = decoder_branch(rng, &config);
        let dec_b = decoder_branch(rng, &config);
        let w0 = config.width(0);
        let head_np = new_conv(rng, w0, 2, 1, 1, 0);
        let head_nt = new_conv(rng, w0, config.class_count, 1, 1, 0);
        let mut head_bd = new_conv(rng, w0, config.bd_channels, 1, 1, 0);
        // start the distance head inside the relu's active region
        for b in head_bd.bias.iter_mut() {
            *b = 0.5;
        }
        Ok(RepSNet {
            config,
            mode: Mode::Train,
            enc,
            dec_a,
            dec_b,
            head_np,
            head_nt,
            head_bd,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims();
        if c != 3 {
            return Err(CoreError::shape(
                "RepSNet::forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(CoreError::shape(
                "RepSNet::forward",
                format!(
                    "spatial dims {h}x{w} not divisible by {d}; pad the image to {}x{}",
                    h.div_ceil(d) * d,
                    w.div_ceil(d) * d
                ),
            ));
        }
        Ok(())
    }

    fn enc_unit_infer(unit: &EncUnit, x: &Tensor) -> Result<Tensor> {
        let presum = match unit {
            EncUnit::Multi(u) => u.forward_infer_presum(x)?,
            EncUnit::Plain { conv, bn } => {
                let mut bn = bn.clone();
                batchnorm_forward(&conv2d_forward(x, conv)?, &mut bn, false)?
            }
            EncUnit::Fused(f) => f.forward_presum(x)?,
        };
        Ok(relu_forward(&presum))
    }

    fn up_unit_infer_presum(unit: &UpUnit, x: &Tensor) -> Result<Tensor> {
        match unit {
            UpUnit::Multi(u) => u.forward_infer_presum(x),
            UpUnit::Plain { deconv, bn } => {
                let mut bn = bn.clone();
                batchnorm_forward(&deconv2d_forward(x, deconv)?, &mut bn, false)
            }
            UpUnit::Fused(f) => f.forward_presum(x),
        }
    }

    fn decode_infer(branch: &DecoderBranch, deepest: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        let mut cur = deepest.clone();
        for (j, up) in branch.ups.iter().enumerate() {
            let skip = &skips[skips.len() - 1 - j];
            let mut t = Self::up_unit_infer_presum(up, &cur)?;
            t.add_assign(&conv2d_forward(skip, &branch.projs[j])?)?;
            cur = relu_forward(&t);
        }
        Ok(cur)
    }

    /// Inference-mode forward: multi-branch units use running statistics,
    /// fused nets use their single-branch operators.
    pub fn forward(&self, x: &Tensor) -> Result<Outputs> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut stage_out: Vec<Tensor> = Vec::with_capacity(self.config.num_blocks);
        for block in &self.enc {
            for unit in block {
                cur = Self::enc_unit_infer(unit, &cur)?;
            }
            stage_out.push(cur.clone());
        }
        let deepest = stage_out.last().expect("at least one block");
        let skips = &stage_out[..stage_out.len() - 1];
        let trunk_a = Self::decode_infer(&self.dec_a, deepest, skips)?;
        let trunk_b = Self::decode_infer(&self.dec_b, deepest, skips)?;
        Ok(Outputs {
            np_logits: conv2d_forward(&trunk_a, &self.head_np)?,
            nt_logits: conv2d_forward(&trunk_a, &self.head_nt)?,
            bd: relu_forward(&conv2d_forward(&trunk_b, &self.head_bd)?),
        })
    }

    /// Replace every multi-branch (or plain conv+BN) unit with its fused
    /// single-branch equivalent. Fusing a fused network is a no-op.
    pub fn reparameterize(&self) -> Result<RepSNet> {
        if self.mode == Mode::Fused {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.mode = Mode::Fused;
        for block in out.enc.iter_mut() {
            for unit in block.iter_mut() {
                *unit = EncUnit::Fused(match unit {
                    EncUnit::Multi(u) => fuse_repvgg(u)?,
                    EncUnit::Plain { conv, bn } => {
                        if bn.batches_seen == 0 {
                            return Err(CoreError::MissingRunningStats("encoder unit".into()));
                        }
                        FusedConv {
                            conv: fold_bn_into_conv(conv, bn)?,
                        }
                    }
                    EncUnit::Fused(f) => f.clone(),
                });
            }
        }
        for branch in [&mut out.dec_a, &mut out.dec_b] {
            for up in branch.ups.iter_mut() {
                *up = UpUnit::Fused(match up {
                    UpUnit::Multi(u) => fuse_repupsample(u)?,
                    UpUnit::Plain { deconv, bn } => {
                        if bn.batches_seen == 0 {
                            return Err(CoreError::MissingRunningStats("decoder unit".into()));
                        }
                        FusedDeconv {
                            deconv: fold_bn_into_deconv(deconv, bn)?,
                        }
                    }
                    UpUnit::Fused(f) => f.clone(),
                });
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// training-mode forward/backward

struct EncUnitCache {
    x: Tensor,
    c3: Tensor,
    c1: Option<Tensor>,
    presum: Tensor,
}

struct StageCache {
    x: Tensor,
    d3: Tensor,
    d1: Option<Tensor>,
    skip: Tensor,
    pre_relu: Tensor,
}

pub struct TrainCache {
    enc_units: Vec<Vec<EncUnitCache>>,
    dec_a: Vec<StageCache>,
    dec_b: Vec<StageCache>,
    trunk_a: Tensor,
    trunk_b: Tensor,
    bd_pre_relu: Tensor,
}

/// Gradients keyed by parameter name, in the visitor's naming scheme.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn add(&mut self, name: String, grad: Vec<f32>) {
        match self.grads.get_mut(&name) {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            None => {
                self.grads.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl RepSNet {
    fn enc_unit_train(unit: &mut EncUnit, x: &Tensor) -> Result<(Tensor, EncUnitCache)> {
        match unit {
            EncUnit::Multi(u) => {
                let c3 = conv2d_forward(x, &u.conv3)?;
                let b3 = batchnorm_forward(&c3, &mut u.bn3, true)?;
                let c1 = conv2d_forward(x, &u.conv1)?;
                let b1 = batchnorm_forward(&c1, &mut u.bn1, true)?;
                let mut presum = b3;
                presum.add_assign(&b1)?;
                if let Some(bn) = u.id_bn.as_mut() {
                    presum.add_assign(&batchnorm_forward(x, bn, true)?)?;
                }
                let y = relu_forward(&presum);
                Ok((
                    y,
                    EncUnitCache {
                        x: x.clone(),
                        c3,
                        c1: Some(c1),
                        presum,
                    },
                ))
            }
            EncUnit::Plain { conv, bn } => {
                let c3 = conv2d_forward(x, conv)?;
                let presum = batchnorm_forward(&c3, bn, true)?;
                let y = relu_forward(&presum);
                Ok((
                    y,
                    EncUnitCache {
                        x: x.clone(),
                        c3,
                        c1: None,
                        presum,
                    },
                ))
            }
            EncUnit::Fused(_) => Err(CoreError::InvalidConfig(
                "training forward on a fused network".into(),
            )),
        }
    }

    fn decode_train(
        branch: &mut DecoderBranch,
        deepest: &Tensor,
        skips: &[Tensor],
    ) -> Result<(Tensor, Vec<StageCache>)> {
        let mut cur = deepest.clone();
        let mut caches = Vec::new();
        for (j, up) in branch.ups.iter_mut().enumerate() {
            let skip = &skips[skips.len() - 1 - j];
            let (mut t, d3, d1) = match up {
                UpUnit::Multi(u) => {
                    let d3 = deconv2d_forward(&cur, &u.deconv3)?;
                    let b3 = batchnorm_forward(&d3, &mut u.bn3, true)?;
                    let d1 = deconv2d_forward(&cur, &u.deconv1)?;
                    let b1 = batchnorm_forward(&d1, &mut u.bn1, true)?;
                    let mut t = b3;
                    t.add_assign(&b1)?;
                    (t, d3, Some(d1))
                }
                UpUnit::Plain { deconv, bn } => {
                    let d3 = deconv2d_forward(&cur, deconv)?;
                    let t = batchnorm_forward(&d3, bn, true)?;
                    (t, d3, None)
                }
                UpUnit::Fused(_) => {
                    return Err(CoreError::InvalidConfig(
                        "training forward on a fused network".into(),
                    ))
                }
            };
            t.add_assign(&conv2d_forward(skip, &branch.projs[j])?)?;
            let y = relu_forward(&t);
            caches.push(StageCache {
                x: cur,
                d3,
                d1,
                skip: skip.clone(),
                pre_relu: t,
            });
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Training-mode forward: batch statistics, running-stat updates, and a
    /// cache for the backward pass.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Outputs, TrainCache)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut enc_units = Vec::with_capacity(self.config.num_blocks);
        let mut stage_out = Vec::with_capacity(self.config.num_blocks);
        for block in self.enc.iter_mut() {
            let mut block_caches = Vec::with_capacity(block.len());
            for unit in block.iter_mut() {
                let (y, cache) = Self::enc_unit_train(unit, &cur)?;
                block_caches.push(cache);
                cur = y;
            }
            enc_units.push(block_caches);
            stage_out.push(cur.clone());
        }
        let deepest = stage_out.last().expect("at least one block").clone();
        let skips = &stage_out[..stage_out.len() - 1];
        let (trunk_a, dec_a) = Self::decode_train(&mut self.dec_a, &deepest, skips)?;
        let (trunk_b, dec_b) = Self::decode_train(&mut self.dec_b, &deepest, skips)?;

        let np_logits = conv2d_forward(&trunk_a, &self.head_np)?;
        let nt_logits = conv2d_forward(&trunk_a, &self.head_nt)?;
        let bd_pre_relu = conv2d_forward(&trunk_b, &self.head_bd)?;
        let bd = relu_forward(&bd_pre_relu);
        Ok((
            Outputs {
                np_logits,
                nt_logits,
                bd,
            },
            TrainCache {
                enc_units,
                dec_a,
                dec_b,
                trunk_a,
                trunk_b,
                bd_pre_relu,
            },
        ))
    }

    fn enc_unit_backward(
        unit: &EncUnit,
        cache: &EncUnitCache,
        grad_y: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let grad_presum = relu_backward(&cache.presum, grad_y);
        match unit {
            EncUnit::Multi(u) => {
                let (g_c3, g_gamma3, g_beta3) = batchnorm_backward(&cache.c3, &u.bn3, &grad_presum)?;
                grads.add(format!("{prefix}.bn3.gamma"), g_gamma3);
                grads.add(format!("{prefix}.bn3.beta"), g_beta3);
                let (mut g_x, g_k3, _) = conv2d_backward(&cache.x, &u.conv3, &g_c3)?;
                grads.add(format!("{prefix}.conv3.kernel"), g_k3.data().to_vec());

                let c1 = cache.c1.as_ref().expect("multi unit cache");
                let (g_c1, g_gamma1, g_beta1) = batchnorm_backward(c1, &u.bn1, &grad_presum)?;
                grads.add(format!("{prefix}.bn1.gamma"), g_gamma1);
                grads.add(format!("{prefix}.bn1.beta"), g_beta1);
                let (g_x1, g_k1, _) = conv2d_backward(&cache.x, &u.conv1, &g_c1)?;
                grads.add(format!("{prefix}.conv1.kernel"), g_k1.data().to_vec());
                g_x.add_assign(&g_x1)?;

                if let Some(bn) = &u.id_bn {
                    let (g_xid, g_gamma, g_beta) = batchnorm_backward(&cache.x, bn, &grad_presum)?;
                    grads.add(format!("{prefix}.bnid.gamma"), g_gamma);
                    grads.add(format!("{prefix}.bnid.beta"), g_beta);
                    g_x.add_assign(&g_xid)?;
                }
                Ok(g_x)
            }
            EncUnit::Plain { conv, bn } => {
                let (g_c3, g_gamma, g_beta) = batchnorm_backward(&cache.c3, bn, &grad_presum)?;
                grads.add(format!("{prefix}.bn3.gamma"), g_gamma);
                grads.add(format!("{prefix}.bn3.beta"), g_beta);
                let (g_x, g_k, _) = conv2d_backward(&cache.x, conv, &g_c3)?;
                grads.add(format!("{prefix}.conv3.kernel"), g_k.data().to_vec());
                Ok(g_x)
            }
            EncUnit::Fused(_) => Err(CoreError::InvalidConfig("backward on fused unit".into())),
        }
    }

    /// Walk one decoder backward. Returns the gradient w.r.t. the deepest
    /// encoder output and adds each stage's skip gradient into `skip_grads`.
    fn decode_backward(
        branch: &DecoderBranch,
        caches: &[StageCache],
        grad_trunk: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
        skip_grads: &mut [Option<Tensor>],
    ) -> Result<Tensor> {
        let mut grad_y = grad_trunk.clone();
        for (j, (up, cache)) in branch.ups.iter().zip(caches).enumerate().rev() {
            let grad_t = relu_backward(&cache.pre_relu, &grad_y);
            // skip projection
            let (g_skip, g_pk, g_pb) = conv2d_backward(&cache.skip, &branch.projs[j], &grad_t)?;
            grads.add(format!("{prefix}.proj{j}.kernel"), g_pk.data().to_vec());
            grads.add(format!("{prefix}.proj{j}.bias"), g_pb);
            let slot = skip_grads.len() - 1 - j;
            match &mut skip_grads[slot] {
                Some(existing) => existing.add_assign(&g_skip)?,
                s @ None => *s = Some(g_skip),
            }
            // upsample unit
            grad_y = match up {
                UpUnit::Multi(u) => {
                    let (g_d3, g_gamma3, g_beta3) = batchnorm_backward(&cache.d3, &u.bn3, &grad_t)?;
                    grads.add(format!("{prefix}.up{j}.bn3.gamma"), g_gamma3);
                    grads.add(format!("{prefix}.up{j}.bn3.beta"), g_beta3);
                    let (mut g_x, g_k3, _) = deconv2d_backward(&cache.x, &u.deconv3, &g_d3)?;
                    grads.add(format!("{prefix}.up{j}.deconv3.kernel"), g_k3.data().to_vec());

                    let d1 = cache.d1.as_ref().expect("multi unit cache");
                    let (g_d1, g_gamma1, g_beta1) = batchnorm_backward(d1, &u.bn1, &grad_t)?;
                    grads.add(format!("{prefix}.up{j}.bn1.gamma"), g_gamma1);
                    grads.add(format!("{prefix}.up{j}.bn1.beta"), g_beta1);
                    let (g_x1, g_k1, _) = deconv2d_backward(&cache.x, &u.deconv1, &g_d1)?;
                    grads.add(format!("{prefix}.up{j}.deconv1.kernel"), g_k1.data().to_vec());
                    g_x.add_assign(&g_x1)?;
                    g_x
                }
                UpUnit::Plain { deconv, bn } => {
                    let (g_d3, g_gamma, g_beta) = batchnorm_backward(&cache.d3, bn, &grad_t)?;
                    grads.add(format!("{prefix}.up{j}.bn3.gamma"), g_gamma);
                    grads.add(format!("{prefix}.up{j}.bn3.beta"), g_beta);
                    let (g_x, g_k, _) = deconv2d_backward(&cache.x, deconv, &g_d3)?;
                    grads.add(format!("{prefix}.up{j}.deconv3.kernel"), g_k.data().to_vec());
                    g_x
                }
                UpUnit::Fused(_) => {
                    return Err(CoreError::InvalidConfig("backward on fused unit".into()))
                }
            };
        }
        Ok(grad_y)
    }

    /// Backward pass through the whole network, producing parameter gradients
    /// keyed by the visitor names.
    pub fn backward(
        &self,
        cache: &TrainCache,
        grad_np: &Tensor,
        grad_nt: &Tensor,
        grad_bd: &Tensor,
    ) -> Result<GradStore> {
        let mut grads = GradStore::default();

        // heads
        let (mut grad_trunk_a, g_np_k, g_np_b) =
            conv2d_backward(&cache.trunk_a, &self.head_np, grad_np)?;
        grads.add("head_np.kernel".into(), g_np_k.data().to_vec());
        grads.add("head_np.bias".into(), g_np_b);
        let (g_ta2, g_nt_k, g_nt_b) = conv2d_backward(&cache.trunk_a, &self.head_nt, grad_nt)?;
        grads.add("head_nt.kernel".into(), g_nt_k.data().to_vec());
        grads.add("head_nt.bias".into(), g_nt_b);
        grad_trunk_a.add_assign(&g_ta2)?;

        let grad_bd_pre = relu_backward(&cache.bd_pre_relu, grad_bd);
        let (grad_trunk_b, g_bd_k, g_bd_b) =
            conv2d_backward(&cache.trunk_b, &self.head_bd, &grad_bd_pre)?;
        grads.add("head_bd.kernel".into(), g_bd_k.data().to_vec());
        grads.add("head_bd.bias".into(), g_bd_b);

        // decoders, collecting gradients for each tapped encoder stage
        let n = self.config.num_blocks;
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; n - 1];
        let g_deep_a = Self::decode_backward(
            &self.dec_a,
            &cache.dec_a,
            &grad_trunk_a,
            "deca",
            &mut grads,
            &mut skip_grads,
        )?;
        let mut grad_stage = g_deep_a;
        grad_stage.add_assign(&Self::decode_backward(
            &self.dec_b,
            &cache.dec_b,
            &grad_trunk_b,
            "decb",
            &mut grads,
            &mut skip_grads,
        )?)?;

        // encoder blocks, deepest first
        for bi in (0..n).rev() {
            for (ui, (unit, ucache)) in self.enc[bi]
                .iter()
                .zip(&cache.enc_units[bi])
                .enumerate()
                .rev()
            {
                let prefix = format!("enc.{bi}.{ui}");
                grad_stage = Self::enc_unit_backward(unit, ucache, &grad_stage, &prefix, &mut grads)?;
            }
            if bi > 0 {
                if let Some(sg) = skip_grads[bi - 1].take() {
                    grad_stage.add_assign(&sg)?;
                }
            }
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// parameter visitor, counting, checkpoints

pub enum ArrayRef<'a> {
    Tensor(&'a mut Tensor),
    Vec(&'a mut Vec<f32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    Trainable,
    RunningStat,
}

fn visit_bn<'a>(
    prefix: &str,
    bn: &'a mut BatchNormParams,
    f: &mut dyn FnMut(String, ArrayKind, ArrayRef<'a>),
) {
    f(format!("{prefix}.gamma"), ArrayKind::Trainable, ArrayRef::Vec(&mut bn.gamma));
    f(format!("{prefix}.beta"), ArrayKind::Trainable, ArrayRef::Vec(&mut bn.beta));
    f(
        format!("{prefix}.running_mean"),
        ArrayKind::RunningStat,
        ArrayRef::Vec(&mut bn.running_mean),
    );
    f(
        format!("{prefix}.running_var"),
        ArrayKind::RunningStat,
        ArrayRef::Vec(&mut bn.running_var),
    );
}

impl RepSNet {
    /// Enumerate every stored parameter array in a stable order.
    pub fn visit_arrays(&mut self, f: &mut dyn FnMut(String, ArrayKind, ArrayRef)) {
        for (bi, block) in self.enc.iter_mut().enumerate() {
            for (ui, unit) in block.iter_mut().enumerate() {
                let p = format!("enc.{bi}.{ui}");
                match unit {
                    EncUnit::Multi(u) => {
                        f(format!("{p}.conv3.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut u.conv3.kernel));
                        visit_bn(&format!("{p}.bn3"), &mut u.bn3, f);
                        f(format!("{p}.conv1.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut u.conv1.kernel));
                        visit_bn(&format!("{p}.bn1"), &mut u.bn1, f);
                        if let Some(bn) = u.id_bn.as_mut() {
                            visit_bn(&format!("{p}.bnid"), bn, f);
                        }
                    }
                    EncUnit::Plain { conv, bn } => {
                        f(format!("{p}.conv3.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut conv.kernel));
                        visit_bn(&format!("{p}.bn3"), bn, f);
                    }
                    EncUnit::Fused(c) => {
                        f(format!("{p}.fused.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut c.conv.kernel));
                        f(format!("{p}.fused.bias"), ArrayKind::Trainable, ArrayRef::Vec(&mut c.conv.bias));
                    }
                }
            }
        }
        for (name, branch) in [("deca", &mut self.dec_a), ("decb", &mut self.dec_b)] {
            for (j, up) in branch.ups.iter_mut().enumerate() {
                let p = format!("{name}.up{j}");
                match up {
                    UpUnit::Multi(u) => {
                        f(format!("{p}.deconv3.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut u.deconv3.kernel));
                        visit_bn(&format!("{p}.bn3"), &mut u.bn3, f);
                        f(format!("{p}.deconv1.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut u.deconv1.kernel));
                        visit_bn(&format!("{p}.bn1"), &mut u.bn1, f);
                    }
                    UpUnit::Plain { deconv, bn } => {
                        f(format!("{p}.deconv3.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut deconv.kernel));
                        visit_bn(&format!("{p}.bn3"), bn, f);
                    }
                    UpUnit::Fused(d) => {
                        f(format!("{p}.fused.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut d.deconv.kernel));
                        f(format!("{p}.fused.bias"), ArrayKind::Trainable, ArrayRef::Vec(&mut d.deconv.bias));
                    }
                }
            }
            for (j, proj) in branch.projs.iter_mut().enumerate() {
                f(format!("{name}.proj{j}.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut proj.kernel));
                f(format!("{name}.proj{j}.bias"), ArrayKind::Trainable, ArrayRef::Vec(&mut proj.bias));
            }
        }
        for (hname, head) in [
            ("head_np", &mut self.head_np),
            ("head_nt", &mut self.head_nt),
            ("head_bd", &mut self.head_bd),
        ] {
            f(format!("{hname}.kernel"), ArrayKind::Trainable, ArrayRef::Tensor(&mut head.kernel));
            f(format!("{hname}.bias"), ArrayKind::Trainable, ArrayRef::Vec(&mut head.bias));
        }
    }

    /// Total stored parameter count (kernels, biases, BN vectors including
    /// running statistics).
    pub fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.visit_arrays(&mut |_, _, arr| {
            n += match arr {
                ArrayRef::Tensor(t) => t.numel(),
                ArrayRef::Vec(v) => v.len(),
            };
        });
        n
    }

    /// True when every batch-norm layer has seen at least one training batch.
    pub fn stats_populated(&self) -> bool {
        let mut ok = true;
        let mut check = |bn: &BatchNormParams| {
            if bn.batches_seen == 0 {
                ok = false;
            }
        };
        for block in &self.enc {
            for unit in block {
                match unit {
                    EncUnit::Multi(u) => {
                        check(&u.bn3);
                        check(&u.bn1);
                        if let Some(bn) = &u.id_bn {
                            check(bn);
                        }
                    }
                    EncUnit::Plain { bn, .. } => check(bn),
                    EncUnit::Fused(_) => {}
                }
            }
        }
        for branch in [&self.dec_a, &self.dec_b] {
            for up in &branch.ups {
                match up {
                    UpUnit::Multi(u) => {
                        check(&u.bn3);
                        check(&u.bn1);
                    }
                    UpUnit::Plain { bn, .. } => check(bn),
                    UpUnit::Fused(_) => {}
                }
            }
        }
        ok
    }

    fn set_stats_seen(&mut self, seen: u64) {
        let apply = |bn: &mut BatchNormParams| bn.batches_seen = seen;
        for block in self.enc.iter_mut() {
            for unit in block.iter_mut() {
                match unit {
                    EncUnit::Multi(u) => {
                        apply(&mut u.bn3);
                        apply(&mut u.bn1);
                        if let Some(bn) = u.id_bn.as_mut() {
                            apply(bn);
                        }
                    }
                    EncUnit::Plain { bn, .. } => apply(bn),
                    EncUnit::Fused(_) => {}
                }
            }
        }
        for branch in [&mut self.dec_a, &mut self.dec_b] {
            for up in branch.ups.iter_mut() {
                match up {
                    UpUnit::Multi(u) => {
                        apply(&mut u.bn3);
                        apply(&mut u.bn1);
                    }
                    UpUnit::Plain { bn, .. } => apply(bn),
                    UpUnit::Fused(_) => {}
                }
            }
        }
    }

    /// Serialize config and all arrays into a checkpoint container.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut net = self.clone();
        let mut ck = Checkpoint::new();
        ck.insert("config", TensorRecord::from_text(&net.config.to_text(net.mode)));
        ck.insert(
            "meta.trained",
            TensorRecord::vector(vec![if net.stats_populated() { 1.0 } else { 0.0 }]),
        );
        net.visit_arrays(&mut |name, _, arr| {
            let rec = match arr {
                ArrayRef::Tensor(t) => TensorRecord::from_tensor(t),
                ArrayRef::Vec(v) => TensorRecord::vector(v.clone()),
            };
            ck.insert(name, rec);
        });
        ck
    }

    /// Rebuild a network from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<RepSNet> {
        let (config, mode) = RepSNetConfig::from_text(&ck.get("config")?.to_text()?)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = RepSNet::new(config, &mut rng)?;
        if mode == Mode::Fused {
            // shape the slots as fused before loading arrays
            net.set_stats_seen(1);
            net = net.reparameterize()?;
        }
        let mut err = None;
        net.visit_arrays(&mut |name, _, arr| {
            if err.is_some() {
                return;
            }
            let rec = match ck.get(&name) {
                Ok(r) => r,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            };
            match arr {
                ArrayRef::Tensor(t) => match rec.to_tensor() {
                    Ok(loaded) if loaded.dims() == t.dims() => *t = loaded,
                    Ok(loaded) => {
                        err = Some(CoreError::shape(
                            "from_checkpoint",
                            format!("{name}: dims {:?} != {:?}", loaded.dims(), t.dims()),
                        ))
                    }
                    Err(e) => err = Some(e),
                },
                ArrayRef::Vec(v) => {
                    if rec.data.len() == v.len() {
                        *v = rec.data.clone();
                    } else {
                        err = Some(CoreError::shape(
                            "from_checkpoint",
                            format!("{name}: length {} != {}", rec.data.len(), v.len()),
                        ));
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let trained = ck.get("meta.trained")?.data.first().copied().unwrap_or(0.0) > 0.5;
        net.set_stats_seen(if trained { 1 } else { 0 });
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// analytic parameter and FLOP counts

fn unit_params(in_c: usize, out_c: usize, identity: bool, multi: bool, fused: bool) -> usize {
    if fused {
        return 9 * in_c * out_c + out_c;
    }
    if multi {
        let mut n = 9 * in_c * out_c + in_c * out_c + 8 * out_c;
        if identity {
            n += 4 * out_c;
        }
        n
    } else {
        9 * in_c * out_c + 4 * out_c
    }
}

/// Closed-form stored-parameter count for a config in a given mode; must
/// match the measured count exactly.
pub fn param_count_analytic(config: &RepSNetConfig, mode: Mode) -> usize {
    let fused = mode == Mode::Fused;
    let n = config.num_blocks;
    let mut total = 0usize;
    for i in 0..n {
        let in_c = if i == 0 { 3 } else { config.width(i - 1) };
        let out_c = config.width(i);
        for u in 0..config.units_per_block[i] {
            let (ic, stride) = if u == 0 {
                (in_c, if i == 0 { 1 } else { 2 })
            } else {
                (out_c, 1)
            };
            let identity = config.multi_branch && ic == out_c && stride == 1;
            total += unit_params(ic, out_c, identity, config.multi_branch, fused);
        }
    }
    for _branch in 0..2 {
        for j in 0..n - 1 {
            let in_c = config.width(n - 1 - j);
            let out_c = config.width(n - 2 - j);
            total += if fused {
                9 * in_c * out_c + out_c
            } else if config.rep_upsample {
                9 * in_c * out_c + in_c * out_c + 8 * out_c
            } else {
                9 * in_c * out_c + 4 * out_c
            };
            total += out_c * out_c + out_c; // skip projection
        }
    }
    let w0 = config.width(0);
    total += w0 * 2 + 2 + w0 * config.class_count + config.class_count + w0 * config.bd_channels + config.bd_channels;
    total
}

/// Closed-form inference FLOPs for one (3, h, w) image. A multiply-add
/// counts as two FLOPs; batch-norm affine, branch sums, biases and relu
/// count one or two per element as applicable.
pub fn flops_analytic(config: &RepSNetConfig, mode: Mode, h: usize, w: usize) -> u64 {
    let fused = mode == Mode::Fused;
    let mut total = 0u64;
    let conv = |in_c: usize, out_c: usize, k: usize, oh: usize, ow: usize| {
        2 * (oh * ow * out_c * in_c * k * k) as u64
    };
    let n = config.num_blocks;
    let (mut ch, mut cw) = (h, w);
    for i in 0..n {
        let in_c = if i == 0 { 3 } else { config.width(i - 1) };
        let out_c = config.width(i);
        if i > 0 {
            ch /= 2;
            cw /= 2;
        }
        for u in 0..config.units_per_block[i] {
            let ic = if u == 0 { in_c } else { out_c };
            let els = (ch * cw * out_c) as u64;
            if fused {
                total += conv(ic, out_c, 3, ch, cw) + els /*bias*/ + els /*relu*/;
            } else if config.multi_branch {
                let identity = ic == out_c && !(u == 0 && i > 0);
                total += conv(ic, out_c, 3, ch, cw) + 2 * els; // 3x3 + bn
                total += conv(ic, out_c, 1, ch, cw) + 2 * els; // 1x1 + bn
                total += els; // first branch sum
                if identity {
                    total += 2 * els + els; // id bn + sum
                }
                total += els; // relu
            } else {
                total += conv(ic, out_c, 3, ch, cw) + 2 * els + els;
            }
        }
    }
    let (mut dh, mut dw) = (ch, cw);
    for _branch in 0..2 {
        let (mut ch, mut cw) = (dh, dw);
        for j in 0..n - 1 {
            let in_c = config.width(n - 1 - j);
            let out_c = config.width(n - 2 - j);
            let (oh, ow) = (ch * 2, cw * 2);
            let els = (oh * ow * out_c) as u64;
            // deconv cost: every input pixel scatters through the kernel
            let deconv = |k: usize| 2 * (ch * cw * in_c * out_c * k * k) as u64;
            if fused {
                total += deconv(3) + els;
            } else if config.rep_upsample {
                total += deconv(3) + 2 * els + deconv(1) + 2 * els + els;
            } else {
                total += deconv(3) + 2 * els;
            }
            // projection, skip add, relu
            total += conv(out_c, out_c, 1, oh, ow) + els + els + els;
            ch = oh;
            cw = ow;
        }
        dh = dh.max(1);
        dw = dw.max(1);
    }
    let w0 = config.width(0);
    total += conv(w0, 2, 1, h, w) + (h * w * 2) as u64;
    total += conv(w0, config.class_count, 1, h, w) + (h * w * config.class_count) as u64;
    total += conv(w0, config.bd_channels, 1, h, w) + 2 * (h * w * config.bd_channels) as u64;
    total
}
