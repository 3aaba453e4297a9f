//! Training loop pieces: target derivation, batch assembly, one-epoch Adam
//! training, validation loss and the plateau learning-rate scheduler.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::groundtruth::{
    augment, bd_from_instances, inner_boundary, isoheight_from_boundary, Augmentation, BDMap,
    InstanceMap, IsoheightMap, SynthSample,
};
use crate::losses::{total_loss, IsoheightConfig, LossTargets, LossValues, LossWeights};
use crate::network::{ArrayKind, ArrayRef, GradStore, Outputs, RepSNet};
use crate::tensor::{adam_step, AdamState, Tensor};

/// All supervision targets for one sample.
pub struct SampleTargets {
    pub np: Vec<u8>,
    pub nt: Vec<u8>,
    pub fg: Vec<bool>,
    pub bd: BDMap,
    pub psi: IsoheightMap,
}

/// Derive every training target from an instance map and type map.
pub fn derive_targets(inst: &InstanceMap, types: &[u8], tau: u8) -> Result<SampleTargets> {
    let fg: Vec<bool> = inst.labels.iter().map(|&l| l > 0).collect();
    let np: Vec<u8> = fg.iter().map(|&f| f as u8).collect();
    let bd = bd_from_instances(inst);
    let psi = isoheight_from_boundary(&inner_boundary(inst), tau)?;
    Ok(SampleTargets {
        np,
        nt: types.to_vec(),
        fg,
        bd,
        psi,
    })
}

/// Owned batch targets, borrowable as `LossTargets`.
pub struct BatchTargets {
    pub np: Vec<u8>,
    pub nt: Vec<u8>,
    pub fg: Vec<bool>,
    pub bd: Tensor,
    pub psi: Vec<IsoheightMap>,
}

impl BatchTargets {
    pub fn as_loss_targets(&self) -> LossTargets<'_> {
        LossTargets {
            np: &self.np,
            nt: &self.nt,
            bd: &self.bd,
            fg: &self.fg,
            psi: &self.psi,
        }
    }
}

/// Stack samples into an input tensor and batch targets.
pub fn build_batch(samples: &[&SynthSample], tau: u8) -> Result<(Tensor, BatchTargets)> {
    let n = samples.len();
    let (h, w) = (samples[0].h, samples[0].w);
    let mut x = Tensor::zeros(n, 3, h, w);
    let mut bd = Tensor::zeros(n, 4, h, w);
    let mut np = Vec::with_capacity(n * h * w);
    let mut nt = Vec::with_capacity(n * h * w);
    let mut fg = Vec::with_capacity(n * h * w);
    let mut psi = Vec::with_capacity(n);
    for (bi, s) in samples.iter().enumerate() {
        if (s.h, s.w) != (h, w) {
            return Err(CoreError::shape(
                "build_batch",
                "samples in one batch must share dims",
            ));
        }
        for c in 0..3 {
            let plane = x.plane_mut(bi, c);
            for (i, p) in plane.iter_mut().enumerate() {
                *p = s.rgb[i * 3 + c] as f32 / 255.0;
            }
        }
        let t = derive_targets(&s.inst, &s.types.types, tau)?;
        for dir in 0..4 {
            bd.plane_mut(bi, dir).copy_from_slice(t.bd.plane(dir));
        }
        np.extend_from_slice(&t.np);
        nt.extend_from_slice(&t.nt);
        fg.extend_from_slice(&t.fg);
        psi.push(t.psi);
    }
    Ok((x, BatchTargets { np, nt, fg, bd, psi }))
}

/// Adam optimizer over the network's named trainable arrays.
pub struct AdamOpt {
    pub lr: f64,
    states: BTreeMap<String, AdamState>,
}

impl AdamOpt {
    pub fn new(lr: f64) -> Self {
        AdamOpt {
            lr,
            states: BTreeMap::new(),
        }
    }

    /// Apply one update; parameters without a recorded gradient are stepped
    /// with zero gradient so their moments decay consistently.
    pub fn step(&mut self, net: &mut RepSNet, grads: &GradStore) {
        let lr = self.lr;
        let states = &mut self.states;
        net.visit_arrays(&mut |name, kind, arr| {
            if kind != ArrayKind::Trainable {
                return;
            }
            let data: &mut [f32] = match arr {
                ArrayRef::Tensor(t) => t.data_mut(),
                ArrayRef::Vec(v) => v.as_mut_slice(),
            };
            let state = states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(data.len()));
            match grads.get(&name) {
                Some(g) => adam_step(data, g, state, lr),
                None => adam_step(data, &vec![0.0; data.len()], state, lr),
            }
        });
    }
}

/// Epoch settings for `train_epoch`.
#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub augment: bool,
    pub tau: u8,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 4,
            augment: true,
            tau: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EpochStats {
    pub losses: LossValues,
    pub batches: usize,
}

/// One pass of shuffled mini-batch Adam updates. Returns the mean of each
/// loss component over the epoch's batches.
pub fn train_epoch(
    net: &mut RepSNet,
    samples: &[SynthSample],
    opt: &mut AdamOpt,
    weights: &LossWeights,
    iso: &IsoheightConfig,
    settings: &TrainSettings,
    rng: &mut impl Rng,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(CoreError::InvalidConfig("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut sums = LossValues::default();
    let mut batches = 0usize;
    for chunk in order.chunks(settings.batch_size.max(1)) {
        let augmented: Vec<SynthSample> = chunk
            .iter()
            .map(|&i| {
                if settings.augment {
                    augment(&samples[i], Augmentation::sample(rng))
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let refs: Vec<&SynthSample> = augmented.iter().collect();
        let (x, targets) = build_batch(&refs, settings.tau)?;
        let (out, cache) = net.forward_train(&x)?;
        let (values, grads) =
            total_loss(&out.np_logits, &out.nt_logits, &out.bd, &targets.as_loss_targets(), weights, iso)?;
        let store = net.backward(&cache, &grads.np, &grads.nt, &grads.bd)?;
        opt.step(net, &store);
        sums.np += values.np;
        sums.nt += values.nt;
        sums.bd += values.bd;
        sums.nb += values.nb;
        sums.total += values.total;
        batches += 1;
    }
    let k = batches as f64;
    Ok(EpochStats {
        losses: LossValues {
            np: sums.np / k,
            nt: sums.nt / k,
            bd: sums.bd / k,
            nb: sums.nb / k,
            total: sums.total / k,
        },
        batches,
    })
}

/// Mean total loss over a validation set, in inference mode (running
/// statistics, no updates).
pub fn validate_loss(
    net: &RepSNet,
    samples: &[SynthSample],
    weights: &LossWeights,
    iso: &IsoheightConfig,
    tau: u8,
) -> Result<LossValues> {
    let mut sums = LossValues::default();
    for s in samples {
        let (x, targets) = build_batch(&[s], tau)?;
        let out: Outputs = net.forward(&x)?;
        let (values, _) = total_loss(
            &out.np_logits,
            &out.nt_logits,
            &out.bd,
            &targets.as_loss_targets(),
            weights,
            iso,
        )?;
        sums.np += values.np;
        sums.nt += values.nt;
        sums.bd += values.bd;
        sums.nb += values.nb;
        sums.total += values.total;
    }
    let k = samples.len().max(1) as f64;
    Ok(LossValues {
        np: sums.np / k,
        nt: sums.nt / k,
        bd: sums.bd / k,
        nb: sums.nb / k,
        total: sums.total / k,
    })
}

/// Halve the learning rate after `patience` consecutive epochs without a
/// validation-loss improvement, never dropping below the floor.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, floor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            floor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Observe one epoch's validation loss; returns the updated rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            lr
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.bad_epochs = 0;
                (lr * self.factor).max(self.floor)
            } else {
                lr
            }
        }
    }
}
