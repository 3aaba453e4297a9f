use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-channel batch normalization parameters and running statistics.
///
/// Biased (population) variance is used both for normalization and for the
/// running-statistics update, so training and folded inference agree exactly
/// on what "variance" means.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    /// Number of training-mode batches folded into the running statistics.
    pub batches_seen: u64,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            batches_seen: 0,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims();
        if c != self.channels() {
            return Err(CoreError::shape(
                "batchnorm",
                format!("input channels {} != parameter channels {}", c, self.channels()),
            ));
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance over (N, H, W), in double precision.
fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        for bi in 0..n {
            for &v in x.plane(bi, ci) {
                s += v as f64;
            }
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for bi in 0..n {
            for &v in x.plane(bi, ci) {
                let d = v as f64 - m;
                sq += d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    (mean, var)
}

/// Batch normalization. Training mode normalizes by batch statistics and
/// updates the running statistics in place; inference mode normalizes by the
/// stored running statistics.
pub fn batchnorm_forward(x: &Tensor, p: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    p.check(x)?;
    let (n, c, _, _) = x.dims();
    let mut out = x.clone();
    if training {
        let (mean, var) = batch_stats(x);
        for ci in 0..c {
            let inv_std = 1.0 / (var[ci] + p.eps as f64).sqrt();
            let g = p.gamma[ci] as f64;
            let b = p.beta[ci] as f64;
            let m = mean[ci];
            for bi in 0..n {
                for v in out.plane_mut(bi, ci) {
                    *v = ((( *v as f64) - m) * inv_std * g + b) as f32;
                }
            }
            p.running_mean[ci] =
                ((1.0 - p.momentum as f64) * p.running_mean[ci] as f64 + p.momentum as f64 * mean[ci]) as f32;
            p.running_var[ci] =
                ((1.0 - p.momentum as f64) * p.running_var[ci] as f64 + p.momentum as f64 * var[ci]) as f32;
        }
        p.batches_seen += 1;
    } else {
        for ci in 0..c {
            let inv_std = 1.0 / ((p.running_var[ci] as f64) + p.eps as f64).sqrt();
            let g = p.gamma[ci] as f64;
            let b = p.beta[ci] as f64;
            let m = p.running_mean[ci] as f64;
            for bi in 0..n {
                for v in out.plane_mut(bi, ci) {
                    *v = ((( *v as f64) - m) * inv_std * g + b) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Training-mode backward pass. Batch statistics are recomputed from `x`,
/// which must be the same tensor the forward pass saw.
pub fn batchnorm_backward(
    x: &Tensor,
    p: &BatchNormParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    p.check(x)?;
    if x.dims() != grad_out.dims() {
        return Err(CoreError::shape(
            "batchnorm_backward",
            format!("{:?} vs {:?}", x.dims(), grad_out.dims()),
        ));
    }
    let (n, c, h, w) = x.dims();
    let count = (n * h * w) as f64;
    let (mean, var) = batch_stats(x);

    let mut grad_x = Tensor::zeros(n, c, h, w);
    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + p.eps as f64).sqrt();
        let m = mean[ci];
        // sums of dy and dy * xhat over the normalization set
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..n {
            let xp = x.plane(bi, ci);
            let gp = grad_out.plane(bi, ci);
            for (&xv, &gv) in xp.iter().zip(gp) {
                let xhat = (xv as f64 - m) * inv_std;
                sum_dy += gv as f64;
                sum_dy_xhat += gv as f64 * xhat;
            }
        }
        grad_beta[ci] = sum_dy as f32;
        grad_gamma[ci] = sum_dy_xhat as f32;

        let g = p.gamma[ci] as f64;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        for bi in 0..n {
            let xp = x.plane(bi, ci);
            let gp = grad_out.plane(bi, ci);
            let op = grad_x.plane_mut(bi, ci);
            for ((&xv, &gv), o) in xp.iter().zip(gp).zip(op.iter_mut()) {
                let xhat = (xv as f64 - m) * inv_std;
                *o = (g * inv_std * (gv as f64 - mean_dy - xhat * mean_dy_xhat)) as f32;
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
