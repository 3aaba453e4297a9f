use crate::tensor::Tensor;

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through relu: passes where the pre-activation input was > 0.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(pre.dims(), grad_out.dims());
    let mut out = grad_out.clone();
    for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Softmax across the channel axis, independently per (batch, y, x) position.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims();
    let plane = h * w;
    let mut out = Tensor::zeros(n, c, h, w);
    for bi in 0..n {
        for i in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(x.plane(bi, ci)[i]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ((x.plane(bi, ci)[i] - maxv) as f64).exp();
            }
            for ci in 0..c {
                out.plane_mut(bi, ci)[i] =
                    (((x.plane(bi, ci)[i] - maxv) as f64).exp() / sum) as f32;
            }
        }
    }
    out
}
