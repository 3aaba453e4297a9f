use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Parameters of a 2-D convolution (cross-correlation, zero padding).
///
/// Kernel layout is (out_channels, in_channels, kH, kW); only square 1x1 and
/// 3x3 kernels are supported.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        let (oc, _ic, kh, kw) = kernel.dims();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(CoreError::InvalidConfig(format!(
                "conv kernel must be square 1x1 or 3x3, got {}x{}",
                kh, kw
            )));
        }
        if bias.len() != oc {
            return Err(CoreError::shape(
                "ConvParams::new",
                format!("bias length {} != out channels {}", bias.len(), oc),
            ));
        }
        if stride == 0 {
            return Err(CoreError::InvalidConfig("conv stride must be >= 1".into()));
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.kernel.dims().0
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.kernel.dims().1
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.kernel.dims().2
    }
}

/// Output spatial dims for the standard cross-correlation size formula.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(CoreError::shape(
            "conv2d",
            format!(
                "input {}x{} with padding {} smaller than kernel {}",
                h, w, padding, k
            ),
        ));
    }
    Ok((
        (h + 2 * padding - k) / stride + 1,
        (w + 2 * padding - k) / stride + 1,
    ))
}

fn check_input(x: &Tensor, p: &ConvParams) -> Result<(usize, usize)> {
    let (_, c, h, w) = x.dims();
    if c != p.in_channels() {
        return Err(CoreError::shape(
            "conv2d",
            format!("input channels {} != kernel in channels {}", c, p.in_channels()),
        ));
    }
    conv2d_output_dims(h, w, p.kernel_size(), p.stride, p.padding)
}

/// Accumulate `wgt * x_plane` (shifted by a kernel offset) into an f64 plane.
///
/// `dy`, `dx` are kernel offsets; the source index is (oy*stride + dy - pad).
#[inline]
fn accumulate_shifted(
    acc: &mut [f64],
    xp: &[f32],
    wgt: f64,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: isize,
    dy: usize,
    dx: usize,
) {
    for oy in 0..out_h {
        let iy = (oy * stride + dy) as isize - pad;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let xrow = &xp[iy as usize * w..iy as usize * w + w];
        let arow = &mut acc[oy * out_w..(oy + 1) * out_w];
        if stride == 1 {
            let shift = dx as isize - pad;
            let ox_start = (-shift).max(0) as usize;
            let ox_end = ((w as isize - shift).min(out_w as isize)).max(0) as usize;
            let src = &xrow[(ox_start as isize + shift) as usize..];
            for (a, &v) in arow[ox_start..ox_end].iter_mut().zip(src) {
                *a += wgt * v as f64;
            }
        } else {
            for (ox, a) in arow.iter_mut().enumerate() {
                let ix = (ox * stride + dx) as isize - pad;
                if ix >= 0 && ix < w as isize {
                    *a += wgt * xrow[ix as usize] as f64;
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (out_h, out_w) = check_input(x, p)?;
    let (n, in_c, h, w) = x.dims();
    let out_c = p.out_channels();
    let k = p.kernel_size();
    let pad = p.padding as isize;

    let mut out = Tensor::zeros(n, out_c, out_h, out_w);
    let mut acc = vec![0.0f64; out_h * out_w];
    for bi in 0..n {
        for oc in 0..out_c {
            acc.fill(p.bias[oc] as f64);
            for ic in 0..in_c {
                let xp = x.plane(bi, ic);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = p.kernel.at(oc, ic, dy, dx) as f64;
                        accumulate_shifted(
                            &mut acc, xp, wgt, h, w, out_h, out_w, p.stride, pad, dy, dx,
                        );
                    }
                }
            }
            let op = out.plane_mut(bi, oc);
            for (o, a) in op.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d_forward(x, p))` w.r.t. x, kernel, bias.
pub fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (out_h, out_w) = check_input(x, p)?;
    let (n, in_c, h, w) = x.dims();
    let out_c = p.out_channels();
    let k = p.kernel_size();
    let pad = p.padding as isize;
    let (gn, gc, gh, gw) = grad_out.dims();
    if (gn, gc, gh, gw) != (n, out_c, out_h, out_w) {
        return Err(CoreError::shape(
            "conv2d_backward",
            format!(
                "grad_out dims {:?} != expected {:?}",
                (gn, gc, gh, gw),
                (n, out_c, out_h, out_w)
            ),
        ));
    }

    // bias gradient: per-channel sum of grad_out
    let mut grad_bias = vec![0.0f32; out_c];
    for oc in 0..out_c {
        let mut s = 0.0f64;
        for bi in 0..n {
            for g in grad_out.plane(bi, oc) {
                s += *g as f64;
            }
        }
        grad_bias[oc] = s as f32;
    }

    // kernel gradient: correlation of grad_out with the input
    let mut grad_kernel = Tensor::zeros(out_c, in_c, k, k);
    for oc in 0..out_c {
        for ic in 0..in_c {
            for dy in 0..k {
                for dx in 0..k {
                    let mut s = 0.0f64;
                    for bi in 0..n {
                        let gp = grad_out.plane(bi, oc);
                        let xp = x.plane(bi, ic);
                        for oy in 0..out_h {
                            let iy = (oy * p.stride + dy) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xp[iy as usize * w..iy as usize * w + w];
                            let grow = &gp[oy * out_w..(oy + 1) * out_w];
                            if p.stride == 1 {
                                let shift = dx as isize - pad;
                                let ox_start = (-shift).max(0) as usize;
                                let ox_end =
                                    ((w as isize - shift).min(out_w as isize)).max(0) as usize;
                                let src = &xrow[(ox_start as isize + shift) as usize..];
                                for (&g, &v) in grow[ox_start..ox_end].iter().zip(src) {
                                    s += g as f64 * v as f64;
                                }
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    let ix = (ox * p.stride + dx) as isize - pad;
                                    if ix >= 0 && ix < w as isize {
                                        s += g as f64 * xrow[ix as usize] as f64;
                                    }
                                }
                            }
                        }
                    }
                    *grad_kernel.at_mut(oc, ic, dy, dx) = s as f32;
                }
            }
        }
    }

    // input gradient: scatter grad_out back through the kernel
    let mut grad_x = Tensor::zeros(n, in_c, h, w);
    let mut acc = vec![0.0f64; h * w];
    for bi in 0..n {
        for ic in 0..in_c {
            acc.fill(0.0);
            for oc in 0..out_c {
                let gp = grad_out.plane(bi, oc);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = p.kernel.at(oc, ic, dy, dx) as f64;
                        for oy in 0..out_h {
                            let iy = (oy * p.stride + dy) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let arow = &mut acc[iy as usize * w..iy as usize * w + w];
                            let grow = &gp[oy * out_w..(oy + 1) * out_w];
                            if p.stride == 1 {
                                let shift = dx as isize - pad;
                                let ox_start = (-shift).max(0) as usize;
                                let ox_end =
                                    ((w as isize - shift).min(out_w as isize)).max(0) as usize;
                                let dst = ox_start as isize + shift;
                                for (a, &g) in arow[dst as usize..]
                                    .iter_mut()
                                    .zip(&grow[ox_start..ox_end])
                                {
                                    *a += wgt * g as f64;
                                }
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    let ix = (ox * p.stride + dx) as isize - pad;
                                    if ix >= 0 && ix < w as isize {
                                        arow[ix as usize] += wgt * g as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let gxp = grad_x.plane_mut(bi, ic);
            for (o, a) in gxp.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }

    Ok((grad_x, grad_kernel, grad_bias))
}
