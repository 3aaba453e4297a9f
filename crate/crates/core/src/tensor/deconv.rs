use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Parameters of a 2-D transposed convolution.
///
/// Kernel layout is (in_channels, out_channels, kH, kW). Output positions are
/// `o = i*stride - padding + k_offset`, i.e. the scatter adjoint of a strided
/// cross-correlation; `output_padding` extends the output on the bottom/right.
#[derive(Clone, Debug)]
pub struct DeconvParams {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl DeconvParams {
    pub fn new(
        kernel: Tensor,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let (_ic, oc, kh, kw) = kernel.dims();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(CoreError::InvalidConfig(format!(
                "deconv kernel must be square 1x1 or 3x3, got {}x{}",
                kh, kw
            )));
        }
        if bias.len() != oc {
            return Err(CoreError::shape(
                "DeconvParams::new",
                format!("bias length {} != out channels {}", bias.len(), oc),
            ));
        }
        if stride == 0 {
            return Err(CoreError::InvalidConfig("deconv stride must be >= 1".into()));
        }
        if output_padding >= stride {
            return Err(CoreError::InvalidConfig(format!(
                "output_padding {} must be < stride {}",
                output_padding, stride
            )));
        }
        Ok(DeconvParams {
            kernel,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.kernel.dims().0
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.kernel.dims().1
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.kernel.dims().2
    }
}

/// Output spatial dims of the transposed convolution.
pub fn deconv2d_output_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(usize, usize)> {
    let oh = (h - 1) * stride + k + output_padding;
    let ow = (w - 1) * stride + k + output_padding;
    if h == 0 || w == 0 || oh <= 2 * padding || ow <= 2 * padding {
        return Err(CoreError::shape(
            "deconv2d",
            format!(
                "configuration yields non-positive output for input {}x{}",
                h, w
            ),
        ));
    }
    Ok((oh - 2 * padding, ow - 2 * padding))
}

fn check_input(x: &Tensor, p: &DeconvParams) -> Result<(usize, usize)> {
    let (_, c, h, w) = x.dims();
    if c != p.in_channels() {
        return Err(CoreError::shape(
            "deconv2d",
            format!("input channels {} != kernel in channels {}", c, p.in_channels()),
        ));
    }
    deconv2d_output_dims(h, w, p.kernel_size(), p.stride, p.padding, p.output_padding)
}

/// Transposed convolution: scatter-accumulate each input pixel through the kernel.
pub fn deconv2d_forward(x: &Tensor, p: &DeconvParams) -> Result<Tensor> {
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
                        let wgt = p.kernel.at(ic, oc, dy, dx) as f64;
                        for iy in 0..h {
                            let oy = (iy * p.stride + dy) as isize - pad;
                            if oy < 0 || oy >= out_h as isize {
                                continue;
                            }
                            let arow = &mut acc[oy as usize * out_w..(oy as usize + 1) * out_w];
                            let xrow = &xp[iy * w..(iy + 1) * w];
                            for (ix, &v) in xrow.iter().enumerate() {
                                let ox = (ix * p.stride + dx) as isize - pad;
                                if ox >= 0 && ox < out_w as isize {
                                    arow[ox as usize] += wgt * v as f64;
                                }
                            }
                        }
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

/// Gradients of `sum(grad_out * deconv2d_forward(x, p))` w.r.t. x, kernel, bias.
pub fn deconv2d_backward(
    x: &Tensor,
    p: &DeconvParams,
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
            "deconv2d_backward",
            format!(
                "grad_out dims {:?} != expected {:?}",
                (gn, gc, gh, gw),
                (n, out_c, out_h, out_w)
            ),
        ));
    }

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

    // Both remaining gradients gather grad_out at the scatter targets.
    let mut grad_kernel = Tensor::zeros(in_c, out_c, k, k);
    for ic in 0..in_c {
        for oc in 0..out_c {
            for dy in 0..k {
                for dx in 0..k {
                    let mut s = 0.0f64;
                    for bi in 0..n {
                        let xp = x.plane(bi, ic);
                        let gp = grad_out.plane(bi, oc);
                        for iy in 0..h {
                            let oy = (iy * p.stride + dy) as isize - pad;
                            if oy < 0 || oy >= out_h as isize {
                                continue;
                            }
                            let grow = &gp[oy as usize * out_w..(oy as usize + 1) * out_w];
                            let xrow = &xp[iy * w..(iy + 1) * w];
                            for (ix, &v) in xrow.iter().enumerate() {
                                let ox = (ix * p.stride + dx) as isize - pad;
                                if ox >= 0 && ox < out_w as isize {
                                    s += v as f64 * grow[ox as usize] as f64;
                                }
                            }
                        }
                    }
                    *grad_kernel.at_mut(ic, oc, dy, dx) = s as f32;
                }
            }
        }
    }

    let mut grad_x = Tensor::zeros(n, in_c, h, w);
    for bi in 0..n {
        for ic in 0..in_c {
            let mut acc = vec![0.0f64; h * w];
            for oc in 0..out_c {
                let gp = grad_out.plane(bi, oc);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = p.kernel.at(ic, oc, dy, dx) as f64;
                        for iy in 0..h {
                            let oy = (iy * p.stride + dy) as isize - pad;
                            if oy < 0 || oy >= out_h as isize {
                                continue;
                            }
                            let grow = &gp[oy as usize * out_w..(oy as usize + 1) * out_w];
                            let arow = &mut acc[iy * w..(iy + 1) * w];
                            for (ix, a) in arow.iter_mut().enumerate() {
                                let ox = (ix * p.stride + dx) as isize - pad;
                                if ox >= 0 && ox < out_w as isize {
                                    *a += wgt * grow[ox as usize] as f64;
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
