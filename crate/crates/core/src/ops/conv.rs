use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded convolution.
pub fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(invalid(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(
    t: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let (cin, h, w) = t.chw()?;
    let (cout, wcin, kh, kw) = match weights.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(invalid(format!(
                "conv weights must be [Cout,Cin,k,k], got {:?}",
                weights.shape()
            )))
        }
    };
    if kh != kw {
        return Err(invalid(format!("non-square kernel {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(invalid(format!(
            "conv weights expect {wcin} input channels, input has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(invalid(format!("conv bias must be [{cout}], got {:?}", b.shape())));
        }
    }
    let oh = conv_extent(h, kh, stride, pad)?;
    let ow = conv_extent(w, kw, stride, pad)?;
    Ok(ConvGeometry {
        cin,
        cout,
        k: kh,
        h,
        w,
        oh,
        ow,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `kk`: output
/// positions whose input coordinate `o * stride + kk - pad` lies inside `0..n`.
fn tap_range(n: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // o * stride + kk - pad <= n - 1
    let hi = if n + pad < kk + 1 {
        0
    } else {
        ((n + pad - kk - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// 2-D cross-correlation with symmetric zero padding.
///
/// Every output cell accumulates from zero over input channels, then kernel
/// rows, then kernel columns; the bias is added last.
pub fn conv2d(t: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(t, weights, bias, stride, pad)?;
    let x = t.data();
    let wt = weights.data();
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * plane_out];
    for co in 0..g.cout {
        let acc = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.cin {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = tap_range(g.h, g.oh, ky, stride, pad);
                for kx in 0..g.k {
                    let wv = wt[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    let (ox0, ox1) = tap_range(g.w, g.ow, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let arow = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            arow[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[co];
            for v in acc.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![g.cout, g.oh, g.ow], out)
}

/// Cotangents of [`conv2d`] with respect to input, weights and bias.
pub(crate) fn conv2d_adjoint(
    t: &Tensor,
    weights: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(t, weights, None, stride, pad)?;
    let x = t.data();
    let wt = weights.data();
    let go = grad.data();
    let plane_out = g.oh * g.ow;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.cout];
    for co in 0..g.cout {
        let gplane = &go[co * plane_out..(co + 1) * plane_out];
        gb[co] = gplane.iter().sum();
        for ci in 0..g.cin {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gxin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = tap_range(g.h, g.oh, ky, stride, pad);
                for kx in 0..g.k {
                    let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = tap_range(g.w, g.ow, kx, stride, pad);
                    let mut wacc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            let gv = gplane[oy * g.ow + ox];
                            wacc += gv * xin[iy * g.w + ix];
                            gxin[iy * g.w + ix] += gv * wv;
                        }
                    }
                    gw[widx] += wacc;
                }
            }
        }
    }
    Ok((
        Tensor::new(t.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

fn depthwise_geometry(t: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = t.chw()?;
    let k = match weights.shape()[..] {
        [wc, 1, kh, kw] if wc == c && kh == kw => kh,
        _ => {
            return Err(invalid(format!(
                "depthwise weights must be [{c},1,k,k], got {:?}",
                weights.shape()
            )))
        }
    };
    if k % 2 == 0 {
        return Err(invalid(format!("depthwise kernel extent {k} must be odd")));
    }
    Ok((c, h, w, k))
}

/// Per-channel `k x k` convolution, padding `(k - 1) / 2`, no bias.
pub fn depthwise_conv(t: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (c, h, w, k) = depthwise_geometry(t, weights)?;
    let pad = (k - 1) / 2;
    let x = t.data();
    let wt = weights.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let acc = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = tap_range(h, h, ky, 1, pad);
            for kx in 0..k {
                let wv = wt[(ch * k + ky) * k + kx];
                let (ox0, ox1) = tap_range(w, w, kx, 1, pad);
                for oy in oy0..oy1 {
                    let iy = oy + ky - pad;
                    for ox in ox0..ox1 {
                        acc[oy * w + ox] += wv * xin[iy * w + ox + kx - pad];
                    }
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

pub(crate) fn depthwise_conv_adjoint(t: &Tensor, weights: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w, k) = depthwise_geometry(t, weights)?;
    let pad = (k - 1) / 2;
    let x = t.data();
    let wt = weights.data();
    let go = grad.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let gplane = &go[ch * h * w..(ch + 1) * h * w];
        let gxin = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = tap_range(h, h, ky, 1, pad);
            for kx in 0..k {
                let widx = (ch * k + ky) * k + kx;
                let wv = wt[widx];
                let (ox0, ox1) = tap_range(w, w, kx, 1, pad);
                let mut wacc = 0.0;
                for oy in oy0..oy1 {
                    let iy = oy + ky - pad;
                    for ox in ox0..ox1 {
                        let ix = ox + kx - pad;
                        let gv = gplane[oy * w + ox];
                        wacc += gv * xin[iy * w + ix];
                        gxin[iy * w + ix] += gv * wv;
                    }
                }
                gw[widx] += wacc;
            }
        }
    }
    Ok((
        Tensor::new(t.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
    ))
}

/// Depthwise `k x k` convolution followed by `1 x 1` channel mixing.
pub fn depthwise_separable_conv(t: &Tensor, dw_weights: &Tensor, pw_weights: &Tensor) -> Result<Tensor> {
    let dw = depthwise_conv(t, dw_weights)?;
    conv2d(&dw, pw_weights, None, 1, 0)
}
