use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Output extent of a pooling window sweep; inputs that do not tile exactly
/// are padded at the far edge up to `(out - 1) * stride + k`.
pub fn pooled_extent(input: usize, k: usize, stride: usize) -> usize {
    if input <= k {
        1
    } else {
        (input - k).div_ceil(stride) + 1
    }
}

/// Average pooling with edge-replication padding.
///
/// Each window is summed row-major and divided by `k * k`.
pub fn avg_pool(t: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(invalid(format!("pool kernel {k} / stride {stride} must be positive")));
    }
    let (c, h, w) = t.chw()?;
    let oh = pooled_extent(h, k, stride);
    let ow = pooled_extent(w, k, stride);
    let norm = (k * k) as f64;
    let src = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let y = (oy * stride + ky).min(h - 1);
                    for kx in 0..k {
                        let x = (ox * stride + kx).min(w - 1);
                        acc += plane[y * w + x];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub(crate) fn avg_pool_adjoint(grad: &Tensor, in_h: usize, in_w: usize, k: usize, stride: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad.chw()?;
    let norm = (k * k) as f64;
    let g = grad.data();
    let mut out = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut out[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(ch * oh + oy) * ow + ox] / norm;
                for ky in 0..k {
                    let y = (oy * stride + ky).min(in_h - 1);
                    for kx in 0..k {
                        let x = (ox * stride + kx).min(in_w - 1);
                        plane[y * in_w + x] += v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}
