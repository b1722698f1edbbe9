use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Source sample positions for one axis under the align-corners convention.
///
/// Each entry is `(lo, hi, frac)`: the output sample blends `lo` and `hi`
/// with weights `1 - frac` and `frac`.
pub(crate) fn axis_samples(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            let src = if output == 1 {
                (input - 1) as f64 / 2.0
            } else {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` tensor with aligned corners.
///
/// An output extent of 1 samples the centroid of the input axis.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid(format!("resize target {out_h}x{out_w} has a zero extent")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.clone());
    }
    let rows = axis_samples(h, out_h);
    let cols = axis_samples(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bottom = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters an output cotangent back onto the
/// input grid.
pub(crate) fn bilinear_resize_adjoint(grad: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.chw()?;
    if (out_h, out_w) == (in_h, in_w) {
        return Ok(grad.clone());
    }
    let rows = axis_samples(in_h, out_h);
    let cols = axis_samples(in_w, out_w);
    let g = grad.data();
    let mut out = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut out[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = g[(ch * out_h + oy) * out_w + ox];
                plane[y0 * in_w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                plane[y0 * in_w + x1] += (1.0 - fy) * fx * v;
                plane[y1 * in_w + x0] += fy * (1.0 - fx) * v;
                plane[y1 * in_w + x1] += fy * fx * v;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}
