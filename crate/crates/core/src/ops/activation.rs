use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    // split on sign so exp never overflows
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Softmax along `axis`, with the slice maximum subtracted first.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(invalid(format!("softmax axis {axis} out of range for shape {shape:?}")));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * extent + j) * inner + i;
            let m = (0..extent).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (data[idx(j)] - m).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                data[idx(j)] = b / total;
            }
        }
    }
    Ok(out)
}
