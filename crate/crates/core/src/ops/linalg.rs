use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// `[m, k] x [k, n] -> [m, n]`; each entry sums over `k` in order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(invalid(format!(
            "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.matrix_dims()?;
    let d = a.data();
    Tensor::from_fn(&[n, m], |i| {
        let (r, c) = (i / m, i % m);
        d[c * n + r]
    })
}
