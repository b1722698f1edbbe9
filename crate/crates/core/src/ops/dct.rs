//! Orthonormal 2-D DCT-II / DCT-III over the spatial axes of `[C, H, W]`.
//!
//! `X[k] = s(k) * sum_n x[n] cos(pi (2n + 1) k / 2N)` with `s(0) = sqrt(1/N)`
//! and `s(k) = sqrt(2/N)` otherwise. With this scaling the transform is
//! orthogonal, so the inverse is also the adjoint.

use crate::error::Result;
use crate::tensor::Tensor;

/// `N x N` DCT-II basis, row `k` holding the `k`-th cosine.
pub(crate) fn dct_basis(n: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf);
            basis[k * n + i] = scale * angle.cos();
        }
    }
    basis
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Applies the 1-D transform along every row and then every column.
fn transform(t: &Tensor, dir: Direction) -> Result<Tensor> {
    let (_, h, w) = t.chw()?;
    let bh = dct_basis(h);
    let bw = dct_basis(w);
    let mut out = t.clone();
    let data = out.data_mut();
    let mut line = vec![0.0; h.max(w)];
    for plane in data.chunks_exact_mut(h * w) {
        // rows
        for y in 0..h {
            let row = &mut plane[y * w..(y + 1) * w];
            line[..w].copy_from_slice(row);
            apply_1d(&bw, w, &line[..w], row, dir);
        }
        // columns
        let mut col = vec![0.0; h];
        for x in 0..w {
            for y in 0..h {
                line[y] = plane[y * w + x];
            }
            apply_1d(&bh, h, &line[..h], &mut col, dir);
            for y in 0..h {
                plane[y * w + x] = col[y];
            }
        }
    }
    Ok(out)
}

fn apply_1d(basis: &[f64], n: usize, input: &[f64], output: &mut [f64], dir: Direction) {
    match dir {
        Direction::Forward => {
            for k in 0..n {
                let b = &basis[k * n..(k + 1) * n];
                output[k] = b.iter().zip(input).map(|(a, x)| a * x).sum();
            }
        }
        Direction::Inverse => {
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += basis[k * n + i] * input[k];
                }
                output[i] = acc;
            }
        }
    }
}

/// Forward orthonormal DCT-II, per channel.
pub fn dct2(t: &Tensor) -> Result<Tensor> {
    transform(t, Direction::Forward)
}

/// Inverse of [`dct2`] (orthonormal DCT-III), per channel.
pub fn idct2(t: &Tensor) -> Result<Tensor> {
    transform(t, Direction::Inverse)
}
