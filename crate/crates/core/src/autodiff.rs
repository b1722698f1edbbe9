//! A small reverse-mode differentiation tape over the kernels in [`crate::ops`].
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Every node records whether it depends on a
//! trainable leaf; cotangents are only propagated along those edges.
//!
//! The tape also keeps a running multiply-add count for the heavy kernels
//! (matmul, convolutions, pooling, resize, DCT); elementwise ops are free.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::ops;
use crate::params::ParamBundle;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    OneMinus(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    Resize(Var),
    Dct2(Var),
    Idct2(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    Concat(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    /// Output of a non-differentiable selection (thresholding, clustering)
    /// computed from the input.
    StopGradient {
        x: Var,
        what: &'static str,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Cotangents produced by [`Tape::vjp`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Cotangent for `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()).expect("shape already valid"))
    }
}

/// Parameters of a [`ParamBundle`] bound to tape leaves, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(invalid(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(invalid(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// For every element of `out`, the flat index into a tensor of `shape`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(shape, data)
}

/// Sums a cotangent of the broadcast shape back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let idx = broadcast_index(shape, grad.shape());
    let mut out = Tensor::zeros(shape)?;
    let o = out.data_mut();
    for (&i, &g) in idx.iter().zip(grad.data()) {
        o[i] += g;
    }
    Ok(out)
}

/// Cotangent of a broadcast operand: `grad * other` reduced to `shape`.
fn broadcast_mul_grad(grad: &Tensor, other: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let full = broadcast_binary(grad, other, |g, o| g * o)?;
    reduce_to(&full, shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by the recorded heavy kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no cotangent is produced for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Records every tensor of `bundle` as a leaf.
    pub fn bind(&mut self, bundle: &ParamBundle, trainable: bool) -> Bound {
        let vars = bundle
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product with broadcasting over extent-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// `1 - x`, evaluated as a single subtraction per element.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| 1.0 - e);
        self.unary(x, v, Op::OneMinus(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (_, n) = self.value(b).matrix_dims()?;
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose(self.value(x))?;
        Ok(self.unary(x, v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let g = ops::conv_geometry(self.value(x), self.value(w), bias, stride, pad)?;
        let v = ops::conv2d(self.value(x), self.value(w), bias, stride, pad)?;
        self.macs += (g.cout * g.cin * g.k * g.k * g.oh * g.ow) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = ops::depthwise_conv(self.value(x), self.value(w))?;
        let k = self.value(w).shape()[2];
        self.macs += (v.len() * k * k) as u64;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(v, Op::Depthwise { x, w }, rg))
    }

    pub fn depthwise_separable_conv(&mut self, x: Var, dw: Var, pw: Var) -> Result<Var> {
        let d = self.depthwise_conv(x, dw)?;
        self.conv2d(d, pw, None, 1, 0)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let v = ops::avg_pool(self.value(x), k, stride)?;
        self.macs += (v.len() * k * k) as u64;
        Ok(self.unary(x, v, Op::AvgPool { x, k, stride }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        if v.shape() != self.value(x).shape() {
            self.macs += 4 * v.len() as u64;
        }
        Ok(self.unary(x, v, Op::Resize(x)))
    }

    fn dct_macs(&mut self, x: Var) -> Result<()> {
        let (c, h, w) = self.value(x).chw()?;
        self.macs += (c * h * w * (h + w)) as u64;
        Ok(())
    }

    pub fn dct2(&mut self, x: Var) -> Result<Var> {
        let v = ops::dct2(self.value(x))?;
        self.dct_macs(x)?;
        Ok(self.unary(x, v, Op::Dct2(x)))
    }

    pub fn idct2(&mut self, x: Var) -> Result<Var> {
        let v = ops::idct2(self.value(x))?;
        self.dct_macs(x)?;
        Ok(self.unary(x, v, Op::Idct2(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = ops::sigmoid(self.value(x));
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.unary(x, v, Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; the cotangent passes only where no clamping happened.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.unary(x, v, Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.unary(x, v, Op::Softmax { x, axis }))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        let d = t.data();
        let v = Tensor::from_fn(&[1, h, w], |i| {
            (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64
        })?;
        Ok(self.unary(x, v, Op::ChannelMean(x)))
    }

    /// Max over channels: `[C, H, W] -> [1, H, W]`; ties resolve to the first channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        let d = t.data();
        let mut argmax = Vec::with_capacity(h * w);
        let mut vals = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * h * w + i] > d[best * h * w + i] {
                    best = ch;
                }
            }
            argmax.push(best);
            vals.push(d[best * h * w + i]);
        }
        let v = Tensor::new(vec![1, h, w], vals)?;
        Ok(self.unary(x, v, Op::ChannelMax { x, argmax }))
    }

    /// Spatial mean per channel: `[C, H, W] -> [C, 1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        let v = Tensor::new(
            vec![c, 1],
            t.data()
                .chunks_exact(h * w)
                .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                .collect(),
        )?;
        Ok(self.unary(x, v, Op::SpatialMean(x)))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(invalid(format!(
                    "concat shape mismatch {:?} vs trailing {tail:?}",
                    t.shape()
                )));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.matrix_dims()?;
        if rows.is_empty() {
            return Err(invalid("select_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("row {bad} out of range for {r} rows")));
        }
        let d = t.data();
        let data = rows
            .iter()
            .flat_map(|&i| d[i * c..(i + 1) * c].iter().copied())
            .collect();
        let v = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.unary(x, v, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Records `value` as a non-differentiable function of `x`. Asking for a
    /// cotangent through it while `x` is trainable is an error.
    pub fn stop_gradient(&mut self, x: Var, value: Tensor, what: &'static str) -> Var {
        self.unary(x, value, Op::StopGradient { x, what })
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(invalid(format!(
                "mse shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse-mode product of `cotangent` with the Jacobian of `output`.
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(invalid(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(cotangent.clone());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.backward_node(node, &g)?;
            grads[i] = Some(g);
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of a `[1]`-shaped output.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(invalid(format!(
                "grad needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let ones = Tensor::ones(self.value(output).shape())?;
        self.vjp(output, &ones)
    }

    fn backward_node(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(g, val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(&g.map(|e| -e), val(*b).shape())?),
            ],
            Op::Mul(a, b) => vec![
                (*a, broadcast_mul_grad(g, val(*b), val(*a).shape())?),
                (*b, broadcast_mul_grad(g, val(*a), val(*b).shape())?),
            ],
            Op::Scale(x, c) => vec![(*x, g.map(|e| e * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::OneMinus(x) => vec![(*x, g.map(|e| -e))],
            Op::Matmul(a, b) => {
                let ga = ops::matmul(g, &ops::transpose(val(*b))?)?;
                let gb = ops::matmul(&ops::transpose(val(*a))?, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => vec![(*x, ops::transpose(g)?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = ops::conv2d_adjoint(val(*x), val(*w), g, *stride, *pad)?;
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    v.push((*b, gb));
                }
                v
            }
            Op::Depthwise { x, w } => {
                let (gx, gw) = ops::depthwise_conv_adjoint(val(*x), val(*w), g)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::AvgPool { x, k, stride } => {
                let (_, h, w) = val(*x).chw()?;
                vec![(*x, ops::avg_pool_adjoint(g, h, w, *k, *stride)?)]
            }
            Op::Resize(x) => {
                let (_, h, w) = val(*x).chw()?;
                vec![(*x, ops::bilinear_resize_adjoint(g, h, w)?)]
            }
            // orthonormal: the adjoint of each transform is the other one
            Op::Dct2(x) => vec![(*x, ops::idct2(g)?)],
            Op::Idct2(x) => vec![(*x, ops::dct2(g)?)],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))?)],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?)],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                g.zip_map(val(*x), |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 })?,
            )],
            Op::Softmax { x, axis } => vec![(*x, softmax_backward(&node.value, g, *axis))],
            Op::Sum(x) => vec![(*x, Tensor::filled(val(*x).shape(), g.data()[0])?)],
            Op::ChannelMean(x) => {
                let (c, _, _) = val(*x).chw()?;
                let gd = g.data();
                let hw = gd.len();
                let gx = Tensor::from_fn(val(*x).shape(), |i| gd[i % hw] / c as f64)?;
                vec![(*x, gx)]
            }
            Op::ChannelMax { x, argmax } => {
                let (_, h, w) = val(*x).chw()?;
                let mut gx = Tensor::zeros(val(*x).shape())?;
                let d = gx.data_mut();
                for (i, (&ch, &gi)) in argmax.iter().zip(g.data()).enumerate() {
                    d[ch * h * w + i] += gi;
                }
                vec![(*x, gx)]
            }
            Op::SpatialMean(x) => {
                let (_, h, w) = val(*x).chw()?;
                let hw = h * w;
                let gd = g.data();
                let gx = Tensor::from_fn(val(*x).shape(), |i| gd[i / hw] / hw as f64)?;
                vec![(*x, gx)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    let piece = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    v.push((p, piece));
                }
                v
            }
            Op::SelectRows { x, rows } => {
                let (_, c) = val(*x).matrix_dims()?;
                let mut gx = Tensor::zeros(val(*x).shape())?;
                let d = gx.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::StopGradient { x, what } => {
                if self.nodes[x.0].requires_grad {
                    return Err(Error::Unsupported(format!(
                        "{what} is not differentiable; gradients cannot flow into its input"
                    )));
                }
                vec![]
            }
        };
        Ok(out)
    }
}

fn softmax_backward(s: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = s.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = g.clone();
    let (sd, gd) = (s.data(), g.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * extent + j) * inner + i;
            let dot: f64 = (0..extent).map(|j| sd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..extent {
                od[idx(j)] = sd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    out
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and central-difference derivatives at `worst`.
    pub worst_values: (f64, f64),
    /// `max |analytic - numeric| / max(|numeric|, SCALED_FLOOR * g)` with `g`
    /// the largest checked `|numeric|`. Coordinates far below the gradient's
    /// own scale are judged against that scale instead of against roundoff.
    pub max_scaled_error: f64,
}

/// Fraction of the largest derivative below which [`GradCheckReport::max_scaled_error`]
/// stops dividing by the coordinate itself.
pub const SCALED_FLOOR: f64 = 1e-3;

/// Coordinates sampled by [`grad_check`] when inputs exceed this many entries.
pub const GRAD_CHECK_SAMPLES: usize = 512;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` builds the function on a fresh tape from one leaf per entry of `point`.
/// All coordinates are checked when the inputs hold at most
/// [`GRAD_CHECK_SAMPLES`] entries in total; otherwise that many coordinates are
/// drawn (with replacement) from a generator seeded with `seed`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(invalid(format!("grad_check step must be positive, got {eps}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let grads = tape.grad(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(point).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();

    let total: usize = point.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if total <= GRAD_CHECK_SAMPLES {
        point
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect()
    } else {
        let mut rng = SplitMix64::new(seed);
        (0..GRAD_CHECK_SAMPLES)
            .map(|_| {
                let mut flat = (rng.next_u64() % total as u64) as usize;
                let mut i = 0;
                while flat >= point[i].len() {
                    flat -= point[i].len();
                    i += 1;
                }
                (i, flat)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        max_scaled_error: 0.0,
    };
    let mut pairs = Vec::with_capacity(coords.len());
    let mut probe = point.to_vec();
    for (i, j) in coords {
        let x0 = point[i].data()[j];
        probe[i].data_mut()[j] = x0 + eps;
        let fp = eval(&probe)?;
        probe[i].data_mut()[j] = x0 - eps;
        let fm = eval(&probe)?;
        probe[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i].data()[j];
        pairs.push((a, numeric));
        let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst = (i, j);
            report.worst_values = (a, numeric);
        }
    }
    let g = pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs()));
    let floor = (SCALED_FLOOR * g).max(1e-8);
    report.max_scaled_error = pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, |m, e| if e > m || e.is_nan() { e } else { m });
    Ok(report)
}

/// [`grad_check`] over every tensor of a parameter bundle. `f` receives the
/// bundle bound on the tape.
pub fn grad_check_bundle<F>(f: F, bundle: &ParamBundle, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<String> = bundle.iter().map(|(n, _)| n.to_string()).collect();
    let point: Vec<Tensor> = bundle.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |tape, vars| {
            let bound = Bound {
                vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            };
            f(tape, &bound)
        },
        &point,
        eps,
        seed,
    )
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(invalid(format!("expected a scalar output, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}
