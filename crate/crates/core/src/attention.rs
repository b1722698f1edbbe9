//! Squeeze-excite channel gating and mean/max spatial gating.
//!
//! Parameter names, relative to a caller-chosen prefix:
//! - channel attention: `{prefix}.w1` `[hidden, C]`, `{prefix}.w2` `[C, hidden]`
//!   with `hidden = max(1, C / reduction)`;
//! - spatial attention: `{prefix}.w` `[1, 2, k, k]` applied with padding `(k - 1) / 2`.

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamBuilder, ParamBundle};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

pub fn channel_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

pub fn declare_channel_attention(b: &mut ParamBuilder, prefix: &str, channels: usize, reduction: usize) -> Result<()> {
    let hidden = channel_hidden(channels, reduction);
    b.uniform(&format!("{prefix}.w1"), &[hidden, channels], channels)?;
    b.uniform(&format!("{prefix}.w2"), &[channels, hidden], hidden)
}

pub fn declare_spatial_attention(b: &mut ParamBuilder, prefix: &str, k: usize) -> Result<()> {
    b.conv(prefix, 2, 1, k, false)
}

/// `x * sigmoid(w2 relu(w1 mean_hw(x)))`, gate broadcast over space.
pub fn channel_attention_on(tape: &mut Tape, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let (c, _, _) = tape.value(x).chw()?;
    let squeeze = tape.spatial_mean(x)?;
    let w1 = p.var(&format!("{prefix}.w1"))?;
    let w2 = p.var(&format!("{prefix}.w2"))?;
    let hidden = tape.matmul(w1, squeeze)?;
    let hidden = tape.relu(hidden);
    let excite = tape.matmul(w2, hidden)?;
    let gate = tape.sigmoid(excite);
    let gate = tape.reshape(gate, &[c, 1, 1])?;
    tape.mul(x, gate)
}

/// `x * sigmoid(conv([mean_c(x); max_c(x)]))`, gate broadcast over channels.
pub fn spatial_attention_on(tape: &mut Tape, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let k = tape.value(w).shape()[2];
    if k.is_multiple_of(2) {
        return Err(invalid(format!("spatial attention kernel {k} must be odd")));
    }
    let mean = tape.channel_mean(x)?;
    let max = tape.channel_max(x)?;
    let stack = tape.concat(&[mean, max])?;
    let logits = tape.conv2d(stack, w, None, 1, (k - 1) / 2)?;
    let gate = tape.sigmoid(logits);
    tape.mul(x, gate)
}

pub fn channel_attention(t: &Tensor, params: &ParamBundle, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let x = tape.constant(t.clone());
    let y = channel_attention_on(&mut tape, x, &p, prefix)?;
    Ok(tape.value(y).clone())
}

pub fn spatial_attention(t: &Tensor, params: &ParamBundle, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let x = tape.constant(t.clone());
    let y = spatial_attention_on(&mut tape, x, &p, prefix)?;
    Ok(tape.value(y).clone())
}
