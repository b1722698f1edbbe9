//! Dense-area focusing: the focus bank acts as a small set of agents in a
//! two-stage sigmoid-gated attention over the full feature map, added to a
//! depthwise-separable residual.
//!
//! Parameter names (prefix `dafm`):
//! - `dafm.bank.w` `[d, C, 1, 1]`, `dafm.bank.b` `[d]`: focus bank projection
//! - `dafm.wq`, `dafm.wk`, `dafm.wv` `[d, C]`
//! - `dafm.b_fwd`, `dafm.b_bwd` `[max_agents, 1]`: per-agent gate biases
//! - `dafm.wo` `[C, d]`: output projection, identity at init when `d == C`
//! - `dafm.dw` `[C, 1, k, k]`, `dafm.pw` `[C, C, 1, 1]`: residual branch

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::density::DensityMap;
use crate::error::{invalid, Result};
use crate::ops::pooled_extent;
use crate::params::{ParamBuilder, ParamBundle};
use crate::region::{focus_bank_on, refine_mask, threshold_mask, BinaryMask, RegionSet, Threshold, FOCUS_POOL};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_AGENTS: usize = 64;
pub const DEFAULT_DW_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DafmConfig {
    pub channels: usize,
    /// Attention width `d`.
    pub width: usize,
    pub max_agents: usize,
    pub dw_kernel: usize,
    pub threshold: Threshold,
}

impl DafmConfig {
    pub fn new(channels: usize, width: usize) -> Self {
        Self {
            channels,
            width,
            max_agents: DEFAULT_MAX_AGENTS,
            dw_kernel: DEFAULT_DW_KERNEL,
            threshold: Threshold::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.max_agents == 0 {
            return Err(invalid("channels, width and max_agents must be positive"));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(invalid(format!("depthwise kernel {} must be odd", self.dw_kernel)));
        }
        Ok(())
    }

    pub fn declare(&self, b: &mut ParamBuilder) -> Result<()> {
        self.validate()?;
        let (c, d) = (self.channels, self.width);
        b.conv("dafm.bank", c, d, 1, true)?;
        for name in ["dafm.wq", "dafm.wk", "dafm.wv"] {
            b.uniform(name, &[d, c], c)?;
        }
        b.zeros("dafm.b_fwd", &[self.max_agents, 1])?;
        b.zeros("dafm.b_bwd", &[self.max_agents, 1])?;
        if d == c {
            b.tensor("dafm.wo", Tensor::eye(c)?)?;
        } else {
            b.uniform("dafm.wo", &[c, d], d)?;
        }
        let k = self.dw_kernel;
        b.uniform("dafm.dw", &[c, 1, k, k], k * k)?;
        b.uniform("dafm.pw", &[c, c, 1, 1], c)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamBundle> {
        let mut b = ParamBuilder::new(seed);
        self.declare(&mut b)?;
        Ok(b.finish())
    }
}

/// Bank cells whose pooling window touches an active cell of `mask`, in
/// row-major order. Beyond `max_agents`, the cells covering the most active
/// pixels win (ties to the lower index).
pub fn select_agents(mask: &BinaryMask, max_agents: usize) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    let (bh, bw) = (
        pooled_extent(h, FOCUS_POOL, FOCUS_POOL),
        pooled_extent(w, FOCUS_POOL, FOCUS_POOL),
    );
    let mut coverage = vec![0usize; bh * bw];
    for (r, c) in mask.active_points() {
        coverage[(r / FOCUS_POOL).min(bh - 1) * bw + (c / FOCUS_POOL).min(bw - 1)] += 1;
    }
    let mut cells: Vec<usize> = (0..coverage.len()).filter(|&i| coverage[i] > 0).collect();
    if cells.len() > max_agents {
        cells.sort_by(|&a, &b| coverage[b].cmp(&coverage[a]).then(a.cmp(&b)));
        cells.truncate(max_agents);
        cells.sort_unstable();
    }
    cells
}

/// `[C, H, W]` to `[H*W, C]`.
fn flatten_pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    let m = tape.reshape(x, &[c, h * w])?;
    tape.transpose(m)
}

fn check_width(tape: &Tape, a: Var, b: Var, what: &str) -> Result<usize> {
    let (_, da) = tape.value(a).matrix_dims()?;
    let (_, db) = tape.value(b).matrix_dims()?;
    if da != db {
        return Err(invalid(format!("{what}: width {da} does not match {db}")));
    }
    Ok(da)
}

/// Rows of `X` projected by `wq`, `wk`, `wv` (each `[d, C]`).
pub fn project_qkv_on(tape: &mut Tape, x: Var, p: &Bound) -> Result<(Var, Var, Var)> {
    let flat = flatten_pixels(tape, x)?;
    let mut proj = |name: &str| -> Result<Var> {
        let w = p.var(name)?;
        let wt = tape.transpose(w)?;
        tape.matmul(flat, wt)
    };
    Ok((proj("dafm.wq")?, proj("dafm.wk")?, proj("dafm.wv")?))
}

/// `sigmoid(N K^T / sqrt(d) + b) V`, with `b` `[n, 1]` broadcast along keys.
pub fn ifam_stage1_on(tape: &mut Tape, bank: Var, k: Var, v: Var, b: Var) -> Result<Var> {
    let d = check_width(tape, bank, k, "stage 1 keys")?;
    check_width(tape, bank, v, "stage 1 values")?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(bank, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let s = tape.add(s, b)?;
    let gate = tape.sigmoid(s);
    tape.matmul(gate, v)
}

/// `sigmoid(Q N^T / sqrt(d) + b^T) O_A`, with `b` `[n, 1]` broadcast along queries.
pub fn ifam_stage2_on(tape: &mut Tape, q: Var, bank: Var, o_a: Var, b: Var) -> Result<Var> {
    let d = check_width(tape, q, bank, "stage 2 queries")?;
    let nt = tape.transpose(bank)?;
    let s = tape.matmul(q, nt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let bt = tape.transpose(b)?;
    let s = tape.add(s, bt)?;
    let gate = tape.sigmoid(s);
    tape.matmul(gate, o_a)
}

fn run_plain<const N: usize>(
    inputs: [&Tensor; N],
    f: impl FnOnce(&mut Tape, [Var; N]) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars)?;
    Ok(tape.value(out).clone())
}

/// Projections of `x` as `[L, d]` matrices.
pub fn project_qkv(x: &Tensor, params: &ParamBundle) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let (q, k, v) = project_qkv_on(&mut tape, xv, &p)?;
    Ok((tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()))
}

pub fn ifam_stage1(bank: &Tensor, k: &Tensor, v: &Tensor, b: &Tensor) -> Result<Tensor> {
    run_plain([bank, k, v, b], |t, [n, k, v, b]| ifam_stage1_on(t, n, k, v, b))
}

pub fn ifam_stage2(q: &Tensor, bank: &Tensor, o_a: &Tensor, b: &Tensor) -> Result<Tensor> {
    run_plain([q, bank, o_a, b], |t, [q, n, o, b]| ifam_stage2_on(t, q, n, o, b))
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct DafmTrace {
    pub out: Var,
    /// Selected bank rows `[n, d]`; absent when no region was found.
    pub agents: Option<Var>,
    pub o_a: Option<Var>,
    /// Multiply-adds spent in projections, both attention stages and `wo`.
    pub ifam_macs: u64,
}

/// IFAM on the feature map `x` with agents taken from the masked focus bank.
/// Returns the `[C, H, W]` attention output, the agent rows, `O_A` and the
/// multiply-adds of the attention proper.
fn ifam_on(tape: &mut Tape, x: Var, mask: Var, agents: &[usize], p: &Bound) -> Result<(Var, Var, Var, u64)> {
    let (c, h, w) = tape.value(x).chw()?;
    let bank = focus_bank_on(tape, x, mask, p, "dafm.bank")?;
    let bank_rows = flatten_pixels(tape, bank)?;
    let n = tape.select_rows(bank_rows, agents)?;
    let slots: Vec<usize> = (0..agents.len()).collect();
    let b_fwd = p.var("dafm.b_fwd")?;
    let b_bwd = p.var("dafm.b_bwd")?;
    let b_fwd = tape.select_rows(b_fwd, &slots)?;
    let b_bwd = tape.select_rows(b_bwd, &slots)?;

    let before = tape.macs();
    let (q, k, v) = project_qkv_on(tape, x, p)?;
    let o_a = ifam_stage1_on(tape, n, k, v, b_fwd)?;
    let y = ifam_stage2_on(tape, q, n, o_a, b_bwd)?;
    let wo = p.var("dafm.wo")?;
    let wot = tape.transpose(wo)?;
    let y = tape.matmul(y, wot)?;
    let spent = tape.macs() - before;
    let y = tape.transpose(y)?;
    let y = tape.reshape(y, &[c, h, w])?;
    Ok((y, n, o_a, spent))
}

/// Forward pass with a fixed refined mask (`[1, H, W]`, no gradient).
pub fn dafm_with_mask_on(tape: &mut Tape, x: Var, mask: &BinaryMask, p: &Bound, cfg: &DafmConfig) -> Result<DafmTrace> {
    let (c, h, w) = tape.value(x).chw()?;
    if c != cfg.channels {
        return Err(invalid(format!("expected {} channels, got {c}", cfg.channels)));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(invalid(format!(
            "mask is {}x{}, features are {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let dw = p.var("dafm.dw")?;
    let pw = p.var("dafm.pw")?;
    let residual = tape.depthwise_separable_conv(x, dw, pw)?;
    let agents = select_agents(mask, cfg.max_agents);
    if agents.is_empty() {
        return Ok(DafmTrace {
            out: residual,
            agents: None,
            o_a: None,
            ifam_macs: 0,
        });
    }
    let m = tape.constant(mask.values().clone());
    let (y, n, o_a, ifam_macs) = ifam_on(tape, x, m, &agents, p)?;
    let out = tape.add(y, residual)?;
    Ok(DafmTrace {
        out,
        agents: Some(n),
        o_a: Some(o_a),
        ifam_macs,
    })
}

/// Refined mask of a density map at feature resolution.
pub fn dafm_mask(d: &DensityMap, h: usize, w: usize, mode: Threshold) -> Result<(BinaryMask, RegionSet)> {
    let resized = d.resized(h, w)?;
    refine_mask(&threshold_mask(&resized, mode)?)
}

#[derive(Debug, Clone)]
pub struct DafmOutput {
    pub out: Tensor,
    pub mask: BinaryMask,
    pub regions: RegionSet,
    pub agents: Option<Tensor>,
    pub o_a: Option<Tensor>,
    pub ifam_macs: u64,
    pub total_macs: u64,
}

pub fn dafm_forward(x: &Tensor, d: &DensityMap, params: &ParamBundle, cfg: &DafmConfig) -> Result<DafmOutput> {
    let (_, h, w) = x.chw()?;
    let (mask, regions) = dafm_mask(d, h, w, cfg.threshold)?;
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let trace = dafm_with_mask_on(&mut tape, xv, &mask, &p, cfg)?;
    Ok(DafmOutput {
        out: tape.value(trace.out).clone(),
        agents: trace.agents.map(|v| tape.value(v).clone()),
        o_a: trace.o_a.map(|v| tape.value(v).clone()),
        ifam_macs: trace.ifam_macs,
        total_macs: tape.macs(),
        mask,
        regions,
    })
}

/// Single-head softmax self-attention over all `L` pixels with the same
/// `wq`/`wk`/`wv`/`wo` as IFAM, streamed one query row at a time.
/// Returns the `[C, H, W]` output and its multiply-add count.
pub fn global_attention(x: &Tensor, params: &ParamBundle) -> Result<(Tensor, u64)> {
    let (q, k, v) = project_qkv(x, params)?;
    let (c, h, w) = x.chw()?;
    let (l, d) = q.matrix_dims()?;
    let wo = params.get("dafm.wo")?;
    if wo.matrix_dims()? != (c, d) {
        return Err(invalid(format!("wo shape {:?} does not match [{c}, {d}]", wo.shape())));
    }
    let mut macs = (3 * l * c * d) as u64;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd, wod) = (q.data(), k.data(), v.data(), wo.data());
    let mut out = vec![0.0; c * l];
    let mut scores = vec![0.0; l];
    let mut row = vec![0.0; d];
    for i in 0..l {
        let qi = &qd[i * d..(i + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = scale * qi.iter().zip(&kd[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        row.fill(0.0);
        for (j, s) in scores.iter().enumerate() {
            let a = s / total;
            for (r, vv) in row.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                *r += a * vv;
            }
        }
        for ch in 0..c {
            out[ch * l + i] = wod[ch * d..(ch + 1) * d].iter().zip(&row).map(|(a, b)| a * b).sum();
        }
    }
    macs += (2 * l * l * d + l * d * c) as u64;
    Ok((Tensor::new(vec![c, h, w], out)?, macs))
}
