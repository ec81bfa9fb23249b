//! Closed-form activation-memory and FLOP estimators, cross-checked against
//! the byte meter of an instrumented step.
//!
//! The analytic model enumerates exactly the tensors the tape saves:
//!
//! | primitive    | saved (counted)                                   |
//! |--------------|---------------------------------------------------|
//! | matmul       | each non-parameter operand whose partner needs grad |
//! | layernorm    | normalized input, per-row reciprocal std           |
//! | softmax      | its output                                         |
//! | gelu         | its input                                          |
//! | mse-masked   | the difference `pred - target`                     |
//! | everything else | nothing                                         |
//!
//! Per sample, one encoder layer over `n` tokens of width `D` with `H` heads
//! and hidden width `M` therefore saves `8nD + 2n + 2Hn^2 + 2nM` elements.

use crate::engine::{bim_train_step, mae_train_step, BimPlan, Mode, Model, StepContext};
use crate::error::{BimError, Result};
use crate::harness::optim::{AdamW, AdamWConfig};
use crate::rng::SplitMix64;
use crate::tensor::{DType, Tensor};
use crate::vit::{keep_count, ModelSpec};

/// Saved elements of one transformer layer for one sample.
pub fn layer_elems(n: usize, dim: usize, heads: usize, mlp_dim: usize) -> usize {
    8 * n * dim + 2 * n + 2 * heads * n * n + 2 * n * mlp_dim
}

/// Bridge, decoder layers, final norm, prediction head and loss, for one
/// sample whose block output carries `n_vis` tokens.
pub fn decoder_elems(spec: &ModelSpec, n_vis: usize) -> usize {
    let n = spec.num_patches();
    let dd = spec.decoder_dim;
    let bridge = 2 * n_vis * spec.embed_dim + n_vis;
    let layers = spec.decoder_depth * layer_elems(n, dd, spec.decoder_heads, spec.decoder_mlp_dim());
    let head = 2 * n * dd + n;
    let loss = n * spec.patch_pixels();
    bridge + layers + head + loss
}

/// Visible patch pixels kept by the embedding projection.
pub fn embed_elems(spec: &ModelSpec, n_vis: usize) -> usize {
    n_vis * spec.patch_pixels()
}

/// Which non-encoder terms enter the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub decoder: bool,
    pub embedding: bool,
    pub boundary: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        decoder: true,
        embedding: true,
        boundary: true,
    };
    /// Encoder layers only: the bound under which B blocks give exactly 1/B.
    pub const ENCODER_ONLY: Terms = Terms {
        decoder: false,
        embedding: false,
        boundary: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakBreakdown {
    /// Activation bytes at the worst point of each block phase.
    pub per_block: Vec<usize>,
    pub peak_bytes: usize,
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub optimizer_state_bytes: usize,
}

fn param_counts(spec: &ModelSpec, num_blocks: usize) -> (usize, usize) {
    let (d, m, p) = (spec.embed_dim, spec.mlp_dim(), spec.patch_pixels());
    let (dd, md) = (spec.decoder_dim, spec.decoder_mlp_dim());
    let layer = |d: usize, m: usize| 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
    let embed = p * d + d;
    let decoder = 2 * d + (d * dd + dd) + dd + spec.decoder_depth * layer(dd, md) + 2 * dd + (dd * p + p);
    let per_block = (spec.depth / num_blocks) * layer(d, m) + decoder;
    (embed + num_blocks * per_block, embed + per_block)
}

/// Byte-level breakdown of one training step.
pub fn analytic_breakdown(
    spec: &ModelSpec,
    plan: &BimPlan,
    batch: usize,
    dtype: DType,
    terms: Terms,
) -> Result<PeakBreakdown> {
    spec.validate()?;
    plan.validate(spec)?;
    let n = spec.num_patches();
    let per_layer = |tokens: usize| layer_elems(tokens, spec.embed_dim, spec.heads, spec.mlp_dim());
    let on = |flag: bool, v: usize| if flag { v } else { 0 };
    let counts: Vec<usize> = plan.mask_schedule.iter().map(|&r| keep_count(n, r)).collect();

    let mut per_block = Vec::with_capacity(plan.num_blocks);
    for (i, &n_i) in counts.iter().enumerate() {
        let mut elems = plan.layers_per_block * per_layer(n_i) + on(terms.decoder, decoder_elems(spec, n_i));
        if i == 0 {
            elems += on(terms.embedding, embed_elems(spec, n_i));
        } else {
            elems += on(terms.boundary, counts[i - 1] * spec.embed_dim);
        }
        per_block.push(elems * batch * dtype.size_bytes());
    }
    let (params, largest) = param_counts(spec, plan.num_blocks);
    let grad = match plan.mode {
        Mode::Bim => largest,
        Mode::Mae => params,
    };
    let s = dtype.size_bytes();
    Ok(PeakBreakdown {
        peak_bytes: per_block.iter().copied().max().unwrap_or(0),
        per_block,
        param_bytes: params * s,
        grad_bytes: grad * s,
        optimizer_state_bytes: 2 * params * s,
    })
}

/// Peak saved-activation bytes of one step under `plan`.
pub fn analytic_peak(spec: &ModelSpec, plan: &BimPlan, batch: usize, dtype: DType) -> Result<usize> {
    Ok(analytic_breakdown(spec, plan, batch, dtype, Terms::ALL)?.peak_bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub mode: Mode,
    pub analytic_peak_bytes: usize,
    pub measured_peak_bytes: usize,
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub optimizer_state_bytes: usize,
}

impl MemoryRow {
    /// `|analytic - measured| / measured`.
    pub fn relative_gap(&self) -> f64 {
        (self.analytic_peak_bytes as f64 - self.measured_peak_bytes as f64).abs() / self.measured_peak_bytes as f64
    }
}

/// Measured and analytic peaks of both modes at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub batch: usize,
    pub summary: String,
    pub plan: MemoryRow,
    pub mae: MemoryRow,
    /// Measured plan peak over measured MAE peak.
    pub ratio_vs_mae: f64,
    pub analytic_ratio_vs_mae: f64,
}

/// Default ceiling on analytic step memory for [`compare_peak`].
pub const DEFAULT_BUDGET_BYTES: usize = 2 << 30;

pub fn compare_peak(spec: &ModelSpec, plan: &BimPlan, batch: usize) -> Result<MemoryReport> {
    compare_peak_within(spec, plan, batch, DEFAULT_BUDGET_BYTES, 0)
}

fn measure(spec: &ModelSpec, plan: &BimPlan, images: &Tensor<f32>, seed: u64) -> Result<usize> {
    let mut opt = AdamW::new(AdamWConfig::default());
    let ctx = StepContext { seed, step: 0 };
    let report = match plan.mode {
        Mode::Bim => {
            let mut model = Model::<f32>::new(spec, plan.num_blocks, seed)?;
            bim_train_step(&mut model, images, plan, &mut opt, 0.0, ctx)?
        }
        Mode::Mae => {
            let mut model = Model::<f32>::new(spec, 1, seed)?;
            mae_train_step(&mut model, images, plan.mask_schedule[0], &mut opt, 0.0, ctx)?
        }
    };
    Ok(report.peak_bytes)
}

/// Run one instrumented f32 step of `plan` and of the end-to-end baseline
/// at the plan's first ratio. Fails with a resource error, before
/// allocating anything, when the analytic estimate of either step
/// (activations plus parameters, gradients and moments) exceeds `budget`.
pub fn compare_peak_within(
    spec: &ModelSpec,
    plan: &BimPlan,
    batch: usize,
    budget: usize,
    seed: u64,
) -> Result<MemoryReport> {
    if batch == 0 {
        return Err(BimError::Config("batch must be positive".into()));
    }
    let mae_plan = BimPlan::mae(spec, plan.mask_schedule[0])?;
    let a_plan = analytic_breakdown(spec, plan, batch, DType::F32, Terms::ALL)?;
    let a_mae = analytic_breakdown(spec, &mae_plan, batch, DType::F32, Terms::ALL)?;
    for a in [&a_plan, &a_mae] {
        let total = a.peak_bytes + a.param_bytes + a.grad_bytes + a.optimizer_state_bytes;
        if total > budget {
            return Err(BimError::Resource {
                detail: format!("step needs about {total} bytes, budget is {budget}"),
                estimate_bytes: total as u64,
            });
        }
    }
    let mut rng = SplitMix64::new(seed ^ 0x6d65_6d00);
    let numel = batch * spec.channels * spec.image_size * spec.image_size;
    let images = Tensor::new(
        vec![batch, spec.channels, spec.image_size, spec.image_size],
        (0..numel).map(|_| rng.uniform() as f32).collect(),
    )?;
    let measured_plan = measure(spec, plan, &images, seed)?;
    let measured_mae = measure(spec, &mae_plan, &images, seed)?;
    let row = |mode, a: &PeakBreakdown, measured| MemoryRow {
        mode,
        analytic_peak_bytes: a.peak_bytes,
        measured_peak_bytes: measured,
        param_bytes: a.param_bytes,
        grad_bytes: a.grad_bytes,
        optimizer_state_bytes: a.optimizer_state_bytes,
    };
    Ok(MemoryReport {
        batch,
        summary: format!(
            "image={} patch={} dim={} depth={} heads={} decoder={}x{} blocks={} schedule={:?}",
            spec.image_size,
            spec.patch_size,
            spec.embed_dim,
            spec.depth,
            spec.heads,
            spec.decoder_depth,
            spec.decoder_dim,
            plan.num_blocks,
            plan.mask_schedule
        ),
        plan: row(plan.mode, &a_plan, measured_plan),
        mae: row(Mode::Mae, &a_mae, measured_mae),
        ratio_vs_mae: measured_plan as f64 / measured_mae as f64,
        analytic_ratio_vs_mae: a_plan.peak_bytes as f64 / a_mae.peak_bytes as f64,
    })
}

/// Measured block-wise/end-to-end ratios over encoder depths with everything
/// else fixed; `num_blocks` must divide every depth.
pub fn depth_trend(
    spec: &ModelSpec,
    depths: &[usize],
    num_blocks: usize,
    ratio: f64,
    batch: usize,
) -> Result<Vec<MemoryReport>> {
    depths
        .iter()
        .map(|&depth| {
            let s = ModelSpec { depth, ..spec.clone() };
            let plan = BimPlan::uniform(&s, num_blocks, ratio)?;
            compare_peak(&s, &plan, batch)
        })
        .collect()
}

/// Compute estimate of one pretraining step, per sample.
///
/// Unit totals count encoder layers weighted by the visible fraction
/// `1 - r_i`; absolute figures are multiply-adds times two.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub schedule: Vec<f64>,
    pub visible_fractions: Vec<f64>,
    /// `sum_i (1 - r_i)`: linear-term cost in per-block units.
    pub block_units: f64,
    /// `sum_i L_b (1 - r_i)`: linear-term cost in layer units.
    pub encoder_linear_units: f64,
    /// `sum_i L_b (1 - r_i)^2`: attention-term cost in layer units.
    pub encoder_attention_units: f64,
    pub encoder_linear_flops: f64,
    pub encoder_attention_flops: f64,
    pub decoder_flops: f64,
    /// Encoder (linear plus attention) and decoder FLOPs of each block.
    pub block_encoder_flops: Vec<f64>,
    pub block_decoder_flops: Vec<f64>,
    /// Decoder cost in units of one encoder layer's linear term over all tokens.
    pub decoder_units: f64,
    pub baseline_ratio: f64,
    pub baseline_block_units: f64,
    /// `1 - block_units / baseline_block_units`.
    pub linear_saving: f64,
}

impl FlopReport {
    pub fn total_flops(&self) -> f64 {
        self.encoder_linear_flops + self.encoder_attention_flops + self.decoder_flops
    }
}

fn layer_linear_flops(tokens: f64, dim: usize, mlp: usize) -> f64 {
    let (d, m) = (dim as f64, mlp as f64);
    2.0 * tokens * (4.0 * d * d + 2.0 * d * m)
}

fn layer_attention_flops(tokens: f64, dim: usize) -> f64 {
    4.0 * tokens * tokens * dim as f64
}

fn decoder_flops(spec: &ModelSpec, visible: f64) -> f64 {
    let n = spec.num_patches() as f64;
    let (dd, md) = (spec.decoder_dim, spec.decoder_mlp_dim());
    let bridge = 2.0 * visible * (spec.embed_dim * dd) as f64;
    let layers = spec.decoder_depth as f64 * (layer_linear_flops(n, dd, md) + layer_attention_flops(n, dd));
    let head = 2.0 * n * (dd * spec.patch_pixels()) as f64;
    bridge + layers + head
}

/// Encoder and decoder cost of `plan`, compared with a plan of the same
/// depth masking every block at `baseline_ratio`. Token counts are the
/// continuous `N (1 - r_i)`.
pub fn flop_estimate(spec: &ModelSpec, plan: &BimPlan, baseline_ratio: f64) -> Result<FlopReport> {
    spec.validate()?;
    plan.validate(spec)?;
    if !(0.0..1.0).contains(&baseline_ratio) {
        return Err(BimError::Schedule(format!(
            "baseline ratio {baseline_ratio} outside [0, 1)"
        )));
    }
    let n = spec.num_patches() as f64;
    let lb = plan.layers_per_block as f64;
    let fractions: Vec<f64> = plan.mask_schedule.iter().map(|r| 1.0 - r).collect();
    let block_units: f64 = fractions.iter().sum();
    let linear: Vec<f64> = fractions
        .iter()
        .map(|f| lb * layer_linear_flops(n * f, spec.embed_dim, spec.mlp_dim()))
        .collect();
    let attention: Vec<f64> = fractions
        .iter()
        .map(|f| lb * layer_attention_flops(n * f, spec.embed_dim))
        .collect();
    let encoder_linear_flops: f64 = linear.iter().sum();
    let encoder_attention_flops: f64 = attention.iter().sum();
    // One decoder per block; the end-to-end plan has a single block.
    let block_decoder_flops: Vec<f64> = fractions.iter().map(|f| decoder_flops(spec, n * f)).collect();
    let dec: f64 = block_decoder_flops.iter().sum();
    let baseline_block_units = plan.num_blocks as f64 * (1.0 - baseline_ratio);
    Ok(FlopReport {
        schedule: plan.mask_schedule.clone(),
        block_units,
        encoder_linear_units: lb * block_units,
        encoder_attention_units: fractions.iter().map(|f| lb * f * f).sum(),
        encoder_linear_flops,
        encoder_attention_flops,
        decoder_flops: dec,
        block_encoder_flops: linear.iter().zip(&attention).map(|(l, a)| l + a).collect(),
        block_decoder_flops,
        decoder_units: dec / layer_linear_flops(n, spec.embed_dim, spec.mlp_dim()),
        baseline_ratio,
        baseline_block_units,
        linear_saving: 1.0 - block_units / baseline_block_units,
        visible_fractions: fractions,
    })
}

#[cfg(test)]
mod tests;
