//! Block-wise training scheduler and the end-to-end baseline step.
//!
//! A BIM step walks the encoder block by block. For block `i` it runs the
//! block's layers on the previous boundary activation, decodes the block
//! output with the block's own decoder, backpropagates the local loss with
//! the gradient boundary at the block start, updates the block's parameters,
//! releases every saved tensor except the block output, and finally drops
//! extra tokens on the way into block `i + 1`.

mod plan;

pub use plan::{BimPlan, Mode};

use crate::error::{BimError, Result};
use crate::harness::optim::AdamW;
use crate::rng::{purpose, SplitMix64};
use crate::tensor::{Graph, NodeId, ParamId, Scalar, Tensor};
use crate::vit::{
    incremental_drop, patchify, reconstruction_loss, sample_masks, Bridge, Decoder, ModelSpec, ParamStore, PatchBatch,
    PatchEmbed, TransformerLayer,
};

/// One gradient-isolated encoder block with its bridge and decoder.
#[derive(Debug, Clone)]
pub struct BlockUnit<T> {
    pub block_id: usize,
    pub layers: Vec<TransformerLayer>,
    pub bridge: Bridge,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> BlockUnit<T> {
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Encoder layers, bridge and decoder.
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.encoder_params();
        v.extend(self.bridge.params());
        v.extend(self.decoder.params());
        v
    }
}

/// Patch embedding plus a partitioned encoder.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub embed: PatchEmbed<T>,
    pub units: Vec<BlockUnit<T>>,
}

/// Split `spec.depth` encoder layers into `num_blocks` contiguous blocks of
/// equal size, each with a fresh bridge and decoder. Layer names use the
/// global layer index so prefixes of the encoder are prefixes by name too.
pub fn partition_encoder<T: Scalar>(
    spec: &ModelSpec,
    num_blocks: usize,
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
) -> Result<Vec<BlockUnit<T>>> {
    if num_blocks == 0 || !spec.depth.is_multiple_of(num_blocks) {
        return Err(BimError::Config(format!(
            "encoder depth {} cannot be split into {num_blocks} equal blocks",
            spec.depth
        )));
    }
    let per = spec.depth / num_blocks;
    let mut units = Vec::with_capacity(num_blocks);
    for b in 0..num_blocks {
        let layers = (b * per..(b + 1) * per)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("encoder.{l}"),
                    spec.embed_dim,
                    spec.heads,
                    spec.mlp_dim(),
                    b,
                    rng,
                )
            })
            .collect();
        let bridge = Bridge::new(spec, store, &format!("bridge.{b}"), b, rng);
        let decoder = Decoder::new(spec, store, &format!("decoder.{b}"), b, rng)?;
        units.push(BlockUnit {
            block_id: b,
            layers,
            bridge,
            decoder,
        });
    }
    Ok(units)
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`. An MAE baseline model is a
    /// model with a single block.
    pub fn new(spec: &ModelSpec, num_blocks: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::derive(seed, &[purpose::INIT]);
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(spec, &mut store, &mut rng)?;
        let units = partition_encoder(spec, num_blocks, &mut store, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            embed,
            units,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.units.len()
    }

    pub fn layers_per_block(&self) -> usize {
        self.spec.depth / self.units.len()
    }

    pub fn embed_params(&self) -> Vec<ParamId> {
        vec![self.embed.proj.weight, self.embed.proj.bias]
    }

    /// All parameters trained together with block `i`.
    pub fn block_params(&self, i: usize) -> Vec<ParamId> {
        let mut v = if i == 0 { self.embed_params() } else { Vec::new() };
        v.extend(self.units[i].params());
        v
    }

    /// Tokens after the first `num_blocks` blocks, without incremental drops.
    /// With `masks`, only the visible patches are embedded.
    pub fn forward_encoder(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        masks: Option<&[crate::vit::MaskState]>,
        num_blocks: usize,
    ) -> Result<NodeId> {
        if num_blocks == 0 || num_blocks > self.units.len() {
            return Err(BimError::Contract(format!(
                "block count {num_blocks} outside 1..={}",
                self.units.len()
            )));
        }
        let mut x = match masks {
            Some(m) => self.embed.forward_visible(g, &self.store, images, m)?,
            None => self.embed.forward(g, &self.store, images)?,
        };
        for layer in self.units[..num_blocks].iter().flat_map(|u| u.layers.iter()) {
            x = layer.forward(g, &self.store, x)?;
        }
        Ok(x)
    }

    pub fn all_layers(&self) -> impl Iterator<Item = &TransformerLayer> {
        self.units.iter().flat_map(|u| u.layers.iter())
    }
}

/// Addresses the random draws of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub step: u64,
}

impl StepContext {
    fn rng(&self, what: u64, block: usize) -> SplitMix64 {
        SplitMix64::derive(self.seed, &[what, self.step, block as u64])
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    /// Multiply each block's local loss before backward (counterfactual runs).
    pub loss_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub mode: Mode,
    /// Local reconstruction loss of each block (one entry in MAE mode).
    pub block_losses: Vec<f64>,
    /// Unweighted mean of `block_losses`.
    pub mean_loss: f64,
    /// Peak saved-activation bytes during the step.
    pub peak_bytes: usize,
    /// Peak within each block's phase.
    pub block_peak_bytes: Vec<usize>,
    /// Live bytes right after each block's release.
    pub live_after_release: Vec<usize>,
    /// Visible tokens entering each block.
    pub visible_tokens: Vec<usize>,
    /// Parameters updated by each block's optimizer step.
    pub updated: Vec<Vec<ParamId>>,
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub optimizer_state_bytes: usize,
}

fn check_finite(loss: f64, block: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(BimError::Numeric(format!("block {block} loss is {loss}")))
    }
}

fn batch_of<T: Scalar>(spec: &ModelSpec, images: &Tensor<T>) -> Result<usize> {
    let s = images.shape();
    if s.len() != 4 || s[1] != spec.channels || s[2] != spec.image_size || s[3] != spec.image_size {
        return Err(crate::error::dim_err(
            "train_step",
            format!(
                "expected [B, {c}, {h}, {h}] images, got {s:?}",
                c = spec.channels,
                h = spec.image_size
            ),
        ));
    }
    Ok(s[0])
}

/// One block-wise step.
pub fn bim_train_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    plan: &BimPlan,
    optimizer: &mut AdamW<T>,
    lr: f64,
    ctx: StepContext,
) -> Result<StepReport> {
    bim_train_step_with(model, images, plan, optimizer, lr, ctx, &StepOptions::default())
}

pub fn bim_train_step_with<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    plan: &BimPlan,
    optimizer: &mut AdamW<T>,
    lr: f64,
    ctx: StepContext,
    opts: &StepOptions,
) -> Result<StepReport> {
    if plan.mode != Mode::Bim {
        return Err(BimError::Config("bim_train_step needs a BIM plan".into()));
    }
    plan.validate(&model.spec)?;
    if plan.num_blocks != model.num_blocks() {
        return Err(BimError::Config(format!(
            "plan has {} blocks, model has {}",
            plan.num_blocks,
            model.num_blocks()
        )));
    }
    let Model {
        spec,
        store,
        embed,
        units,
    } = model;
    let batch = batch_of(spec, images)?;
    let target = patchify(images, spec.patch_size)?;
    let param_bytes = store.total_bytes();
    let grad_bytes = (0..units.len())
        .map(|i| {
            let mut ids = units[i].params();
            if i == 0 {
                ids.extend([embed.proj.weight, embed.proj.bias]);
            }
            ids.iter().map(|&id| store.value(id).size_bytes()).sum::<usize>()
        })
        .max()
        .unwrap_or(0);
    let opt_bytes = AdamW::full_state_bytes(store);

    let mut g = Graph::new();
    g.meter_mut().set_constants(param_bytes, grad_bytes, opt_bytes);

    let masks = sample_masks(
        batch,
        spec.num_patches(),
        plan.mask_schedule[0],
        &mut ctx.rng(purpose::MASK, 0),
    )?;
    g.set_block(Some(0));
    let tokens = embed.forward_visible(&mut g, store, images, &masks)?;
    let mut current = PatchBatch { tokens, masks };

    let mut report = StepReport {
        mode: Mode::Bim,
        block_losses: Vec::new(),
        mean_loss: 0.0,
        peak_bytes: 0,
        block_peak_bytes: Vec::new(),
        live_after_release: Vec::new(),
        visible_tokens: Vec::new(),
        updated: Vec::new(),
        param_bytes,
        grad_bytes,
        optimizer_state_bytes: opt_bytes,
    };

    for (i, unit) in units.iter().enumerate() {
        g.set_block(Some(i));
        if i > 0 {
            g.meter_mut().reset_peak();
            let boundary = g
                .boundary(i - 1)
                .ok_or_else(|| BimError::Lifecycle(format!("block {} left no boundary", i - 1)))?;
            current.tokens = boundary;
            current = incremental_drop(&mut g, current, plan.mask_schedule[i], &mut ctx.rng(purpose::DROP, i))?;
        }
        report.visible_tokens.push(current.num_visible());

        let mut x = current.tokens;
        for layer in &unit.layers {
            x = layer.forward(&mut g, store, x)?;
        }
        let pred = unit.decoder.forward(&mut g, store, &unit.bridge, x, &current.masks)?;
        let mut loss = reconstruction_loss(&mut g, pred, &target, &current.masks, spec.norm_pix)?;
        let loss_value = g.value(loss)?.item().as_f64();
        check_finite(loss_value, i)?;
        if let Some(w) = opts.loss_weights.as_ref().and_then(|w| w.get(i)) {
            if *w != 1.0 {
                loss = g.scale(loss, *w)?;
            }
        }

        let grads = g.backward(loss, Some(i))?;
        if let Some(bad) = grads.ids().find(|&id| store.block(id) != i) {
            return Err(BimError::Isolation(format!(
                "step for block {i} produced a gradient for {} (block {})",
                store.get(bad).name,
                store.block(bad)
            )));
        }
        optimizer.step(store, &grads, lr)?;
        report.updated.push(grads.ids().collect());

        if i + 1 < units.len() {
            g.set_boundary(i, x);
        }
        report.block_peak_bytes.push(g.meter().peak());
        g.release_block_activations(i)?;
        report.live_after_release.push(g.meter().live());
        report.block_losses.push(loss_value);
    }
    report.peak_bytes = report.block_peak_bytes.iter().copied().max().unwrap_or(0);
    report.mean_loss = report.block_losses.iter().sum::<f64>() / report.block_losses.len() as f64;
    Ok(report)
}

/// One end-to-end step: forward through every layer, one decoder after the
/// last layer, full backward, a single update.
pub fn mae_train_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    ratio: f64,
    optimizer: &mut AdamW<T>,
    lr: f64,
    ctx: StepContext,
) -> Result<StepReport> {
    if model.num_blocks() != 1 {
        return Err(BimError::Config(format!(
            "the end-to-end baseline needs a single decoder, model has {} blocks",
            model.num_blocks()
        )));
    }
    let Model {
        spec,
        store,
        embed,
        units,
    } = model;
    let batch = batch_of(spec, images)?;
    let target = patchify(images, spec.patch_size)?;
    let param_bytes = store.total_bytes();
    let opt_bytes = AdamW::full_state_bytes(store);

    let mut g = Graph::new();
    g.meter_mut().set_constants(param_bytes, param_bytes, opt_bytes);
    g.set_block(Some(0));
    let masks = sample_masks(batch, spec.num_patches(), ratio, &mut ctx.rng(purpose::MASK, 0))?;
    let mut x: NodeId = embed.forward_visible(&mut g, store, images, &masks)?;
    let unit = &units[0];
    for layer in &unit.layers {
        x = layer.forward(&mut g, store, x)?;
    }
    let pred = unit.decoder.forward(&mut g, store, &unit.bridge, x, &masks)?;
    let loss = reconstruction_loss(&mut g, pred, &target, &masks, spec.norm_pix)?;
    let loss_value = g.value(loss)?.item().as_f64();
    check_finite(loss_value, 0)?;
    let grads = g.backward(loss, None)?;
    optimizer.step(store, &grads, lr)?;
    let peak = g.meter().peak();
    g.release_block_activations(0)?;
    Ok(StepReport {
        mode: Mode::Mae,
        block_losses: vec![loss_value],
        mean_loss: loss_value,
        peak_bytes: peak,
        block_peak_bytes: vec![peak],
        live_after_release: vec![g.meter().live()],
        visible_tokens: vec![masks[0].num_visible()],
        updated: vec![grads.ids().collect()],
        param_bytes,
        grad_bytes: param_bytes,
        optimizer_state_bytes: opt_bytes,
    })
}

/// Forward pass of a step up to block `block`'s local loss, with the step's
/// masks and drops but no updates. Earlier blocks run in the same graph, so
/// `backward(loss, Some(block))` yields exactly that block's step gradients
/// at the current weights.
pub fn block_local_loss<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    plan: &BimPlan,
    ctx: StepContext,
    block: usize,
) -> Result<(Graph<T>, NodeId)> {
    plan.validate(&model.spec)?;
    if plan.num_blocks != model.num_blocks() || block >= plan.num_blocks {
        return Err(BimError::Config(format!(
            "block {block} of a {}-block plan on a {}-block model",
            plan.num_blocks,
            model.num_blocks()
        )));
    }
    let (spec, store) = (&model.spec, &model.store);
    let batch = batch_of(spec, images)?;
    let target = patchify(images, spec.patch_size)?;
    let mut g = Graph::new();
    let masks = sample_masks(
        batch,
        spec.num_patches(),
        plan.mask_schedule[0],
        &mut ctx.rng(purpose::MASK, 0),
    )?;
    g.set_block(Some(0));
    let tokens = model.embed.forward_visible(&mut g, store, images, &masks)?;
    let mut current = PatchBatch { tokens, masks };
    for (i, unit) in model.units[..=block].iter().enumerate() {
        g.set_block(Some(i));
        if i > 0 {
            current = incremental_drop(&mut g, current, plan.mask_schedule[i], &mut ctx.rng(purpose::DROP, i))?;
        }
        for layer in &unit.layers {
            current.tokens = layer.forward(&mut g, store, current.tokens)?;
        }
    }
    let unit = &model.units[block];
    let pred = unit
        .decoder
        .forward(&mut g, store, &unit.bridge, current.tokens, &current.masks)?;
    let loss = reconstruction_loss(&mut g, pred, &target, &current.masks, spec.norm_pix)?;
    Ok((g, loss))
}

/// Dispatch on the plan's mode.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    plan: &BimPlan,
    optimizer: &mut AdamW<T>,
    lr: f64,
    ctx: StepContext,
) -> Result<StepReport> {
    match plan.mode {
        Mode::Bim => bim_train_step(model, images, plan, optimizer, lr, ctx),
        Mode::Mae => mae_train_step(model, images, plan.mask_schedule[0], optimizer, lr, ctx),
    }
}
