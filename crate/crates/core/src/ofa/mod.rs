//! Nested backbones cut at block boundaries, linear probing, and the
//! joint-versus-independent training cost comparison.

use crate::engine::{BimPlan, Model};
use crate::error::{BimError, Result};
use crate::harness::data::Dataset;
use crate::harness::optim::{AdamW, AdamWConfig};
use crate::memory::flop_estimate;
use crate::rng::{purpose, SplitMix64};
use crate::tensor::{GradTable, Graph, NodeId, ParamId, Scalar, Tensor};
use crate::vit::{LayerNormParams, MaskState, ModelSpec, ParamStore, PatchEmbed, TransformerLayer};

/// The first `k` blocks of a jointly trained encoder plus a final LayerNorm.
///
/// Parameter tensors share storage with the model they were cut from.
/// The final norm is the LayerNorm of block `k`'s bridge, which was trained
/// to normalize exactly this output.
#[derive(Debug, Clone)]
pub struct BackbonePrefix<T> {
    pub depth_index: usize,
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub embed: PatchEmbed<T>,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNormParams,
}

pub fn truncate_backbone<T: Scalar>(model: &Model<T>, k: usize) -> Result<BackbonePrefix<T>> {
    if k == 0 || k > model.num_blocks() {
        return Err(BimError::Contract(format!(
            "prefix depth {k} outside 1..={}",
            model.num_blocks()
        )));
    }
    Ok(BackbonePrefix {
        depth_index: k,
        spec: model.spec.clone(),
        store: model.store.clone(),
        embed: model.embed.clone(),
        layers: model.units[..k].iter().flat_map(|u| u.layers.iter().cloned()).collect(),
        norm: model.units[k - 1].bridge.norm,
    })
}

impl<T: Scalar> BackbonePrefix<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Embedding and encoder layers.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed.proj.weight, self.embed.proj.bias];
        ids.extend(self.layers.iter().flat_map(|l| l.params()));
        ids
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }

    pub fn param_names(&self, ids: &[ParamId]) -> Vec<String> {
        ids.iter().map(|&id| self.store.get(id).name.clone()).collect()
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint(&self.params())
    }

    /// Encoder output before the final norm.
    pub fn encode(&self, g: &mut Graph<T>, images: &Tensor<T>, masks: Option<&[MaskState]>) -> Result<NodeId> {
        let mut x = match masks {
            Some(m) => self.embed.forward_visible(g, &self.store, images, m)?,
            None => self.embed.forward(g, &self.store, images)?,
        };
        for layer in &self.layers {
            x = layer.forward(g, &self.store, x)?;
        }
        Ok(x)
    }

    /// Mean over tokens of the normalized output: `[B, D]` in f64.
    pub fn features(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let x = self.encode(&mut g, images, None)?;
        let y = self.norm.forward(&mut g, &self.store, x)?;
        let v = g.value(y)?;
        let (b, n, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let data = v.data();
        Ok((0..b)
            .map(|bi| {
                let mut f = vec![0.0; d];
                for t in 0..n {
                    for (j, fj) in f.iter_mut().enumerate() {
                        *fj += data[(bi * n + t) * d + j].as_f64();
                    }
                }
                f.iter_mut().for_each(|v| *v /= n as f64);
                f
            })
            .collect())
    }

    pub fn dataset_features(&self, data: &Dataset, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(data.count);
        let idx: Vec<usize> = (0..data.count).collect();
        for part in idx.chunks(chunk.max(1)) {
            out.extend(self.features(&data.batch::<T>(part)?)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            lr: 0.01,
            weight_decay: 0.0,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub depth_index: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub epochs: usize,
    pub config_hash: u64,
}

/// Softmax-regression classifier over fixed features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    pub store: ParamStore<f64>,
}

impl LinearClassifier {
    pub fn new(dim: usize, classes: usize) -> Self {
        let mut store = ParamStore::new();
        store.add("probe.weight", Tensor::zeros(&[dim, classes]), 0);
        store.add("probe.bias", Tensor::zeros(&[classes]), 0);
        Self { classes, dim, store }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let w = self.store.value(ParamId(0)).data();
        let b = self.store.value(ParamId(1)).data();
        (0..self.classes)
            .map(|c| {
                b[c] + x
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * w[j * self.classes + c])
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..self.classes).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }

    /// Cross-entropy gradient `(softmax - onehot) / n` pushed through the
    /// linear map.
    fn gradients(&self, xs: &[&[f64]], ys: &[u32]) -> GradTable<f64> {
        let (d, c) = (self.dim, self.classes);
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let l = self.logits(x);
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..c {
                let delta = (e[k] / z - if k == y as usize { 1.0 } else { 0.0 }) * scale;
                gb[k] += delta;
                for j in 0..d {
                    gw[j * c + k] += x[j] * delta;
                }
            }
        }
        [
            (ParamId(0), Tensor::from_parts(vec![d, c], gw)),
            (ParamId(1), Tensor::from_parts(vec![c], gb)),
        ]
        .into_iter()
        .collect()
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[u32]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y as usize)
            .count();
        hits as f64 / xs.len() as f64
    }
}

/// Per-dimension mean and standard deviation of `rows`.
fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            std[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    (mean, std)
}

/// Train a linear classifier on standardized features with AdamW and report
/// train/validation accuracy. Feature rows and labels are aligned.
pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[u32], cfg: &ProbeConfig) -> Result<(f64, f64)> {
    if features.len() != labels.len() || features.len() < 2 {
        return Err(BimError::Contract(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.batch_size == 0 {
        return Err(BimError::Config(
            "probe needs val_fraction in [0, 1) and batch_size >= 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    SplitMix64::derive(cfg.seed, &[purpose::PROBE, 0]).shuffle(&mut order);
    let n_val = (features.len() as f64 * cfg.val_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);

    let train_raw: Vec<Vec<f64>> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let (mean, std) = moments(&train_raw);
    let standardize =
        |r: &Vec<f64>| -> Vec<f64> { r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xtr: Vec<Vec<f64>> = train_raw.iter().map(standardize).collect();
    let ytr: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
    let xva: Vec<Vec<f64>> = val_idx.iter().map(|&i| standardize(&features[i])).collect();
    let yva: Vec<u32> = val_idx.iter().map(|&i| labels[i]).collect();

    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(2);
    let mut clf = LinearClassifier::new(xtr[0].len(), classes);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = SplitMix64::derive(cfg.seed, &[purpose::PROBE, 1]);
    let mut perm: Vec<usize> = (0..xtr.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut perm);
        for chunk in perm.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| xtr[i].as_slice()).collect();
            let ys: Vec<u32> = chunk.iter().map(|&i| ytr[i]).collect();
            let grads = clf.gradients(&xs, &ys);
            opt.step(&mut clf.store, &grads, cfg.lr)?;
        }
    }
    Ok((clf.accuracy(&xtr, &ytr), clf.accuracy(&xva, &yva)))
}

/// Linear probe on mean-pooled prefix features. The prefix is frozen: its
/// parameter fingerprint is checked before and after.
pub fn linear_probe<T: Scalar>(prefix: &BackbonePrefix<T>, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| BimError::Contract("linear probing needs a labeled dataset".into()))?;
    data.check_spec(&prefix.spec)?;
    let before = prefix.fingerprint();
    let feats = prefix.dataset_features(data, 128)?;
    let (train_accuracy, val_accuracy) = fit_linear_probe(&feats, labels, cfg)?;
    if prefix.fingerprint() != before {
        return Err(BimError::Contract("probe training modified backbone weights".into()));
    }
    Ok(ProbeResult {
        depth_index: prefix.depth_index,
        train_accuracy,
        val_accuracy,
        epochs: cfg.epochs,
        config_hash: cfg.hash() ^ prefix.depth_index as u64,
    })
}

/// `1 - cost(joint block-wise run) / sum_d cost(independent run at depth d)`.
///
/// `depths` must be the block boundaries of `plan` (block `k` ends at
/// `depths[k]`). Independent runs mask at the plan's first ratio and carry
/// one decoder each; with `include_decoder` false only the encoder linear
/// term counts.
pub fn training_cost_saving(spec: &ModelSpec, depths: &[usize], plan: &BimPlan, include_decoder: bool) -> Result<f64> {
    plan.validate(spec)?;
    let expected: Vec<usize> = (1..=plan.num_blocks).map(|k| k * plan.layers_per_block).collect();
    if depths != expected.as_slice() {
        return Err(BimError::Contract(format!(
            "depths {depths:?} are not the block boundaries {expected:?} of the joint model"
        )));
    }
    let cost = |s: &ModelSpec, p: &BimPlan| -> Result<f64> {
        let r = flop_estimate(s, p, p.mask_schedule[0])?;
        Ok(r.encoder_linear_units + if include_decoder { r.decoder_units } else { 0.0 })
    };
    let joint = cost(spec, plan)?;
    let mut independent = 0.0;
    for &d in depths {
        let s = ModelSpec {
            depth: d,
            ..spec.clone()
        };
        independent += cost(&s, &BimPlan::mae(&s, plan.mask_schedule[0])?)?;
    }
    Ok(1.0 - joint / independent)
}
