use super::embed::sincos_pos_embed;
use super::layers::{LayerNormParams, Linear, TransformerLayer};
use super::mask::MaskState;
use super::params::{normal_init, ParamStore};
use super::ModelSpec;
use crate::error::{dim_err, BimError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, ParamId, Scalar, Tensor};

/// Block-local LayerNorm followed by the encoder-to-decoder width projection.
#[derive(Debug, Clone)]
pub struct Bridge {
    pub norm: LayerNormParams,
    pub proj: Linear,
}

impl Bridge {
    pub fn new<T: Scalar>(
        spec: &ModelSpec,
        store: &mut ParamStore<T>,
        name: &str,
        block: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            norm: LayerNormParams::new(store, &format!("{name}.norm"), spec.embed_dim, block),
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                spec.embed_dim,
                spec.decoder_dim,
                block,
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.norm.gamma, self.norm.beta, self.proj.weight, self.proj.bias]
    }
}

/// Lightweight decoder: mask tokens, positions, transformer layers, pixel head.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub mask_token: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNormParams,
    pub pred: Linear,
    pub pos: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        spec: &ModelSpec,
        store: &mut ParamStore<T>,
        name: &str,
        block: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mask_token = store.add(
            format!("{name}.mask_token"),
            normal_init(&[1, spec.decoder_dim], 0.02, rng),
            block,
        );
        let layers = (0..spec.decoder_depth)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("{name}.layers.{l}"),
                    spec.decoder_dim,
                    spec.decoder_heads,
                    spec.decoder_mlp_dim(),
                    block,
                    rng,
                )
            })
            .collect();
        let norm = LayerNormParams::new(store, &format!("{name}.norm"), spec.decoder_dim, block);
        let pred = Linear::new(
            store,
            &format!("{name}.pred"),
            spec.decoder_dim,
            spec.patch_pixels(),
            block,
            rng,
        );
        Ok(Self {
            mask_token,
            layers,
            norm,
            pred,
            pos: sincos_pos_embed(spec.grid_side(), spec.decoder_dim)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.mask_token];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend([self.norm.gamma, self.norm.beta, self.pred.weight, self.pred.bias]);
        v
    }

    /// Predict every patch of every sample: `[B, n_visible, D] -> [B, N, patch_pixels]`.
    ///
    /// Visible tokens pass through the bridge; a learned mask token fills
    /// every patch absent from `kept_ids`; the sequence is unshuffled into
    /// grid order and given decoder positions before the decoder layers.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bridge: &Bridge,
        block_output: NodeId,
        masks: &[MaskState],
    ) -> Result<NodeId> {
        let s = g.shape(block_output)?.to_vec();
        if s.len() != 3 || s[0] != masks.len() {
            return Err(dim_err(
                "local_decoder_forward",
                format!("tokens {s:?} for {} mask states", masks.len()),
            ));
        }
        let (b, n_vis) = (s[0], s[1]);
        let n = self.pos.rows();
        for m in masks {
            if m.num_visible() != n_vis || m.num_patches() != n {
                return Err(BimError::Contract(format!(
                    "mask state has {} visible of {} patches, tokens carry {n_vis} of {n}",
                    m.num_visible(),
                    m.num_patches()
                )));
            }
        }
        let n_mask = n - n_vis;
        let dd = self.pos.last_dim();

        let x = bridge.norm.forward(g, store, block_output)?;
        let x = bridge.proj.forward(g, store, x)?;
        let vis = g.reshape(x, &[b * n_vis, dd])?;
        let seq = if n_mask > 0 {
            let token = store.node(g, self.mask_token);
            let fill = g.gather_rows(token, &vec![0; b * n_mask])?;
            g.concat_rows(vis, fill)?
        } else {
            vis
        };
        let mut order = Vec::with_capacity(b * n);
        for (bi, m) in masks.iter().enumerate() {
            for &pos in &m.restore_perm {
                order.push(if pos < n_vis {
                    bi * n_vis + pos
                } else {
                    b * n_vis + bi * n_mask + (pos - n_vis)
                });
            }
        }
        let x = g.gather_rows(seq, &order)?;
        let x = g.reshape(x, &[b, n, dd])?;
        let pos = g.constant(self.pos.clone());
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        let x = self.norm.forward(g, store, x)?;
        self.pred.forward(g, store, x)
    }
}

/// Per-patch standardization used when reconstructing normalized pixels.
pub fn normalize_patches<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let d = patches.last_dim();
    let eps = T::from_f64(1e-6);
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut out = Vec::with_capacity(patches.numel());
    for row in patches.data().chunks_exact(d) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let rs = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * rs));
    }
    Tensor::from_parts(patches.shape().to_vec(), out)
}

/// Mean squared error over masked patches only.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target_patches: &Tensor<T>,
    masks: &[MaskState],
    norm_pix: bool,
) -> Result<NodeId> {
    let flags: Vec<bool> = masks.iter().flat_map(|m| m.mask.iter().map(|&v| v == 1)).collect();
    if norm_pix {
        g.mse_masked(pred, &normalize_patches(target_patches), &flags)
    } else {
        g.mse_masked(pred, target_patches, &flags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ModelSpec, ParamStore<f64>, Bridge, Decoder<f64>) {
        let spec = ModelSpec::tiny();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(5);
        let bridge = Bridge::new(&spec, &mut store, "bridge.0", 0, &mut rng);
        let dec = Decoder::new(&spec, &mut store, "decoder.0", 0, &mut rng).unwrap();
        (spec, store, bridge, dec)
    }

    fn tokens(g: &mut Graph<f64>, b: usize, n: usize, d: usize, seed: u64) -> NodeId {
        let mut rng = SplitMix64::new(seed);
        let data = (0..b * n * d).map(|_| rng.normal()).collect();
        g.input(Tensor::new(vec![b, n, d], data).unwrap())
    }

    #[test]
    fn covers_all_patches() {
        let (spec, store, bridge, dec) = setup();
        let mut rng = SplitMix64::new(1);
        let masks: Vec<_> = (0..2)
            .map(|_| MaskState::sample(spec.num_patches(), 0.75, &mut rng).unwrap())
            .collect();
        let mut g = Graph::new();
        let x = tokens(&mut g, 2, masks[0].num_visible(), spec.embed_dim, 2);
        let pred = dec.forward(&mut g, &store, &bridge, x, &masks).unwrap();
        assert_eq!(g.shape(pred).unwrap(), &[2, 16, 4]);
    }

    #[test]
    fn zeroed_head_predicts_bias() {
        let (spec, mut store, bridge, dec) = setup();
        let w = store.value(dec.pred.weight).shape().to_vec();
        *store.value_mut(dec.pred.weight) = Tensor::zeros(&w);
        let beta = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.4]).unwrap();
        *store.value_mut(dec.pred.bias) = beta.clone();
        let masks = vec![MaskState::sample(16, 0.5, &mut SplitMix64::new(0)).unwrap()];
        let mut g = Graph::new();
        let x = tokens(&mut g, 1, 8, spec.embed_dim, 3);
        let pred = dec.forward(&mut g, &store, &bridge, x, &masks).unwrap();
        let v = g.value(pred).unwrap();
        for r in 0..v.rows() {
            assert_eq!(v.row(r), beta.data());
        }
    }

    #[test]
    fn visible_order_does_not_matter_after_unshuffle() {
        let (spec, store, bridge, dec) = setup();
        let m = MaskState::sample(16, 0.5, &mut SplitMix64::new(11)).unwrap();
        let mut rng = SplitMix64::new(12);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..spec.embed_dim).map(|_| rng.normal()).collect())
            .collect();

        let run = |perm: &[usize]| {
            let kept: Vec<usize> = perm.iter().map(|&i| m.kept_ids[i]).collect();
            let ms = vec![MaskState::from_kept(16, kept).unwrap()];
            let data: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![1, 8, spec.embed_dim], data).unwrap());
            let p = dec.forward(&mut g, &store, &bridge, x, &ms).unwrap();
            g.value(p).unwrap().clone()
        };
        let a = run(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let b = run(&[5, 2, 7, 0, 1, 6, 3, 4]);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn inconsistent_mask_is_contract_error() {
        let (spec, store, bridge, dec) = setup();
        let masks = vec![MaskState::sample(16, 0.5, &mut SplitMix64::new(0)).unwrap()];
        let mut g = Graph::new();
        let x = tokens(&mut g, 1, 5, spec.embed_dim, 3);
        assert!(matches!(
            dec.forward(&mut g, &store, &bridge, x, &masks),
            Err(BimError::Contract(_))
        ));
    }

    fn brute_force_loss(pred: &[f64], target: &[f64], masks: &[MaskState], p: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, m) in masks.iter().enumerate() {
            let n = m.num_patches();
            for patch in 0..n {
                if m.mask[patch] == 1 {
                    let mut sq = 0.0;
                    for j in 0..p {
                        let i = (bi * n + patch) * p + j;
                        sq += (pred[i] - target[i]).powi(2);
                    }
                    total += sq / p as f64;
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn loss_cases() {
        let mut rng = SplitMix64::new(21);
        let masks: Vec<_> = (0..3).map(|_| MaskState::sample(16, 0.6, &mut rng).unwrap()).collect();
        let shape = [3, 16, 5];
        let target: Vec<f64> = (0..240).map(|_| rng.uniform()).collect();
        let target = Tensor::new(shape.to_vec(), target).unwrap();

        let mut g = Graph::new();
        let same = g.input(target.clone());
        let l = reconstruction_loss(&mut g, same, &target, &masks, false).unwrap();
        assert_eq!(g.value(l).unwrap().item(), 0.0);

        let all_masked = vec![MaskState::from_kept(16, vec![]).unwrap(); 3];
        let shifted = g.input(target.map(|v| v + 0.5));
        let l = reconstruction_loss(&mut g, shifted, &target, &all_masked, false).unwrap();
        assert!((g.value(l).unwrap().item() - 0.25).abs() < 1e-12);

        let pred: Vec<f64> = (0..240).map(|_| rng.normal()).collect();
        let p = g.input(Tensor::new(shape.to_vec(), pred.clone()).unwrap());
        let l = reconstruction_loss(&mut g, p, &target, &masks, false).unwrap();
        let expect = brute_force_loss(&pred, target.data(), &masks, 5);
        assert!((g.value(l).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn normalized_targets_have_unit_variance() {
        let t = Tensor::<f64>::from_f64(&[1, 2, 4], &[0.0, 1.0, 2.0, 3.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let n = normalize_patches(&t);
        let row = n.row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
        assert!(n.row(1).iter().all(|&v| v == 0.0));
    }
}
