use super::params::{xavier_uniform, ParamStore};
use crate::error::{dim_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, ParamId, Scalar, Tensor};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        block: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng), block);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), block);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = store.node(g, self.weight);
        let b = store.node(g, self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, block: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), block);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), block);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = store.node(g, self.gamma);
        let beta = store.node(g, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// Pre-norm transformer layer: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        block: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            dim,
            heads,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim, block),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, block, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, block, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim, block),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_dim, block, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_dim, dim, block, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend([self.norm1.gamma, self.norm1.beta]);
        v.extend([self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias]);
        v.extend([self.norm2.gamma, self.norm2.beta]);
        v.extend([self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]);
        v
    }

    /// Post-softmax attention weights `[B, H, n, n]` are returned alongside the output.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let s = g.shape(x)?.to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(dim_err(
                "encoder_block_layer",
                format!("expected [batch, n, {}], got {s:?}", self.dim),
            ));
        }
        let (b, n, d, h) = (s[0], s[1], self.dim, self.heads);
        let hd = d / h;

        let y = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, y)?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, hd])?;
        let qkv = g.transpose(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, b * h * n * hd])?;
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = g.gather_rows(qkv, &[i])?;
            split.push(g.reshape(part, &[b, h, n, hd])?);
        }
        let (q, k, v) = (split[0], split[1], split[2]);
        let kt = g.transpose(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        let out = self.proj.forward(g, store, ctx)?;
        let x = g.add(x, out)?;

        let y = self.norm2.forward(g, store, x)?;
        let hdn = self.fc1.forward(g, store, y)?;
        let hdn = g.gelu(hdn)?;
        let out = self.fc2.forward(g, store, hdn)?;
        Ok((g.add(x, out)?, attn))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_attention(g, store, x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(store: &mut ParamStore<f64>) -> TransformerLayer {
        TransformerLayer::new(store, "l", 64, 4, 256, 0, &mut SplitMix64::new(1))
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn preserves_shape() {
        let mut store = ParamStore::new();
        let l = layer(&mut store);
        let mut g = Graph::new();
        let x = g.input(random(&[2, 16, 64], 3));
        let y = l.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y).unwrap(), &[2, 16, 64]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let l = layer(&mut store);
        let mut g = Graph::new();
        let x = g.input(random(&[2, 16, 64], 4));
        let (_, attn) = l.forward_with_attention(&mut g, &store, x).unwrap();
        let a = g.value(attn).unwrap();
        assert_eq!(a.shape(), &[2, 4, 16, 16]);
        for r in 0..a.rows() {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut store = ParamStore::new();
        let l = layer(&mut store);
        let mut g = Graph::new();
        let x = g.input(random(&[2, 16, 32], 5));
        assert!(l.forward(&mut g, &store, x).is_err());
    }
}
