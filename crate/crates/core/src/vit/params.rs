use crate::error::{BimError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, ParamId, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Block unit owning the parameter (embedding belongs to block 0).
    pub block: usize,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

/// Flat, ordered parameter storage. Ids are insertion indices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, block: usize) -> ParamId {
        let decay = value.rank() >= 2;
        self.params.push(Param {
            name: name.into(),
            value,
            block,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn block(&self, id: ParamId) -> usize {
        self.params[id.0].block
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_block(&self, block: usize) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.block == block).map(|(i, _)| i).collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.params.iter().map(|p| p.value.size_bytes()).sum()
    }

    /// Leaf node for a parameter in `g`.
    pub fn node(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        let p = &self.params[id.0];
        g.param(id, &p.value, Some(p.block))
    }

    /// Replace a value by name, checking the shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| BimError::Contract(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(BimError::Contract(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits. Used to check frozen weights.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for &id in ids {
            let p = &self.params[id.0];
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Xavier/Glorot uniform matrix `[fan_in, fan_out]`.
pub fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.uniform_range(-limit, limit)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(std * rng.normal())).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
