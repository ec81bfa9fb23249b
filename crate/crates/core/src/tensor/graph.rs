use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::kernels;
use super::meter::{MemoryMeter, MeterSnapshot};
use super::{Scalar, Tensor};
use crate::error::{dim_err, BimError, Result};

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter in a [`crate::vit::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Scale,
    Transpose,
    Reshape,
    GatherRows,
    ScatterRows,
    ConcatRows,
    LayerNorm,
    SoftmaxLastDim,
    Gelu,
    MseMasked,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
        a_slot: Option<usize>,
        b_slot: Option<usize>,
    },
    Add {
        repeats: usize,
    },
    Scale(T),
    Transpose {
        perm: Vec<usize>,
    },
    Reshape,
    GatherRows {
        ids: Vec<usize>,
        src_rows: usize,
    },
    ScatterRows {
        ids: Vec<usize>,
    },
    ConcatRows {
        first_rows: usize,
    },
    LayerNorm,
    Softmax,
    Gelu,
    MseMasked {
        mask: Vec<bool>,
        scale: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Scale(_) => OpKind::Scale,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::LayerNorm => OpKind::LayerNorm,
            Op::Softmax => OpKind::SoftmaxLastDim,
            Op::Gelu => OpKind::Gelu,
            Op::MseMasked { .. } => OpKind::MseMasked,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Option<Tensor<T>>,
    input_shapes: Vec<Vec<usize>>,
    saved: Vec<Tensor<T>>,
    /// Bytes of `saved` that count as activations (parameters excluded).
    bytes: usize,
    block: Option<usize>,
    requires_grad: bool,
    boundary: bool,
    disposed: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone)]
pub struct GradTable<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradTable<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// Gradients computed outside the tape (e.g. closed-form heads).
impl<T> FromIterator<(ParamId, Tensor<T>)> for GradTable<T> {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor<T>)>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}

/// Eagerly evaluated computation graph with a backward tape.
///
/// Nodes carry an optional block tag. `backward` can stop at a block
/// boundary, and `release_block_activations` disposes a block's saved
/// tensors once its local update is done. Every saved activation is
/// registered with the graph's [`MemoryMeter`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    meter: MemoryMeter,
    current_block: Option<usize>,
    grad_enabled: bool,
    param_nodes: HashMap<ParamId, NodeId>,
    boundary_of: HashMap<usize, NodeId>,
    backward_done: BTreeSet<usize>,
    released: BTreeSet<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct Recorded<T> {
    op: Op<T>,
    value: Tensor<T>,
    saved: Vec<Tensor<T>>,
    bytes: usize,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            meter: MemoryMeter::new(),
            current_block: None,
            grad_enabled: true,
            param_nodes: HashMap::new(),
            boundary_of: HashMap::new(),
            backward_done: BTreeSet::new(),
            released: BTreeSet::new(),
        }
    }

    /// A graph that records values only: nothing is saved, nothing requires grad.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn meter(&self) -> &MemoryMeter {
        &self.meter
    }

    pub fn meter_mut(&mut self) -> &mut MemoryMeter {
        &mut self.meter
    }

    pub fn meter_snapshot(&self) -> MeterSnapshot {
        self.meter.snapshot()
    }

    /// Block tag applied to nodes recorded from now on.
    pub fn set_block(&mut self, block: Option<usize>) {
        self.current_block = block;
    }

    pub fn current_block(&self) -> Option<usize> {
        self.current_block
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        let node = &self.nodes[id.0];
        node.value
            .as_ref()
            .ok_or_else(|| BimError::Lifecycle(format!("node {} was released", id.0)))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize]> {
        Ok(self.value(id)?.shape())
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn block_of(&self, id: NodeId) -> Option<usize> {
        self.nodes[id.0].block
    }

    /// Saved-activation bytes held by a node.
    pub fn node_bytes(&self, id: NodeId) -> usize {
        self.nodes[id.0].bytes
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, inputs: Vec<NodeId>, rec: Recorded<T>) -> NodeId {
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (saved, bytes, inputs) = if requires_grad {
            (rec.saved, rec.bytes, inputs)
        } else {
            (Vec::new(), 0, Vec::new())
        };
        let input_shapes = inputs
            .iter()
            .map(|i| {
                self.nodes[i.0]
                    .value
                    .as_ref()
                    .map(|v| v.shape().to_vec())
                    .unwrap_or_default()
            })
            .collect();
        self.meter.register(bytes);
        self.nodes.push(Node {
            op: if requires_grad { rec.op } else { Op::Leaf },
            inputs,
            value: Some(rec.value),
            input_shapes,
            saved,
            bytes,
            block: self.current_block,
            requires_grad,
            boundary: false,
            disposed: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, block: Option<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value: Some(value),
            input_shapes: Vec::new(),
            saved: Vec::new(),
            bytes: 0,
            block,
            requires_grad: requires_grad && self.grad_enabled,
            boundary: false,
            disposed: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Op::Leaf, false, self.current_block)
    }

    /// Differentiable input that is not a parameter (gradients are not reported).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Op::Leaf, true, self.current_block)
    }

    /// Leaf for a parameter, tagged with the parameter's block. Repeated calls
    /// for the same id return the same node so gradients accumulate.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>, block: Option<usize>) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push_leaf(value.clone(), Op::Param(id), true, block);
        self.param_nodes.insert(id, n);
        n
    }

    fn live_value(&self, id: NodeId, op: &'static str) -> Result<Tensor<T>> {
        self.nodes[id.0]
            .value
            .clone()
            .ok_or_else(|| BimError::Lifecycle(format!("{op}: input node {} was released", id.0)))
    }

    fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param(_))
    }

    // ---- primitives -------------------------------------------------------

    /// `[..., m, k] x [k, n]` (shared right operand) or `[..., m, k] x [..., k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.live_value(a, "matmul")?;
        let bv = self.live_value(b, "matmul")?;
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err(
                "matmul",
                format!("operands must be rank >= 2, got {sa:?} x {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(dim_err("matmul", format!("incompatible extents {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let boff = if shared_rhs { 0 } else { bi * k * n };
            kernels::gemm_nn(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);

        let mut saved = Vec::new();
        let mut bytes = 0;
        let mut a_slot = None;
        let mut b_slot = None;
        if self.nodes[b.0].requires_grad {
            a_slot = Some(saved.len());
            if !self.is_param(a) {
                bytes += av.size_bytes();
            }
            saved.push(av);
        }
        if self.nodes[a.0].requires_grad {
            b_slot = Some(saved.len());
            if !self.is_param(b) {
                bytes += bv.size_bytes();
            }
            saved.push(bv);
        }
        let rec = Recorded {
            op: Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
                a_slot,
                b_slot,
            },
            value: Tensor::from_parts(shape, out),
            saved,
            bytes,
        };
        Ok(self.push(vec![a, b], rec))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a` when its
    /// shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.live_value(a, "add")?;
        let bv = self.live_value(b, "add")?;
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bn = bv.numel();
        let repeats = av.numel() / bn;
        let bd = bv.data();
        let out: Vec<T> = av
            .data()
            .chunks_exact(bn)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let rec = Recorded {
            op: Op::Add { repeats },
            value: Tensor::from_parts(sa.to_vec(), out),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a, b], rec))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = self.live_value(a, "scale")?;
        let f = T::from_f64(factor);
        let rec = Recorded {
            op: Op::Scale(f),
            value: av.map(|v| v * f),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a], rec))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let av = self.live_value(a, "transpose")?;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != av.rank() || sorted != (0..av.rank()).collect::<Vec<_>>() {
            return Err(dim_err(
                "transpose",
                format!("{perm:?} is not a permutation of the axes of {:?}", av.shape()),
            ));
        }
        let (shape, data) = kernels::permute(av.data(), av.shape(), perm);
        let rec = Recorded {
            op: Op::Transpose { perm: perm.to_vec() },
            value: Tensor::from_parts(shape, data),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a], rec))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.live_value(a, "reshape")?;
        let rec = Recorded {
            op: Op::Reshape,
            value: av.reshaped(shape)?,
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a], rec))
    }

    /// Select rows (last-axis vectors) by index: `[R, D] -> [ids.len(), D]`.
    /// Repeated ids are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let av = self.live_value(a, "gather-rows")?;
        let (rows, d) = (av.rows(), av.last_dim());
        if ids.is_empty() {
            return Err(dim_err("gather-rows", "empty index list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(dim_err("gather-rows", format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(av.row(i));
        }
        let rec = Recorded {
            op: Op::GatherRows {
                ids: ids.to_vec(),
                src_rows: rows,
            },
            value: Tensor::from_parts(vec![ids.len(), d], out),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a], rec))
    }

    /// Place row `j` of `a` at row `ids[j]` of a zero `[out_rows, D]` tensor.
    pub fn scatter_rows(&mut self, a: NodeId, ids: &[usize], out_rows: usize) -> Result<NodeId> {
        let av = self.live_value(a, "scatter-rows")?;
        let d = av.last_dim();
        if ids.len() != av.rows() {
            return Err(dim_err(
                "scatter-rows",
                format!("{} ids for {} rows", ids.len(), av.rows()),
            ));
        }
        let mut seen = vec![false; out_rows];
        let mut out = vec![T::zero(); out_rows * d];
        for (j, &i) in ids.iter().enumerate() {
            if i >= out_rows || seen[i] {
                return Err(dim_err(
                    "scatter-rows",
                    format!("target row {i} invalid or repeated (out_rows {out_rows})"),
                ));
            }
            seen[i] = true;
            out[i * d..(i + 1) * d].copy_from_slice(av.row(j));
        }
        let rec = Recorded {
            op: Op::ScatterRows { ids: ids.to_vec() },
            value: Tensor::from_parts(vec![out_rows, d], out),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a], rec))
    }

    /// Stack the rows of `a` then `b`: `[Ra, D] ++ [Rb, D] -> [Ra + Rb, D]`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.live_value(a, "concat-rows")?;
        let bv = self.live_value(b, "concat-rows")?;
        if av.last_dim() != bv.last_dim() {
            return Err(dim_err(
                "concat-rows",
                format!("row widths differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        let rec = Recorded {
            op: Op::ConcatRows { first_rows: av.rows() },
            value: Tensor::from_parts(vec![av.rows() + bv.rows(), av.last_dim()], out),
            saved: Vec::new(),
            bytes: 0,
        };
        Ok(self.push(vec![a, b], rec))
    }

    /// Normalize over the last axis, then `* gamma + beta`. Saves the
    /// normalized input and per-row reciprocal standard deviation.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.live_value(x, "layernorm")?;
        let gv = self.live_value(gamma, "layernorm")?;
        let bv = self.live_value(beta, "layernorm")?;
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err(
                "layernorm",
                format!("affine shapes {:?}/{:?} do not match width {d}", gv.shape(), bv.shape()),
            ));
        }
        let (xhat, rstd) = kernels::layernorm_rows(xv.data(), d, T::from_f64(LAYERNORM_EPS));
        let (g, b) = (gv.data(), bv.data());
        let out: Vec<T> = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let rows = rstd.len();
        let xhat = Tensor::from_parts(xv.shape().to_vec(), xhat);
        let rstd = Tensor::from_parts(vec![rows], rstd);
        let mut bytes = xhat.size_bytes() + rstd.size_bytes();
        if !self.is_param(gamma) {
            bytes += gv.size_bytes();
        }
        let rec = Recorded {
            op: Op::LayerNorm,
            value: Tensor::from_parts(xv.shape().to_vec(), out),
            saved: vec![xhat, rstd, gv],
            bytes,
        };
        Ok(self.push(vec![x, gamma, beta], rec))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.live_value(x, "softmax-lastdim")?;
        let y = Tensor::from_parts(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), xv.last_dim()));
        let rec = Recorded {
            op: Op::Softmax,
            bytes: y.size_bytes(),
            saved: vec![y.clone()],
            value: y,
        };
        Ok(self.push(vec![x], rec))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.live_value(x, "gelu")?;
        let rec = Recorded {
            op: Op::Gelu,
            value: xv.map(kernels::gelu),
            bytes: xv.size_bytes(),
            saved: vec![xv],
        };
        Ok(self.push(vec![x], rec))
    }

    /// Mean squared error over the rows selected by `mask`, averaged over
    /// the row width and the number of selected rows. Returns a `[1]` node.
    pub fn mse_masked(&mut self, pred: NodeId, target: &Tensor<T>, mask: &[bool]) -> Result<NodeId> {
        let pv = self.live_value(pred, "mse-masked")?;
        if pv.shape() != target.shape() {
            return Err(dim_err(
                "mse-masked",
                format!("pred {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        if mask.len() != pv.rows() {
            return Err(dim_err(
                "mse-masked",
                format!("mask has {} entries for {} rows", mask.len(), pv.rows()),
            ));
        }
        let selected = mask.iter().filter(|&&m| m).count();
        if selected == 0 {
            return Err(BimError::Contract("mse-masked: no masked rows, loss undefined".into()));
        }
        let d = pv.last_dim();
        let diff: Vec<T> = pv.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
        let mut total = T::zero();
        for (r, row) in diff.chunks_exact(d).enumerate() {
            if mask[r] {
                let mut acc = T::zero();
                for &v in row {
                    acc += v * v;
                }
                total += acc;
            }
        }
        let scale = T::one() / T::from_f64((selected * d) as f64);
        let diff = Tensor::from_parts(pv.shape().to_vec(), diff);
        let rec = Recorded {
            op: Op::MseMasked {
                mask: mask.to_vec(),
                scale,
            },
            value: Tensor::scalar(total * scale),
            bytes: diff.size_bytes(),
            saved: vec![diff],
        };
        Ok(self.push(vec![pred], rec))
    }

    // ---- backward -----------------------------------------------------------

    fn below(&self, id: usize, boundary: Option<usize>) -> bool {
        match (boundary, self.nodes[id].block) {
            (Some(b), Some(tag)) => tag < b,
            _ => false,
        }
    }

    /// Reverse-mode gradients of a scalar `loss`.
    ///
    /// With `boundary_block = Some(b)` every node tagged below `b` is a
    /// constant: gradients stop there and parameters of those blocks are
    /// absent from the table. Parameters reachable from the loss always get
    /// an entry, even when it is all zeros.
    pub fn backward(&mut self, loss: NodeId, boundary_block: Option<usize>) -> Result<GradTable<T>> {
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(BimError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let top = loss.0;
        let mut reachable = vec![false; top + 1];
        if self.nodes[top].requires_grad && !self.below(top, boundary_block) {
            reachable[top] = true;
        }
        for id in (0..=top).rev() {
            if !reachable[id] {
                continue;
            }
            for inp in &self.nodes[id].inputs {
                if self.nodes[inp.0].requires_grad && !self.below(inp.0, boundary_block) {
                    reachable[inp.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; top + 1];
        grads[top] = Some(vec![T::one()]);
        let mut table = BTreeMap::new();
        let mut touched_blocks = BTreeSet::new();

        for id in (0..=top).rev() {
            if !reachable[id] {
                continue;
            }
            let node = &self.nodes[id];
            if let Some(b) = node.block {
                touched_blocks.insert(b);
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => vec![T::zero(); node.value.as_ref().map_or(0, |v| v.numel())],
            };
            match &node.op {
                Op::Param(pid) => {
                    let shape = node.value.as_ref().expect("param leaves keep values").shape();
                    table.insert(*pid, Tensor::from_parts(shape.to_vec(), g));
                    continue;
                }
                Op::Leaf => continue,
                _ => {}
            }
            if node.disposed {
                return Err(BimError::Lifecycle(format!(
                    "backward through released node {id} ({:?})",
                    node.op.kind()
                )));
            }
            let input_grads = self.node_vjp(node, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if !reachable[inp.0] {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        self.backward_done.extend(touched_blocks);
        Ok(GradTable { grads: table })
    }

    /// Vector-Jacobian products for each input of `node`.
    fn node_vjp(&self, node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let want = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
                a_slot,
                b_slot,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ga = b_slot.map(|s| {
                    let bd = node.saved[s].data();
                    let mut out = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let boff = if *shared_rhs { 0 } else { bi * k * n };
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut out[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out
                });
                let gb = a_slot.map(|s| {
                    let ad = node.saved[s].data();
                    let mut out = vec![T::zero(); if *shared_rhs { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let boff = if *shared_rhs { 0 } else { bi * k * n };
                        kernels::gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut out[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out
                });
                vec![ga, gb]
            }
            Op::Add { repeats } => {
                let gb = want(1).then(|| {
                    let bn = g.len() / repeats;
                    let mut acc = vec![T::zero(); bn];
                    for chunk in g.chunks_exact(bn) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![want(0).then(|| g.to_vec()), gb]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|&v| v * *f).collect())],
            Op::Transpose { perm } => {
                let out_shape: Vec<usize> = perm.iter().map(|&p| node.input_shapes[0][p]).collect();
                let inv = kernels::inverse_perm(perm);
                vec![Some(kernels::permute(g, &out_shape, &inv).1)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::GatherRows { ids, src_rows } => {
                let d = g.len() / ids.len();
                let mut out = vec![T::zero(); src_rows * d];
                for (j, &i) in ids.iter().enumerate() {
                    for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                        *o += v;
                    }
                }
                vec![Some(out)]
            }
            Op::ScatterRows { ids } => {
                let d = *node.input_shapes[0].last().expect("rank >= 1");
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(&g[i * d..(i + 1) * d]);
                }
                vec![Some(out)]
            }
            Op::ConcatRows { first_rows } => {
                let d = *node.input_shapes[0].last().expect("rank >= 1");
                let split = first_rows * d;
                vec![
                    want(0).then(|| g[..split].to_vec()),
                    want(1).then(|| g[split..].to_vec()),
                ]
            }
            Op::LayerNorm => {
                let xhat = node.saved[0].data();
                let rstd = node.saved[1].data();
                let gamma = node.saved[2].data();
                let d = gamma.len();
                let inv_d = T::one() / T::from_f64(d as f64);
                let gx = want(0).then(|| {
                    let mut out = Vec::with_capacity(g.len());
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gamma[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = grow[j] * gamma[j];
                            out.push(rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h));
                        }
                    }
                    out
                });
                let ggamma = want(1).then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            acc[j] += grow[j] * hrow[j];
                        }
                    }
                    acc
                });
                let gbeta = want(2).then(|| {
                    let mut acc = vec![T::zero(); d];
                    for grow in g.chunks_exact(d) {
                        for (a, &v) in acc.iter_mut().zip(grow) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }
            Op::Softmax => {
                let y = &node.saved[0];
                let d = y.last_dim();
                let mut out = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(d).zip(y.data().chunks_exact(d)) {
                    let mut dot = T::zero();
                    for (&a, &b) in grow.iter().zip(yrow) {
                        dot += a * b;
                    }
                    out.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(out)]
            }
            Op::Gelu => {
                let x = node.saved[0].data();
                vec![Some(
                    g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect(),
                )]
            }
            Op::MseMasked { mask, scale } => {
                let diff = &node.saved[0];
                let d = diff.last_dim();
                let two = T::from_f64(2.0) * *scale * g[0];
                let mut out = vec![T::zero(); diff.numel()];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        let span = r * d..(r + 1) * d;
                        for (o, &x) in out[span.clone()].iter_mut().zip(&diff.data()[span]) {
                            *o = two * x;
                        }
                    }
                }
                vec![Some(out)]
            }
        }
    }

    // ---- release ------------------------------------------------------------

    /// Designate the tensor retained when `block` is released.
    pub fn set_boundary(&mut self, block: usize, node: NodeId) {
        self.boundary_of.insert(block, node);
    }

    /// The retained boundary node of a released block, if any.
    pub fn boundary(&self, block: usize) -> Option<NodeId> {
        self.boundary_of
            .get(&block)
            .copied()
            .filter(|n| self.nodes[n.0].boundary)
    }

    pub fn is_released(&self, block: usize) -> bool {
        self.released.contains(&block)
    }

    fn dispose(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        if node.disposed {
            return;
        }
        self.meter.free(node.bytes);
        node.bytes = 0;
        node.saved.clear();
        node.value = None;
        node.disposed = true;
    }

    /// Dispose every saved tensor of nodes tagged `block`, plus the retained
    /// boundary of earlier blocks. The node designated with [`set_boundary`]
    /// survives as a constant leaf holding its value, counted as live.
    /// Returns the net decrease of live bytes.
    ///
    /// [`set_boundary`]: Graph::set_boundary
    pub fn release_block_activations(&mut self, block: usize) -> Result<usize> {
        if self.released.contains(&block) {
            return Err(BimError::Lifecycle(format!("block {block} already released")));
        }
        if !self.backward_done.contains(&block) {
            return Err(BimError::Lifecycle(format!(
                "block {block} released before its backward pass"
            )));
        }
        let before = self.meter.live();
        let keep = self.boundary_of.get(&block).map(|n| n.0);
        for i in 0..self.nodes.len() {
            if Some(i) == keep {
                continue;
            }
            let node = &self.nodes[i];
            let ours = node.block == Some(block) && !node.boundary;
            let stale_boundary = node.boundary && node.block.is_some_and(|b| b < block);
            if ours || stale_boundary {
                self.dispose(i);
            }
        }
        if let Some(k) = keep {
            let node = &mut self.nodes[k];
            self.meter.free(node.bytes);
            let value = node
                .value
                .clone()
                .ok_or_else(|| BimError::Lifecycle(format!("boundary node {k} already released")))?;
            node.bytes = value.size_bytes();
            node.saved = vec![value];
            node.inputs.clear();
            node.input_shapes.clear();
            node.op = Op::Leaf;
            node.requires_grad = false;
            node.boundary = true;
            self.meter.register(node.bytes);
        }
        self.released.insert(block);
        Ok(before - self.meter.live())
    }

    /// Dispose everything still held, including boundaries.
    pub fn release_all(&mut self) -> usize {
        let before = self.meter.live();
        for i in 0..self.nodes.len() {
            self.dispose(i);
        }
        before - self.meter.live()
    }
}
