#![allow(dead_code)]

use bim_core::engine::{block_local_loss, BimPlan, Model, StepContext};
use bim_core::rng::SplitMix64;
use bim_core::tensor::{finite_diff, Graph, NodeId, ParamId, Scalar, Tensor};
use bim_core::vit::ModelSpec;
use bim_core::Result;

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.normal())).collect()).unwrap()
}

pub fn random_images<T: Scalar>(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    let shape = [batch, spec.channels, spec.image_size, spec.image_size];
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.uniform())).collect()).unwrap()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub type Build<T> = Box<dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>>;

/// A differentiable expression over some input tensors.
pub struct Case<T> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub build: Build<T>,
}

/// Scalar objective: the expression itself when scalar, else a fixed random
/// linear functional `sum_i w_i out_i`, which keeps per-element gradients
/// O(1) so f32 differences stay above roundoff.
fn objective<T: Scalar>(g: &mut Graph<T>, out: NodeId, weights: &Option<Tensor<T>>) -> Result<NodeId> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let flat = g.reshape(out, &[1, w.numel()])?;
            let w = g.constant(w.clone());
            let y = g.matmul(flat, w)?;
            g.reshape(y, &[1])
        }
    }
}

/// Worst relative error between autodiff and central differences over all
/// inputs of `case`.
pub fn check_case<T: Scalar>(case: &Case<T>, eps: f64, seed: u64) -> Result<f64> {
    let nodes = |g: &mut Graph<T>, inputs: &[Tensor<T>]| -> Vec<NodeId> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(ParamId(i), t, None))
            .collect()
    };
    let mut g = Graph::new();
    let ids = nodes(&mut g, &case.inputs);
    let out = (case.build)(&mut g, &ids)?;
    let out_shape = g.shape(out)?.to_vec();
    let numel: usize = out_shape.iter().product();
    let target = (numel != 1).then(|| random_tensor::<T>(&[numel, 1], &mut SplitMix64::new(seed)));
    let loss = objective(&mut g, out, &target)?;
    let grads = g.backward(loss, None)?;

    let mut worst = 0.0f64;
    for j in 0..case.inputs.len() {
        let f = |x: &Tensor<T>| -> Result<f64> {
            let mut inputs = case.inputs.clone();
            inputs[j] = x.clone();
            let mut g = Graph::inference();
            let ids = nodes(&mut g, &inputs);
            let out = (case.build)(&mut g, &ids)?;
            let loss = objective(&mut g, out, &target)?;
            Ok(g.value(loss)?.item().as_f64())
        };
        let fd = finite_diff(f, &case.inputs[j], eps)?;
        let ad = grads
            .get(ParamId(j))
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[j].numel()]);
        worst = worst.max(rel_err(&ad, &fd.to_f64_vec()));
    }
    Ok(worst)
}

/// One random instance of every primitive with extents drawn from
/// `1..=max_extent` along each of up to three axes.
pub fn primitive_cases<T: Scalar>(rng: &mut SplitMix64, dims: [usize; 3]) -> Vec<Case<T>> {
    let [a, b, c] = dims;
    let mut t = |shape: &[usize]| random_tensor::<T>(shape, rng);
    let mut cases: Vec<Case<T>> = vec![
        Case {
            name: "matmul-shared",
            inputs: vec![t(&[a, b, c]), t(&[c, b])],
            build: Box::new(|g, x| g.matmul(x[0], x[1])),
        },
        Case {
            name: "matmul-batched",
            inputs: vec![t(&[a, b, c]), t(&[a, c, b])],
            build: Box::new(|g, x| g.matmul(x[0], x[1])),
        },
        Case {
            name: "add-broadcast",
            inputs: vec![t(&[a, b, c]), t(&[c])],
            build: Box::new(|g, x| g.add(x[0], x[1])),
        },
        Case {
            name: "scale",
            inputs: vec![t(&[a, b, c])],
            build: Box::new(|g, x| g.scale(x[0], -1.75)),
        },
        Case {
            name: "transpose",
            inputs: vec![t(&[a, b, c])],
            build: Box::new(|g, x| g.transpose(x[0], &[2, 0, 1])),
        },
        Case {
            name: "reshape",
            inputs: vec![t(&[a, b, c])],
            build: Box::new(move |g, x| g.reshape(x[0], &[a * b, c])),
        },
        Case {
            name: "layernorm",
            inputs: vec![t(&[a, b, c.max(3)]), t(&[c.max(3)]), t(&[c.max(3)])],
            build: Box::new(|g, x| g.layernorm(x[0], x[1], x[2])),
        },
        Case {
            name: "softmax",
            inputs: vec![t(&[a, b, c])],
            build: Box::new(|g, x| g.softmax(x[0])),
        },
        Case {
            name: "gelu",
            inputs: vec![t(&[a, b, c])],
            build: Box::new(|g, x| g.gelu(x[0])),
        },
        Case {
            name: "concat-rows",
            inputs: vec![t(&[a, c]), t(&[b, c])],
            build: Box::new(|g, x| g.concat_rows(x[0], x[1])),
        },
    ];
    let rows = a * b;
    let gather: Vec<usize> = (0..rows + 2).map(|_| rng.below(rows)).collect();
    let mut perm: Vec<usize> = (0..rows + 3).collect();
    rng.shuffle(&mut perm);
    perm.truncate(rows);
    let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.uniform() < 0.5).collect();
    let mut t = |shape: &[usize]| random_tensor::<T>(shape, rng);
    cases.push(Case {
        name: "gather-rows",
        inputs: vec![t(&[rows, c])],
        build: Box::new(move |g, x| g.gather_rows(x[0], &gather)),
    });
    cases.push(Case {
        name: "scatter-rows",
        inputs: vec![t(&[rows, c])],
        build: Box::new(move |g, x| g.scatter_rows(x[0], &perm, rows + 3)),
    });
    let target = t(&[rows, c]);
    cases.push(Case {
        name: "mse-masked",
        inputs: vec![t(&[rows, c])],
        build: Box::new(move |g, x| g.mse_masked(x[0], &target, &mask)),
    });
    cases
}

pub fn fd_eps<T: Scalar>() -> f64 {
    match T::DTYPE {
        bim_core::tensor::DType::F64 => 1e-6,
        bim_core::tensor::DType::F32 => 1e-2,
    }
}

pub fn grad_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        bim_core::tensor::DType::F64 => 1e-4,
        bim_core::tensor::DType::F32 => 1e-2,
    }
}

/// Autodiff vs central differences for block `block`'s local loss, over
/// every parameter that block owns.
pub fn check_block_loss<T: Scalar>(spec: &ModelSpec, plan: &BimPlan, block: usize, seed: u64) -> Result<f64> {
    let model = Model::<T>::new(spec, plan.num_blocks, seed)?;
    let images = random_images::<T>(spec, 2, seed ^ 0x55);
    let ctx = StepContext { seed, step: seed % 7 };
    let (mut g, loss) = block_local_loss(&model, &images, plan, ctx, block)?;
    let grads = g.backward(loss, Some(block))?;
    let mut ad = Vec::new();
    let mut fd = Vec::new();
    for id in model.block_params(block) {
        let f = |x: &Tensor<T>| -> Result<f64> {
            let mut m = model.clone();
            *m.store.value_mut(id) = x.clone();
            let (g, loss) = block_local_loss(&m, &images, plan, ctx, block)?;
            Ok(g.value(loss)?.item().as_f64())
        };
        fd.extend(finite_diff(f, model.store.value(id), fd_eps::<T>())?.to_f64_vec());
        ad.extend(grads.get(id).expect("block parameter has a gradient").to_f64_vec());
    }
    Ok(rel_err(&ad, &fd))
}
