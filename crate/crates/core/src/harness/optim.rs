//! AdamW with decoupled weight decay, linear lr scaling, warmup + cosine.

use std::collections::BTreeMap;

use crate::error::{BimError, Result};
use crate::tensor::{GradTable, ParamId, Scalar, Tensor};
use crate::vit::ParamStore;

/// `base_lr * batch_size / 256`.
pub fn scale_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Learning-rate schedule: linear warmup from 0 to `peak_lr`, then a half
/// cosine down to 0 at the end of training. Steps past the end clamp to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_epochs: f64, total_epochs: usize, steps_per_epoch: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: (warmup_epochs * steps_per_epoch as f64).round() as u64,
            total_steps: (total_epochs * steps_per_epoch) as u64,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments and step count of one parameter.
#[derive(Debug, Clone)]
pub struct MomentState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

/// Per-parameter AdamW state. Parameters of different blocks never share
/// state, so block-local updates are independent.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    states: BTreeMap<ParamId, MomentState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&MomentState<T>> {
        self.states.get(&id)
    }

    pub fn states(&self) -> impl Iterator<Item = (ParamId, &MomentState<T>)> {
        self.states.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert_state(&mut self, id: ParamId, state: MomentState<T>) {
        self.states.insert(id, state);
    }

    /// Bytes of moment buffers once every parameter has been stepped.
    pub fn full_state_bytes(store: &ParamStore<T>) -> usize {
        2 * store.total_bytes()
    }

    /// One update for every parameter present in `grads`:
    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    /// Weight decay applies only to parameters flagged for it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradTable<T>, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(BimError::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    store.get(id).name
                )));
            }
            if g.shape() != store.value(id).shape() {
                return Err(BimError::Contract(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    store.get(id).name,
                    store.value(id).shape()
                )));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let lr_t = T::from_f64(lr);
        let eps_t = T::from_f64(eps);
        for (id, g) in grads.iter() {
            let decay = store.get(id).decay;
            let shape = g.shape().to_vec();
            let st = self.states.entry(id).or_insert_with(|| MomentState {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                t: 0,
            });
            st.t += 1;
            let bc1 = T::from_f64(1.0 - beta1.powi(st.t as i32));
            let bc2 = T::from_f64(1.0 - beta2.powi(st.t as i32));
            let shrink = T::from_f64(1.0 - if decay { lr * weight_decay } else { 0.0 });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] * shrink - lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn lr_scaling() {
        assert_eq!(scale_lr(1.5e-4, 4096), 2.4e-3);
        assert_eq!(scale_lr(1.5e-4, 256), 1.5e-4);
        assert_eq!(scale_lr(0.1, 512), 0.2);
    }

    #[test]
    fn schedule_knots() {
        let s = LrSchedule::new(1.0, 2.0, 10, 10);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 0.5);
        assert_eq!(s.lr_at(20), 1.0);
        assert!(s.lr_at(100).abs() < 1e-15);
        assert!(s.lr_at(99) > 0.0 && s.lr_at(99) < 1e-3);
        // midpoint of the cosine segment: 0.5 * (1 + cos(pi/2))
        let expect = 0.5 * (1.0 + std::f64::consts::FRAC_PI_2.cos());
        assert_eq!(s.lr_at(60), expect);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr_at(1000), 0.0);
    }

    /// Gradient table where every entry of parameter 0's gradient equals `g`:
    /// mse against `p - g n / 2` has gradient `2 (g n / 2) / n`.
    fn grads_for(store: &ParamStore<f64>, g: f64) -> GradTable<f64> {
        let mut graph = Graph::new();
        let p = store.node(&mut graph, ParamId(0));
        let shape = store.value(ParamId(0)).shape().to_vec();
        let n = store.value(ParamId(0)).numel();
        let target = store.value(ParamId(0)).map(|v| v - g * n as f64 / 2.0);
        let loss = graph
            .mse_masked(p, &target, &vec![true; n / shape.last().unwrap()])
            .unwrap();
        graph.backward(loss, None).unwrap()
    }

    #[test]
    fn zero_gradient_applies_decay_only() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap(), 0);
        let before = store.value(ParamId(0)).clone();
        let grads = grads_for(&store, 0.0);
        assert!(grads.get(ParamId(0)).unwrap().data().iter().all(|&v| v == 0.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let lr = 1e-3;
        opt.step(&mut store, &grads, lr).unwrap();
        for (a, b) in store.value(ParamId(0)).data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - lr * 0.05));
        }
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[1, 1], 0.0), 0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..200 {
            let grads = grads_for(&store, 0.37);
            let before = store.value(ParamId(0)).item();
            opt.step(&mut store, &grads, lr).unwrap();
            last = before - store.value(ParamId(0)).item();
        }
        assert!((last - lr).abs() < 1e-6 * lr + 1e-9, "step {last}");
    }

    #[test]
    fn matches_scalar_trace() {
        // Hand-unrolled Adam recursion on a scalar, wd = 0.
        let (b1, b2, eps, lr) = (0.9f64, 0.95f64, 1e-8f64, 0.01f64);
        let gs = [0.5, -1.0, 2.0];
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        let mut trace = Vec::new();
        for (t, g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            trace.push(theta);
        }

        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[1], 1.0), 0);
        let mut opt = AdamW::new(AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: 0.0,
        });
        for (g, expect) in gs.iter().zip(trace) {
            let mut graph = Graph::new();
            let p = store.node(&mut graph, ParamId(0));
            let loss = graph.scale(p, *g).unwrap();
            let grads = graph.backward(loss, None).unwrap();
            opt.step(&mut store, &grads, lr).unwrap();
            assert!((store.value(ParamId(0)).item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("blocks.3.w", Tensor::full(&[1], 1.0), 0);
        let mut graph = Graph::new();
        let p = store.node(&mut graph, ParamId(0));
        let loss = graph.scale(p, f64::NAN).unwrap();
        let grads = graph.backward(loss, None).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("blocks.3.w"));
        assert_eq!(store.value(ParamId(0)).item(), 1.0);
    }
}
