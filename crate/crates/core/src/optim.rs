//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; vectors (biases, norms) are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &GradBuffer<S>, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_s, eps) = (S::lit(lr), S::lit(c.eps));
        let decay = S::lit(lr * c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let decayed = p.rank() >= 2 && c.weight_decay > 0.0;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if decayed {
                    *w -= decay * *w;
                }
                *w -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_rows(&[&[3.0, -2.0]]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamConfig::default(), &store);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq).unwrap();
            let grads = g.backward(l).unwrap();
            let mut buf = GradBuffer::new(&store);
            buf.accumulate(&grads);
            drop(g);
            opt.update(&mut store, &buf, 0.05);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clip_bounds_norm() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_rows(&[&[3.0, 4.0]]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, w);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        let mut buf = GradBuffer::new(&store);
        buf.accumulate(&grads);
        assert!((buf.clip(1.0) - 10.0).abs() < 1e-12);
        assert!((buf.global_norm() - 1.0).abs() < 1e-12);
    }
}
