//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one first/second moment pair per parameter path and the
/// step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Rebuild from saved moments.
    pub fn from_state(
        config: AdamConfig,
        t: u64,
        first: BTreeMap<String, Tensor<T>>,
        second: BTreeMap<String, Tensor<T>>,
    ) -> Self {
        Adam {
            config,
            t,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.first
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.second
    }

    /// Apply one bias-corrected update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (inv_c1, inv_c2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape("adam_state", p.shape(), m.shape()));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let mhat = *mv * inv_c1;
                let vhat = *vv * inv_c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grad(1.0)).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((1.0 - w - 0.001).abs() < 1e-9, "{w}");
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.3);
    }

    #[test]
    fn shape_mismatch_rejected_without_advancing() {
        let mut p = single(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        let bad = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros([2]))]);
        assert!(matches!(adam.step(&mut p, &bad), Err(Error::ShapeMismatch { .. })));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn descends_a_scalar_quadratic() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = 1.0;
        for step in 1..=100 {
            let w = p.get("w").unwrap().item();
            adam.step(&mut p, &grad(2.0 * w)).unwrap();
            if step % 10 == 0 {
                let w = p.get("w").unwrap().item();
                assert!(w * w < last, "step {step}: {} !< {last}", w * w);
                last = w * w;
            }
        }
    }
}
