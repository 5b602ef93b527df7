//! Reconstruction metrics: batch MSE for training and NMSE for reporting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower bound on reported dB values; exact reconstruction would be −∞.
pub const NMSE_DB_FLOOR: f64 = -300.0;

/// `(1/B)·Σ‖H−Ĥ‖²` as a graph node, `B` being the leading extent.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, h: Var, h_hat: Var) -> Result<Var> {
    if g.shape(h) != g.shape(h_hat) {
        return Err(Error::shape("mse_loss", g.shape(h), g.shape(h_hat)));
    }
    let batch = g.shape(h)[0];
    let d = g.sub(h, h_hat)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// [`mse_loss`] on plain tensors, accumulated in double precision.
pub fn mse<T: Real>(h: &Tensor<T>, h_hat: &Tensor<T>) -> Result<f64> {
    if h.shape() != h_hat.shape() {
        return Err(Error::shape("mse", h.shape(), h_hat.shape()));
    }
    let total: f64 = h
        .data()
        .iter()
        .zip(h_hat.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(total / h.shape()[0] as f64)
}

pub fn to_db(linear: f64) -> f64 {
    if linear > 0.0 {
        (10.0 * linear.log10()).max(NMSE_DB_FLOOR)
    } else {
        NMSE_DB_FLOOR
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
    /// Samples that entered the average.
    pub samples: usize,
    /// Zero-norm samples left out of the average.
    pub excluded: usize,
}

/// Running per-sample `‖H−Ĥ‖²/‖H‖²` average.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NmseAccumulator {
    sum: f64,
    samples: usize,
    excluded: usize,
}

impl NmseAccumulator {
    pub fn push(&mut self, h: &[f64], h_hat: &[f64]) {
        let power: f64 = h.iter().map(|v| v * v).sum();
        if !(power > 0.0) {
            self.excluded += 1;
            return;
        }
        let err: f64 = h.iter().zip(h_hat).map(|(a, b)| (a - b).powi(2)).sum();
        self.sum += err / power;
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &NmseAccumulator) {
        self.sum += other.sum;
        self.samples += other.samples;
        self.excluded += other.excluded;
    }

    pub fn finish(&self) -> Result<Nmse> {
        if self.samples == 0 {
            return Err(Error::Numerical(format!(
                "no samples with nonzero power ({} excluded)",
                self.excluded
            )));
        }
        let linear = self.sum / self.samples as f64;
        Ok(Nmse {
            linear,
            db: to_db(linear),
            samples: self.samples,
            excluded: self.excluded,
        })
    }
}

/// NMSE over the leading (sample) axis of two equally shaped tensors.
pub fn nmse_db<T: Real>(h: &Tensor<T>, h_hat: &Tensor<T>) -> Result<Nmse> {
    if h.shape() != h_hat.shape() {
        return Err(Error::shape("nmse", h.shape(), h_hat.shape()));
    }
    let n = h.shape()[0];
    let per = h.numel() / n;
    let mut acc = NmseAccumulator::default();
    let (a, b) = (h.data(), h_hat.data());
    let (mut x, mut y) = (vec![0.0; per], vec![0.0; per]);
    for s in 0..n {
        for k in 0..per {
            x[k] = a[s * per + k].f64();
            y[k] = b[s * per + k].f64();
        }
        acc.push(&x, &y);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn mse_examples() {
        let h = Tensor::<f64>::ones([1, 2, 2, 2]);
        assert_eq!(mse(&h, &h).unwrap(), 0.0);
        assert_eq!(mse(&h, &Tensor::zeros([1, 2, 2, 2])).unwrap(), 8.0);
        assert!(mse(&h, &Tensor::zeros([1, 2, 2, 1])).is_err());
    }

    #[test]
    fn mse_graph_matches_plain() {
        let h = t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let y = t(&[2, 3], vec![0.0, 2.5, 3.0, 1.0, 0.5, 4.0]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(h.clone()), g.constant(y.clone()));
        let l = mse_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - mse(&h, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn nmse_examples() {
        let h = t(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let exact = nmse_db(&h, &h).unwrap();
        assert_eq!((exact.linear, exact.db), (0.0, NMSE_DB_FLOOR));
        let zero = nmse_db(&h, &Tensor::zeros([2, 2])).unwrap();
        assert_eq!((zero.linear, zero.db), (1.0, 0.0));
        let half = nmse_db(&h, &h.map(|v| v / 2.0)).unwrap();
        assert!((half.linear - 0.25).abs() < 1e-15);
        assert!((half.db + 6.0206).abs() < 1e-4);
    }

    #[test]
    fn zero_power_samples_are_excluded() {
        let h = t(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let r = nmse_db(&h, &Tensor::zeros([2, 2])).unwrap();
        assert_eq!((r.samples, r.excluded), (1, 1));
        assert!(nmse_db(&Tensor::<f64>::zeros([1, 2]), &Tensor::zeros([1, 2])).is_err());
    }
}
