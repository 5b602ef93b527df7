//! Parameter storage and the layer set: convolution, transposed
//! convolution, linear, and layer normalization.
//!
//! Layers are lightweight descriptors (name and geometry). Their tensors
//! live in a [`ParamStore`] under stable dotted paths such as
//! `encoder.embed.weight`, which keeps checkpointing, optimizer state and
//! precision casts uniform across the whole model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors, ordered by path.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register a parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }
}

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

fn bind_scoped<T: Real, R>(
    g: &mut Graph<T>,
    name: &str,
    f: impl FnOnce(&mut Graph<T>) -> Result<R>,
) -> Result<R> {
    g.push_scope(name);
    let out = f(g);
    g.pop_scope();
    out
}

/// `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            self.weight_path(),
            kaiming_uniform(&[self.out_features, self.in_features], self.in_features, rng),
        )?;
        store.insert(self.bias_path(), Tensor::zeros([self.out_features]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, &self.weight_path())?;
        let b = store.bind(g, &self.bias_path())?;
        bind_scoped(g, &self.name, |g| g.linear(x, w, Some(b)))
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_features * self.out_features) as u64
    }
}

/// 2-D cross-correlation (no kernel flip) with bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn same(name: impl Into<String>, in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(name, in_channels, out_channels, (k, k), 1, (k / 2, k / 2))
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (kh, kw) = self.kernel;
        let shape = [self.out_channels, self.in_channels, kh, kw];
        store.insert(self.weight_path(), kaiming_uniform(&shape, self.in_channels * kh * kw, rng))?;
        store.insert(self.bias_path(), Tensor::zeros([self.out_channels]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, &self.weight_path())?;
        let b = store.bind(g, &self.bias_path())?;
        bind_scoped(g, &self.name, |g| g.conv2d(x, w, Some(b), self.stride, self.padding))
    }

    /// `floor((in + 2·padding − k)/stride) + 1` per axis.
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hh = (h + 2 * self.padding.0).checked_sub(self.kernel.0)?;
        let ww = (w + 2 * self.padding.1).checked_sub(self.kernel.1)?;
        Some((hh / self.stride + 1, ww / self.stride + 1))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w).unwrap_or((0, 0));
        (oh * ow * self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1) as u64
    }
}

/// Transposed convolution; weight layout `[in, out, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Self {
        ConvTranspose2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn same(name: impl Into<String>, in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(name, in_channels, out_channels, (k, k), 1, (k / 2, k / 2))
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (kh, kw) = self.kernel;
        let shape = [self.in_channels, self.out_channels, kh, kw];
        store.insert(self.weight_path(), kaiming_uniform(&shape, self.out_channels * kh * kw, rng))?;
        store.insert(self.bias_path(), Tensor::zeros([self.out_channels]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, &self.weight_path())?;
        let b = store.bind(g, &self.bias_path())?;
        bind_scoped(g, &self.name, |g| g.conv_transpose2d(x, w, Some(b), self.stride, self.padding))
    }

    /// `(in − 1)·stride − 2·padding + k` per axis.
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = ((h - 1) * self.stride + self.kernel.0).checked_sub(2 * self.padding.0)?;
        let ow = ((w - 1) * self.stride + self.kernel.1).checked_sub(2 * self.padding.1)?;
        Some((oh, ow))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1) as u64
    }
}

/// Per-token normalization over the last axis followed by `gamma`, `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), Tensor::ones([self.dim]))?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros([self.dim]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.dim) {
            return Err(Error::shape("layer_norm", g.shape(x), &[self.dim]));
        }
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        bind_scoped(g, &self.name, |g| g.layer_norm(x, gamma, beta, self.eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_reference_cases() {
        let ln = LayerNorm::new("ln", 4);
        let mut store = ParamStore::<f64>::new();
        ln.init(&mut store).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 4], 5.0));
        let y = ln.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let ln = LayerNorm::new("ln2", 2);
        ln.init(&mut store).unwrap();
        let x = g.constant(Tensor::new([1, 2], vec![1.0, -1.0]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        let v = g.value(y).data();
        // 1/sqrt(1 + eps)
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn shape_formulas() {
        let c = Conv2d::new("c", 4, 4, (8, 8), 8, (0, 0));
        assert_eq!(c.out_hw(32, 32), Some((4, 4)));
        let t = ConvTranspose2d::new("t", 1, 1, (2, 2), 2, (0, 0));
        assert_eq!(t.out_hw(4, 4), Some((8, 8)));
        let s = Conv2d::new("s", 2, 4, (1, 9), 1, (0, 4));
        assert_eq!(s.out_hw(32, 32), Some((32, 32)));
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::<f32>::new();
            Linear::new("fc", 8, 3).init(&mut store, &mut rng).unwrap();
            Conv2d::same("conv", 2, 4, 3).init(&mut store, &mut rng).unwrap();
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        assert_eq!(a.get("fc.bias").unwrap().data(), &[0.0; 3]);
        assert_eq!(a.count(), 8 * 3 + 3 + 2 * 4 * 9 + 4);
        let bound = (6.0f32 / 8.0).sqrt();
        assert!(a.get("fc.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros([1])).unwrap();
        assert!(store.insert("a", Tensor::zeros([1])).is_err());
        assert!(store.get("missing").is_err());
    }
}
