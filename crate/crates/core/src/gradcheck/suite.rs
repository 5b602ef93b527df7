//! The gradient-check suite: every graph op in double precision, the
//! attention and convolution blocks, and a tiny end-to-end autoencoder.
//!
//! Each case reduces its output with a fixed random projection `Σ rᵢ·yᵢ`
//! so gradient entries are O(1) and the relative error is meaningful.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{eval_scalar, rel_err};
use crate::attention::{window_merge, window_partition, AttentionConfig, Gsa, Lsa};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::harness::metrics::mse_loss;
use crate::model::{CrBlock, ModelConfig, Stb, Stnet};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Threshold at double precision.
pub const OP_THRESHOLD: f64 = 1e-5;
/// Threshold for the end-to-end model at double precision.
pub const MODEL_THRESHOLD: f64 = 1e-3;
/// Threshold for `f32` gradients against double-precision differences.
pub const WORKING_THRESHOLD: f64 = 1e-3;
/// Bound on both gradients for parameters whose exact gradient is zero.
pub const VANISHING_THRESHOLD: f64 = 1e-6;
const OP_EPS: f64 = 1e-6;
const MODEL_EPS: f64 = 1e-5;
/// Parameter entries probed per tensor in the end-to-end check.
const PROBES_PER_PARAM: usize = 4;
const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Worst elementwise relative error.
    Relative,
    /// Largest magnitude of either gradient; used where the exact gradient
    /// is identically zero and a relative error would only measure noise.
    Vanishing,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub precision: Precision,
    pub measure: Measure,
    pub error: f64,
    pub threshold: f64,
    pub entries: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl SuiteEntry {
    fn relative(name: impl Into<String>, precision: Precision, analytic: &[f64], numeric: &[f64], threshold: f64) -> Self {
        let mut e = SuiteEntry {
            name: name.into(),
            precision,
            measure: Measure::Relative,
            error: 0.0,
            threshold,
            entries: analytic.len(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for (n, (&a, &b)) in analytic.iter().zip(numeric).enumerate() {
            let err = rel_err(a, b);
            if n == 0 || err > e.error {
                (e.error, e.worst_analytic, e.worst_numeric) = (err, a, b);
            }
        }
        e
    }

    fn vanishing(name: impl Into<String>, precision: Precision, analytic: &[f64], numeric: &[f64]) -> Self {
        let mut e = SuiteEntry {
            name: name.into(),
            precision,
            measure: Measure::Vanishing,
            error: 0.0,
            threshold: VANISHING_THRESHOLD,
            entries: analytic.len(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for (&a, &b) in analytic.iter().zip(numeric) {
            let m = a.abs().max(b.abs());
            if m >= e.error {
                (e.error, e.worst_analytic, e.worst_numeric) = (m, a, b);
            }
        }
        e
    }

    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

/// Softmax over keys ignores any per-query constant, and a key bias only
/// adds `q·b` to every score of a query. Its exact gradient is zero.
fn shift_invariant(name: &str) -> bool {
    name.ends_with(".key.bias")
}

/// Central differences of `f` at the listed entries of `x`.
fn central_differences<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// Autodiff and numeric gradients of scalar `f` at every entry of `x`.
fn gradients<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input("x", x.clone(), true);
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::NonScalarRoot(g.value(y).shape().to_vec()));
    }
    let analytic = g.backward(y)?.get(xv).expect("input requires grad").data().to_vec();
    let all: Vec<usize> = (0..x.numel()).collect();
    let numeric = central_differences(|v| eval_scalar(f, v), x, eps, &all)?;
    Ok((analytic, numeric))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// `Σ rᵢ·yᵢ` with `r` drawn from `seed`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(rand_t(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

struct Cases {
    rng: ChaCha8Rng,
    seed: u64,
    out: Vec<SuiteEntry>,
}

impl Cases {
    fn push<F>(&mut self, name: String, f: F, x: &Tensor<f64>, vanishing: bool) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let (a, n) = gradients(&f, x, OP_EPS)?;
        self.out.push(if vanishing {
            SuiteEntry::vanishing(name, Precision::F64, &a, &n)
        } else {
            SuiteEntry::relative(name, Precision::F64, &a, &n, OP_THRESHOLD)
        });
        Ok(())
    }

    /// Check `f` with respect to a fresh random input of `shape`.
    fn op<F>(&mut self, name: &str, shape: &[usize], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let x = rand_t(shape, &mut self.rng);
        let seed = self.seed;
        let projected = |g: &mut Graph<f64>, x: Var| {
            let y = f(g, x)?;
            project(g, y, seed)
        };
        self.push(name.to_string(), projected, &x, false)
    }

    fn constant(&mut self, shape: &[usize]) -> Tensor<f64> {
        rand_t(shape, &mut self.rng)
    }

    /// Check a block built from `store` with respect to its input and to
    /// each of its parameters.
    fn block<F>(&mut self, name: &str, shape: &[usize], store: &ParamStore<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
    {
        let x = self.constant(shape);
        let seed = self.seed;
        let wrt_input = |g: &mut Graph<f64>, xv: Var| {
            let y = f(g, store, xv)?;
            project(g, y, seed)
        };
        self.push(format!("{name}/input"), wrt_input, &x, false)?;
        for (pname, value) in store.iter() {
            let wrt_param = |g: &mut Graph<f64>, pv: Var| {
                g.alias(pname, pv)?;
                let xv = g.constant(x.clone());
                let y = f(g, store, xv)?;
                project(g, y, seed)
            };
            self.push(format!("{name}/{pname}"), wrt_param, value, shift_invariant(pname))?;
        }
        Ok(())
    }
}

/// Every differentiable op, each with respect to each of its inputs.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut cs = Cases {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        out: Vec::new(),
    };
    let c34 = cs.constant(&[3, 4]);
    cs.op("add", &[3, 4], |g, x| {
        let c = g.constant(c34.clone());
        g.add(x, c)
    })?;
    cs.op("add/shared", &[3, 4], |g, x| g.add(x, x))?;
    cs.op("add/scalar-broadcast", &[1], |g, x| {
        let c = g.constant(c34.clone());
        g.add(c, x)
    })?;
    cs.op("sub", &[3, 4], |g, x| {
        let c = g.constant(c34.clone());
        g.sub(c, x)
    })?;
    cs.op("mul", &[3, 4], |g, x| {
        let c = g.constant(c34.clone());
        g.mul(x, c)
    })?;
    cs.op("mul/square", &[3, 4], |g, x| g.mul(x, x))?;
    cs.op("scale", &[3, 4], |g, x| Ok(g.scale(x, -2.5)))?;
    cs.op("sigmoid", &[3, 4], |g, x| Ok(g.sigmoid(x)))?;
    cs.op("gelu", &[3, 4], |g, x| Ok(g.gelu(x)))?;

    let b45 = cs.constant(&[4, 5]);
    let a23 = cs.constant(&[2, 3, 3]);
    cs.op("matmul/lhs", &[2, 3, 4], |g, x| {
        let b = g.constant(b45.clone());
        g.matmul(x, b)
    })?;
    cs.op("matmul/rhs", &[2, 3, 4], |g, x| {
        let a = g.constant(a23.clone());
        g.matmul(a, x)
    })?;
    cs.op("matmul/broadcast-rhs", &[3, 2], |g, x| {
        let a = g.constant(a23.clone());
        g.matmul(a, x)
    })?;
    cs.op("matmul/narrow", &[2, 6, 1], |g, x| {
        let xt = g.permute(x, &[0, 2, 1])?;
        g.matmul(x, xt)
    })?;

    let w = cs.constant(&[5, 4]);
    let b = cs.constant(&[5]);
    let x = cs.constant(&[2, 3, 4]);
    cs.op("linear/input", &[2, 3, 4], |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        g.linear(xv, wv, Some(bv))
    })?;
    cs.op("linear/weight", &[5, 4], |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        g.linear(xv, wv, Some(bv))
    })?;
    cs.op("linear/bias", &[5], |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        g.linear(xv, wv, Some(bv))
    })?;

    cs.op("softmax/last", &[2, 3, 5], |g, x| g.softmax(x, 2))?;
    cs.op("softmax/middle", &[2, 5, 3], |g, x| g.softmax(x, 1))?;
    cs.op("reshape", &[2, 6], |g, x| g.reshape(x, &[3, 4]))?;
    cs.op("permute", &[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]))?;
    let c232 = cs.constant(&[2, 2, 2]);
    cs.op("concat", &[2, 3, 2], |g, x| {
        let c = g.constant(c232.clone());
        g.concat(&[c, x, c], 1)
    })?;
    cs.op("sum", &[3, 4], |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    })?;
    cs.op("mean", &[3, 4], |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    })?;

    let gamma = cs.constant(&[6]);
    let beta = cs.constant(&[6]);
    let xn = cs.constant(&[4, 6]);
    cs.op("layer_norm/input", &[4, 6], |g, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    cs.op("layer_norm/gamma", &[6], |g, ga| {
        let (x, be) = (g.constant(xn.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    cs.op("layer_norm/beta", &[6], |g, be| {
        let (x, ga) = (g.constant(xn.clone()), g.constant(gamma.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    })?;

    for (tag, stride, pad, k) in [("same", 1, (1, 1), (3, 3)), ("strided", 2, (0, 1), (3, 2))] {
        let w = cs.constant(&[3, 2, k.0, k.1]);
        let b = cs.constant(&[3]);
        let x = cs.constant(&[2, 2, 5, 6]);
        cs.op(&format!("conv2d/{tag}/input"), &[2, 2, 5, 6], |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(xv, wv, Some(bv), stride, pad)
        })?;
        cs.op(&format!("conv2d/{tag}/weight"), &[3, 2, k.0, k.1], |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(xv, wv, Some(bv), stride, pad)
        })?;
        cs.op(&format!("conv2d/{tag}/bias"), &[3], |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xv, wv, Some(bv), stride, pad)
        })?;
    }
    for (tag, stride, pad) in [("same", 1, (1, 1)), ("strided", 2, (1, 0))] {
        let w = cs.constant(&[2, 3, 3, 3]);
        let b = cs.constant(&[3]);
        let x = cs.constant(&[2, 2, 4, 3]);
        cs.op(&format!("conv_transpose2d/{tag}/input"), &[2, 2, 4, 3], |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv_transpose2d(xv, wv, Some(bv), stride, pad)
        })?;
        cs.op(&format!("conv_transpose2d/{tag}/weight"), &[2, 3, 3, 3], |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv_transpose2d(xv, wv, Some(bv), stride, pad)
        })?;
        cs.op(&format!("conv_transpose2d/{tag}/bias"), &[3], |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv_transpose2d(xv, wv, Some(bv), stride, pad)
        })?;
    }

    let target = cs.constant(&[2, 2, 3]);
    cs.op("mse_loss", &[2, 2, 3], |g, x| {
        let t = g.constant(target.clone());
        mse_loss(g, t, x)
    })?;
    cs.op("window_partition+merge", &[1, 4, 4, 2], |g, x| {
        let w = window_partition(g, x, 2)?;
        let y = g.mul(w, w)?;
        window_merge(g, y, 4, 2)
    })?;
    Ok(cs.out)
}

/// LSA, GSA, a full transformer block and a CR block, each with respect to
/// its input and every parameter.
pub fn block_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut cs = Cases {
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        seed,
        out: Vec::new(),
    };
    let att = AttentionConfig::new(4, 2, 4, 2)?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);

    let lsa = Lsa::new("lsa", att)?;
    let mut store = ParamStore::new();
    lsa.init(&mut store, &mut init)?;
    cs.block("lsa", &[1, 4, 4, 4], &store, |g, s, x| lsa.forward(g, s, x))?;

    let gsa = Gsa::new("gsa", att)?;
    let mut store = ParamStore::new();
    gsa.init(&mut store, &mut init)?;
    cs.block("gsa", &[1, 4, 4, 4], &store, |g, s, x| gsa.forward(g, s, x))?;

    let stb = Stb::new("stb", att)?;
    let mut store = ParamStore::new();
    stb.init(&mut store, &mut init)?;
    cs.block("stb", &[1, 4, 4, 4], &store, |g, s, x| stb.forward(g, s, x))?;

    let cr = CrBlock::new("cr", 2, 2);
    let mut store = ParamStore::new();
    cr.init(&mut store, &mut init)?;
    cs.block("cr_block", &[1, 2, 9, 9], &store, |g, s, x| cr.forward(g, s, x))?;
    Ok(cs.out)
}

fn tiny_loss<T: Real>(net: &Stnet, store: &ParamStore<T>, x: &Tensor<T>, grad: bool) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new();
    let xv = g.input(INPUT, x.clone(), grad);
    let y = net.forward_graph(&mut g, store, xv)?;
    let loss = mse_loss(&mut g, xv, y)?;
    let value = g.value(loss).item();
    if !grad {
        return Ok((value, BTreeMap::new()));
    }
    Ok((value, g.backward(loss)?.into_named()))
}

/// The tiny autoencoder (`L = 8, d = 8, P = 2, W = 4`) end to end through
/// the training loss, at double precision and at the `f32` working
/// precision. Every input entry and a few entries of every parameter
/// tensor are probed against double-precision central differences.
pub fn model_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let config = ModelConfig::tiny().with_seed(seed);
    let net = Stnet::new(config.clone())?;
    let store: ParamStore<f64> = net.init()?;
    let store32: ParamStore<f32> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let x = Tensor::uniform([2, 2, config.n_c, config.n_t], 0.0, 1.0, &mut rng);
    let (_, g64) = tiny_loss(&net, &store, &x, true)?;
    let (_, g32) = tiny_loss(&net, &store32, &x.cast(), true)?;

    let mut targets: Vec<(String, Tensor<f64>)> = vec![(INPUT.to_string(), x.clone())];
    targets.extend(store.iter().map(|(n, t)| (n.to_string(), t.clone())));
    let mut out = Vec::new();
    for (name, value) in targets {
        let n = value.numel();
        let probes: Vec<usize> = if name == INPUT || n <= PROBES_PER_PARAM {
            (0..n).collect()
        } else {
            (0..PROBES_PER_PARAM).map(|_| rng.random_range(0..n)).collect()
        };
        let eval = |v: &Tensor<f64>| -> Result<f64> {
            if name == INPUT {
                return Ok(tiny_loss(&net, &store, v, false)?.0);
            }
            let mut s = store.clone();
            *s.get_mut(&name)? = v.clone();
            Ok(tiny_loss(&net, &s, &x, false)?.0)
        };
        let numeric = central_differences(eval, &value, MODEL_EPS, &probes)?;
        let a64: Vec<f64> = probes.iter().map(|&i| g64[&name].data()[i]).collect();
        let a32: Vec<f64> = probes.iter().map(|&i| g32[&name].data()[i] as f64).collect();
        let label = &name;
        if shift_invariant(&name) {
            out.push(SuiteEntry::vanishing(format!("model/{label}"), Precision::F64, &a64, &numeric));
            out.push(SuiteEntry::vanishing(format!("model/{label}"), Precision::F32, &a32, &numeric));
        } else {
            out.push(SuiteEntry::relative(format!("model/{label}"), Precision::F64, &a64, &numeric, MODEL_THRESHOLD));
            out.push(SuiteEntry::relative(format!("model/{label}"), Precision::F32, &a32, &numeric, WORKING_THRESHOLD));
        }
    }
    Ok(out)
}

/// Ops, blocks and the end-to-end model.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut all = op_suite(seed)?;
    all.extend(block_suite(seed)?);
    all.extend(model_suite(seed)?);
    Ok(all)
}
