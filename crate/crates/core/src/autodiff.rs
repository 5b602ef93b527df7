//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op executed through it in topological order.
//! [`Graph::backward`] consumes the graph and returns one gradient per leaf
//! that was registered with `requires_grad`. Multiple uses of a node sum
//! their gradient contributions.
//!
//! The graph can optionally count multiply-accumulates per named scope,
//! which is how the FLOPs analyzer cross-checks its analytic model against
//! what the kernels actually execute.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{
    col2im, gemm_nn, gemm_nt, gemm_tn, im2col, inverse_perm, permute_raw, strides, ConvGeometry,
    Real, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise op selector, mirroring the methods on [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Gelu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the equivalent forward convolution whose input is
        /// this op's output.
        geom: ConvGeometry,
    },
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    p: usize,
    q: usize,
    r: usize,
    /// (a offset, b offset) per output batch element.
    offsets: Vec<(usize, usize)>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Work counted for one scope: multiply-accumulates from matmul-like
/// kernels and extra FLOPs from softmax/normalization (5 per element).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub macs: u64,
    pub extra_flops: u64,
}

/// Per-scope cost record collected while profiling is enabled.
pub type Profile = BTreeMap<String, OpCost>;

/// FLOPs charged per element for softmax and layer normalization.
pub const NORM_FLOPS_PER_ELEMENT: u64 = 5;

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_names: HashMap<String, Var>,
    names: HashMap<Var, String>,
    scopes: Vec<String>,
    profile: Option<Profile>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_names: HashMap::new(),
            names: HashMap::new(),
            scopes: Vec::new(),
            profile: None,
        }
    }

    /// A graph that records MAC counts for every kernel it runs.
    pub fn profiled() -> Self {
        let mut g = Self::new();
        g.profile = Some(Profile::new());
        g
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    pub fn push_scope(&mut self, label: impl Into<String>) {
        self.scopes.push(label.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    fn charge(&mut self, macs: u64, extra_flops: u64) {
        if let Some(profile) = self.profile.as_mut() {
            let key = self.scopes.last().cloned().unwrap_or_else(|| "<root>".into());
            let entry = profile.entry(key).or_default();
            entry.macs += macs;
            entry.extra_flops += extra_flops;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named leaf. Registering the same name twice returns the first node.
    pub fn input(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.leaf_names.get(name) {
            return v;
        }
        let v = self.push(value, Op::Leaf, requires_grad);
        self.leaf_names.insert(name.to_string(), v);
        self.names.insert(v, name.to_string());
        v
    }

    /// A named trainable leaf; the value is copied onto the tape.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.leaf_names.get(name) {
            return v;
        }
        self.input(name, value.clone(), true)
    }

    /// Register `name` for an existing leaf so later [`Graph::param`]
    /// lookups of that name resolve to it.
    pub fn alias(&mut self, name: &str, v: Var) -> Result<()> {
        if !matches!(self.nodes[v.0].op, Op::Leaf) {
            return Err(Error::Config(format!("alias {name} must refer to a leaf")));
        }
        match self.leaf_names.get(name) {
            Some(&old) if old != v => Err(Error::Config(format!("leaf name {name} already bound"))),
            _ => {
                self.leaf_names.insert(name.to_string(), v);
                Ok(())
            }
        }
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Config(format!("{op:?} expects {arity} inputs")));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Gelu => Ok(self.gelu(inputs[0])),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.numel() == 1 {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let value = self.nodes[a.0].value.map(|x| x * k);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Batched matrix product `[.., p, q] × [.., q, r] -> [.., p, r]`; batch
    /// extents must agree or be 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let rank = sa.len().max(sb.len()) - 2;
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - (s.len() - 2)];
            v.extend_from_slice(&s[..s.len() - 2]);
            v
        };
        let (ba, bb) = (pad(&sa), pad(&sb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in ba.iter().zip(&bb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(Error::shape("matmul", &sa, &sb));
            }
        }
        let n_batch: usize = batch.iter().product();
        let (sta, stb) = (strides(&ba), strides(&bb));
        let stc = strides(&batch);
        let offsets: Vec<(usize, usize)> = (0..n_batch)
            .map(|flat| {
                let (mut oa, mut ob) = (0, 0);
                for ax in 0..rank {
                    let i = (flat / stc[ax]) % batch[ax];
                    if ba[ax] != 1 {
                        oa += i * sta[ax];
                    }
                    if bb[ax] != 1 {
                        ob += i * stb[ax];
                    }
                }
                (oa * p * q, ob * q * r)
            })
            .collect();
        let mut out = vec![T::zero(); n_batch * p * r];
        {
            let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            for (i, &(oa, ob)) in offsets.iter().enumerate() {
                gemm_nn(
                    p,
                    q,
                    r,
                    &da[oa..oa + p * q],
                    &db[ob..ob + q * r],
                    &mut out[i * p * r..(i + 1) * p * r],
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend_from_slice(&[p, r]);
        self.charge((n_batch * p * q * r) as u64, 0);
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                plan: MatMulPlan { p, q, r, offsets },
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x: [.., in]`, `w: [out, in]`,
    /// `b: [out]` gives `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (out_f, in_f) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_f]));
            }
        }
        let rows = self.nodes[x.0].value.numel() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        gemm_nt(
            rows,
            in_f,
            out_f,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_f;
        self.charge((rows * in_f * out_f) as u64, 0);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        if inner == 1 {
            for (row, dst) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut total = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - mx).exp();
                    total += *d;
                }
                let inv = T::one() / total;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        for o in 0..if inner == 1 { 0 } else { outer } {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for k in 0..len {
                    out[base + k * inner] *= inv;
                }
            }
        }
        self.charge(0, NORM_FLOPS_PER_ELEMENT * out.len() as u64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.permute(perm)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Config("empty concat".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Normalize each slice along the last axis, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.nodes[x.0].value.data();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let rows = src.len() / d;
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for k in 0..d {
                let xhat = T::of((row[k].f64() - mean) * rs);
                out[r * d + k] = xhat * g[k] + b[k];
            }
        }
        self.charge(0, NORM_FLOPS_PER_ELEMENT * out.len() as u64);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, cout) = (sx[0], sw[0]);
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: (sw[2], sw[3]),
            stride,
            padding,
        };
        let (oh, ow) = geom
            .out_hw()
            .ok_or_else(|| Error::invalid("conv2d", &sx, format!("kernel {:?} stride {stride} padding {padding:?}", geom.kernel)))?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let ckk = geom.channels * sw[2] * sw[3];
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = cout * oh * ow;
        let mut out = vec![T::zero(); batch * out_len];
        let mut col = Vec::new();
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            for s in 0..batch {
                im2col(&xd[s * in_len..(s + 1) * in_len], &geom, &mut col);
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                gemm_nn(cout, ckk, oh * ow, wd, &col, dst, false);
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data();
                    for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            }
        }
        self.charge((batch * out_len * ckk) as u64, 0);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(vec![batch, cout, oh, ow], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`] with the same
    /// geometry). `w: [Cin, Cout, kh, kw]`; output extent per axis is
    /// `(in − 1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (batch, cin, h, wd_) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding.0).filter(|&v| v > 0);
        let ow = ((wd_ - 1) * stride + kw).checked_sub(2 * padding.1).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::invalid("conv_transpose2d", &sx, "padding exceeds output"));
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: (kh, kw),
            stride,
            padding,
        };
        if geom.out_hw() != Some((h, wd_)) {
            return Err(Error::invalid("conv_transpose2d", &sx, "inconsistent geometry"));
        }
        let ckk = cout * kh * kw;
        let in_len = cin * h * wd_;
        let out_len = cout * oh * ow;
        let mut out = vec![T::zero(); batch * out_len];
        let mut col = vec![T::zero(); ckk * h * wd_];
        {
            let xd = self.nodes[x.0].value.data();
            let wdat = self.nodes[w.0].value.data();
            for s in 0..batch {
                gemm_tn(ckk, cin, h * wd_, wdat, &xd[s * in_len..(s + 1) * in_len], &mut col, false);
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                col2im(&col, &geom, dst);
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data();
                    for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            }
        }
        self.charge((batch * in_len * ckk) as u64, 0);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(vec![batch, cout, oh, ow], out)?,
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        ))
    }

    /// Run reverse-mode differentiation from a one-element `root`,
    /// consuming the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.shape(root).to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(root_shape));
        }
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            for (dep, g) in self.local_grads(idx, &gout)? {
                if !self.nodes[dep.0].requires_grad {
                    continue;
                }
                match &mut grads[dep.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut by_name = BTreeMap::new();
        let mut by_var = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            if let Some(name) = self.names.get(&Var(idx)) {
                by_name.insert(name.clone(), Var(idx));
            }
            by_var.insert(Var(idx), g);
        }
        Ok(Gradients { by_var, by_name })
    }

    fn local_grads(&self, idx: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = gout.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_to(gout.clone(), val(*a))),
                (*b, reduce_to(gout.clone(), val(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(gout.clone(), val(*a))),
                (*b, reduce_to(gout.map(|v| -v), val(*b))),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_zip(gout, vb, |g, y| g * y);
                let gb = broadcast_zip(gout, va, |g, x| g * x);
                vec![(*a, reduce_to(ga, va)), (*b, reduce_to(gb, vb))]
            }
            Op::Scale(a, c) => {
                let k = T::of(*c);
                vec![(*a, gout.map(|g| g * k))]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let data = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                vec![(*a, Tensor::new(gout.shape().to_vec(), data)?)]
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let data = gd.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect();
                vec![(*a, Tensor::new(gout.shape().to_vec(), data)?)]
            }
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { p, q, r, offsets } = plan;
                let (p, q, r) = (*p, *q, *r);
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); va.numel()];
                let mut gb = vec![T::zero(); vb.numel()];
                for (i, &(oa, ob)) in offsets.iter().enumerate() {
                    let g = &gd[i * p * r..(i + 1) * p * r];
                    gemm_nt(p, r, q, g, &vb.data()[ob..ob + q * r], &mut ga[oa..oa + p * q], true);
                    gemm_tn(q, p, r, &va.data()[oa..oa + p * q], g, &mut gb[ob..ob + q * r], true);
                }
                vec![
                    (*a, Tensor::new(va.shape().to_vec(), ga)?),
                    (*b, Tensor::new(vb.shape().to_vec(), gb)?),
                ]
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (out_f, in_f) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / in_f;
                let mut gx = vec![T::zero(); vx.numel()];
                gemm_nn(rows, out_f, in_f, gd, vw.data(), &mut gx, false);
                let mut gw = vec![T::zero(); vw.numel()];
                gemm_tn(out_f, rows, in_f, gd, vx.data(), &mut gw, false);
                let mut out = vec![
                    (*x, Tensor::new(vx.shape().to_vec(), gx)?),
                    (*w, Tensor::new(vw.shape().to_vec(), gw)?),
                ];
                if let Some(b) = b {
                    let mut gbias = vec![T::zero(); out_f];
                    for row in gd.chunks(out_f) {
                        gbias.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, Tensor::new(vec![out_f], gbias)?));
                }
                out
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                if *inner == 1 {
                    for ((yr, gr), dst) in y.chunks_exact(*len).zip(gd.chunks_exact(*len)).zip(gx.chunks_exact_mut(*len)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                for o in 0..if *inner == 1 { 0 } else { *outer } {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..*len {
                            dot += gd[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..*len {
                            let j = base + k * inner;
                            gx[j] = y[j] * (gd[j] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(node.value.shape().to_vec(), gx)?)]
            }
            Op::Reshape(x) => vec![(*x, gout.clone().reshape(val(*x).shape().to_vec())?)],
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                let data = permute_raw(gd, gout.shape(), &inv);
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = xs.iter().map(|v| Vec::with_capacity(val(*v).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, v) in xs.iter().enumerate() {
                        let chunk = val(*v).shape()[*axis] * inner;
                        parts[k].extend_from_slice(&gd[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                xs.iter()
                    .zip(parts)
                    .map(|(v, data)| Ok((*v, Tensor::new(val(*v).shape().to_vec(), data)?)))
                    .collect::<Result<_>>()?
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), gd[0]))],
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let vx = val(*x);
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = vx.numel() / d;
                let mut gx = vec![T::zero(); vx.numel()];
                let mut ggam = vec![0.0f64; d];
                let mut gbet = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for r in 0..rows {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for k in 0..d {
                        let g = gd[r * d + k].f64();
                        xhat[k] = (row[k].f64() - mean) * rs;
                        dxhat[k] = g * gam[k].f64();
                        ggam[k] += g * xhat[k];
                        gbet[k] += g;
                        m1 += dxhat[k];
                        m2 += dxhat[k] * xhat[k];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for k in 0..d {
                        gx[r * d + k] = T::of(rs * (dxhat[k] - m1 - xhat[k] * m2));
                    }
                }
                vec![
                    (*x, Tensor::new(vx.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![d], ggam.into_iter().map(T::of).collect())?),
                    (*beta, Tensor::new(vec![d], gbet.into_iter().map(T::of).collect())?),
                ]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let (oh, ow) = geom.out_hw().expect("validated");
                let batch = vx.shape()[0];
                let cout = vw.shape()[0];
                let ckk = vw.numel() / cout;
                let in_len = vx.numel() / batch;
                let out_len = cout * oh * ow;
                let mut gx = vec![T::zero(); vx.numel()];
                let mut gw = vec![T::zero(); vw.numel()];
                let mut col = Vec::new();
                let mut dcol = vec![T::zero(); ckk * oh * ow];
                for s in 0..batch {
                    let g = &gd[s * out_len..(s + 1) * out_len];
                    im2col(&vx.data()[s * in_len..(s + 1) * in_len], geom, &mut col);
                    gemm_nt(cout, oh * ow, ckk, g, &col, &mut gw, true);
                    gemm_tn(ckk, cout, oh * ow, vw.data(), g, &mut dcol, false);
                    col2im(&dcol, geom, &mut gx[s * in_len..(s + 1) * in_len]);
                }
                let mut out = vec![
                    (*x, Tensor::new(vx.shape().to_vec(), gx)?),
                    (*w, Tensor::new(vw.shape().to_vec(), gw)?),
                ];
                if let Some(b) = b {
                    out.push((*b, channel_sums(gd, batch, cout, oh * ow)?));
                }
                out
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let batch = vx.shape()[0];
                let (cin, h, wdt) = (vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let cout = geom.channels;
                let ckk = vw.numel() / cin;
                let in_len = cin * h * wdt;
                let out_len = cout * geom.height * geom.width;
                let mut gx = vec![T::zero(); vx.numel()];
                let mut gw = vec![T::zero(); vw.numel()];
                let mut dcol = Vec::new();
                for s in 0..batch {
                    im2col(&gd[s * out_len..(s + 1) * out_len], geom, &mut dcol);
                    gemm_nn(cin, ckk, h * wdt, vw.data(), &dcol, &mut gx[s * in_len..(s + 1) * in_len], false);
                    gemm_nt(cin, h * wdt, ckk, &vx.data()[s * in_len..(s + 1) * in_len], &dcol, &mut gw, true);
                }
                let mut out = vec![
                    (*x, Tensor::new(vx.shape().to_vec(), gx)?),
                    (*w, Tensor::new(vw.shape().to_vec(), gw)?),
                ];
                if let Some(b) = b {
                    out.push((*b, channel_sums(gd, batch, cout, geom.height * geom.width)?));
                }
                out
            }
        })
    }
}

fn channel_sums<T: Real>(gd: &[T], batch: usize, channels: usize, plane: usize) -> Result<Tensor<T>> {
    let mut acc = vec![T::zero(); channels];
    for s in 0..batch {
        for (c, a) in acc.iter_mut().enumerate() {
            let off = (s * channels + c) * plane;
            *a += gd[off..off + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![channels], acc)
}

/// Elementwise `f(g, other)` where `other` may be a broadcast scalar.
fn broadcast_zip<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if other.numel() == g.numel() {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same length")
    } else {
        let s = other.item();
        g.map(|a| f(a, s))
    }
}

/// Sum a gradient down to a broadcast scalar operand when needed.
fn reduce_to<T: Real>(g: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if target.numel() == g.numel() {
        g.reshape(target.shape().to_vec()).expect("same numel")
    } else {
        Tensor::full(target.shape().to_vec(), g.sum())
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    by_var: BTreeMap<Var, Tensor<T>>,
    by_name: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name).and_then(|v| self.by_var.get(v))
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    /// Named leaf gradients in path order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name
            .iter()
            .map(move |(n, v)| (n.as_str(), &self.by_var[v]))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
            .into_iter()
            .filter_map(|(n, v)| self.by_var.remove(&v).map(|t| (n, t)))
            .collect()
    }
}
