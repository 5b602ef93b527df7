//! Windowed attention layers: multi-head attention, locally grouped
//! self-attention (LSA) inside non-overlapping `W×W` windows, and global
//! sub-sampled attention (GSA) whose keys and values come from a stride-`W`
//! convolution of the token grid.
//!
//! Token grids are laid out `[batch, L, L, d]`. Attention scores are scaled
//! by `1/sqrt(d_head)` with `d_head = d / P`. No positional encoding is used.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NORM_FLOPS_PER_ELEMENT};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::tensor::Real;

/// Geometry of one attention stage on an `L×L` grid of `d`-dim tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Token-grid side length `L`.
    pub grid: usize,
    /// Window side `W`.
    pub window: usize,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Head count `P`.
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(grid: usize, window: usize, dim: usize, heads: usize) -> Result<Self> {
        let c = AttentionConfig {
            grid,
            window,
            dim,
            heads,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.window == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("attention extents must be positive: {self:?}")));
        }
        if self.grid % self.window != 0 {
            return Err(Error::Config(format!(
                "grid side {} is not divisible by window {}",
                self.grid, self.window
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Windows per side, `m = L / W`.
    pub fn windows_per_side(&self) -> usize {
        self.grid / self.window
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

/// Split `[b, L, L, d]` into `[b·m², W², d]` windows (row-major window order).
pub fn window_partition<T: Real>(g: &mut Graph<T>, x: Var, window: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != s[2] || window == 0 || s[1] % window != 0 {
        return Err(Error::invalid("window_partition", &s, format!("window {window}")));
    }
    let (b, l, d) = (s[0], s[1], s[3]);
    let m = l / window;
    let t = g.reshape(x, &[b, m, window, m, window, d])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b * m * m, window * window, d])
}

/// Exact inverse of [`window_partition`].
pub fn window_merge<T: Real>(g: &mut Graph<T>, x: Var, grid: usize, window: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || window == 0 || grid % window != 0 || s[1] != window * window {
        return Err(Error::invalid("window_merge", &s, format!("grid {grid} window {window}")));
    }
    let m = grid / window;
    if s[0] % (m * m) != 0 {
        return Err(Error::invalid("window_merge", &s, "window count"));
    }
    let (b, d) = (s[0] / (m * m), s[2]);
    let t = g.reshape(x, &[b, m, m, window, window, d])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b, grid, grid, d])
}

/// Per-head query/key/value projections plus the output projection. Head
/// `n` uses output rows `n·d_head..(n+1)·d_head` of each projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaWeights {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MhaWeights {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embed dim {dim} not divisible by {heads} heads")));
        }
        Ok(MhaWeights {
            query: Linear::new(format!("{name}.query"), dim, dim),
            key: Linear::new(format!("{name}.key"), dim, dim),
            value: Linear::new(format!("{name}.value"), dim, dim),
            output: Linear::new(format!("{name}.output"), dim, dim),
            name,
            dim,
            heads,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for lin in [&self.query, &self.key, &self.value, &self.output] {
            lin.init(store, rng)?;
        }
        Ok(())
    }

    fn check<T: Real>(&self, g: &Graph<T>, q: Var, k: Var, v: Var) -> Result<()> {
        let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(Error::shape("multi_head_attention", sq, sk));
        }
        if sq[2] != self.dim || sk[2] != self.dim || sv[2] != self.dim {
            return Err(Error::shape("multi_head_attention", sq, &[self.dim]));
        }
        if sk[1] != sv[1] || sk[0] != sv[0] || sq[0] != sk[0] {
            return Err(Error::shape("multi_head_attention", sk, sv));
        }
        Ok(())
    }

    /// Attention weights `softmax(Q Kᵀ / sqrt(d_head))` as `[B, P, Tq, Tk]`
    /// together with the concatenated head outputs `[B, Tq, d]` before the
    /// output projection.
    pub fn heads_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        self.check(g, q, k, v)?;
        let (b, tq, tk) = (g.shape(q)[0], g.shape(q)[1], g.shape(k)[1]);
        let (p, dh) = (self.heads, self.dim / self.heads);

        let qp = self.query.forward(g, store, q)?;
        let qp = g.reshape(qp, &[b, tq, p, dh])?;
        let qp = g.permute(qp, &[0, 2, 1, 3])?;
        let kp = self.key.forward(g, store, k)?;
        let kp = g.reshape(kp, &[b, tk, p, dh])?;
        let kp = g.permute(kp, &[0, 2, 3, 1])?;
        let vp = self.value.forward(g, store, v)?;
        let vp = g.reshape(vp, &[b, tk, p, dh])?;
        let vp = g.permute(vp, &[0, 2, 1, 3])?;

        g.push_scope(format!("{}.score", self.name));
        let scores = g.matmul(qp, kp);
        g.pop_scope();
        let scores = g.scale(scores?, 1.0 / (dh as f64).sqrt());
        g.push_scope(format!("{}.softmax", self.name));
        let attn = g.softmax(scores, 3);
        g.pop_scope();
        let attn = attn?;
        g.push_scope(format!("{}.aggregate", self.name));
        let y = g.matmul(attn, vp);
        g.pop_scope();
        let y = g.permute(y?, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, tq, self.dim])?;
        Ok((attn, y))
    }

    /// Full multi-head attention: heads, concatenation, output projection.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let (_, y) = self.heads_forward(g, store, q, k, v)?;
        self.output.forward(g, store, y)
    }
}

/// Locally grouped self-attention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lsa {
    pub config: AttentionConfig,
    pub mha: MhaWeights,
}

impl Lsa {
    pub fn new(name: impl Into<String>, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Lsa {
            mha: MhaWeights::new(name, config.dim, config.heads)?,
            config,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.mha.init(store, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_grid(g, x, &self.config, "lsa_forward")?;
        let windows = window_partition(g, x, self.config.window)?;
        let y = self.mha.forward(g, store, windows, windows, windows)?;
        window_merge(g, y, self.config.grid, self.config.window)
    }
}

/// Global sub-sampled attention: every token queries the `m²` window
/// summaries produced by a `W×W`, stride-`W` convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gsa {
    pub config: AttentionConfig,
    pub subsample: Conv2d,
    pub mha: MhaWeights,
}

impl Gsa {
    pub fn new(name: impl Into<String>, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let name = name.into();
        let w = config.window;
        Ok(Gsa {
            subsample: Conv2d::new(format!("{name}.subsample"), config.dim, config.dim, (w, w), w, (0, 0)),
            mha: MhaWeights::new(name, config.dim, config.heads)?,
            config,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.subsample.init(store, rng)?;
        self.mha.init(store, rng)
    }

    /// Sub-sampled key/value tokens `[b, m², d]`.
    pub fn summaries<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let (l, d) = (self.config.grid, self.config.dim);
        let m = self.config.windows_per_side();
        let nchw = g.permute(x, &[0, 3, 1, 2])?;
        let f = self.subsample.forward(g, store, nchw)?;
        if g.shape(f) != [b, d, m, m] {
            return Err(Error::invalid(
                "gsa_forward",
                g.shape(f),
                format!("sub-sampled map must be {m}×{m} for L={l}"),
            ));
        }
        let f = g.permute(f, &[0, 2, 3, 1])?;
        g.reshape(f, &[b, m * m, d])
    }

    /// Returns the output grid and the `[b, P, L², m²]` attention weights.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        check_grid(g, x, &self.config, "gsa_forward")?;
        let b = g.shape(x)[0];
        let (l, d) = (self.config.grid, self.config.dim);
        let kv = self.summaries(g, store, x)?;
        let q = g.reshape(x, &[b, l * l, d])?;
        let (attn, heads) = self.mha.heads_forward(g, store, q, kv, kv)?;
        let y = self.mha.output.forward(g, store, heads)?;
        Ok((g.reshape(y, &[b, l, l, d])?, attn))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }
}

fn check_grid<T: Real>(g: &Graph<T>, x: Var, c: &AttentionConfig, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != c.grid || s[2] != c.grid || s[3] != c.dim {
        return Err(Error::shape(op, s, &[c.grid, c.grid, c.dim]));
    }
    Ok(())
}

/// Analytic per-sample multiply-accumulate counts of one LSA + GSA pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    /// `m²` windows × `W²` queries × `W²` keys × `d`.
    pub lsa_score: u64,
    pub lsa_aggregate: u64,
    /// Q, K, V and output projections over all `L²` tokens.
    pub lsa_projections: u64,
    /// `W×W` stride-`W` convolution, `d → d`.
    pub gsa_subsample: u64,
    /// `L²` queries × `m²` keys × `d`.
    pub gsa_score: u64,
    pub gsa_aggregate: u64,
    /// Q and output over `L²` tokens, K and V over `m²` summaries.
    pub gsa_projections: u64,
    /// Softmax FLOPs (5 per attention weight), not MACs.
    pub softmax_flops: u64,
}

impl AttentionFlops {
    pub fn projections(&self) -> u64 {
        self.lsa_projections + self.gsa_projections
    }

    pub fn total_macs(&self) -> u64 {
        self.lsa_score
            + self.lsa_aggregate
            + self.lsa_projections
            + self.gsa_subsample
            + self.gsa_score
            + self.gsa_aggregate
            + self.gsa_projections
    }

    /// FLOPs under the 1 MAC = 2 FLOPs convention plus softmax.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs() + self.softmax_flops
    }
}

pub fn attention_flops(config: &AttentionConfig) -> Result<AttentionFlops> {
    config.validate()?;
    let (l, w, d, p) = (
        config.grid as u64,
        config.window as u64,
        config.dim as u64,
        config.heads as u64,
    );
    let m = l / w;
    let tokens = l * l;
    let lsa_score = m * m * (w * w) * (w * w) * d;
    let gsa_score = tokens * m * m * d;
    Ok(AttentionFlops {
        lsa_score,
        lsa_aggregate: lsa_score,
        lsa_projections: 4 * tokens * d * d,
        gsa_subsample: m * m * d * d * w * w,
        gsa_score,
        gsa_aggregate: gsa_score,
        gsa_projections: 2 * tokens * d * d + 2 * m * m * d * d,
        softmax_flops: NORM_FLOPS_PER_ELEMENT * p * (tokens * w * w + tokens * m * m),
    })
}

/// Score MACs of global attention over all `L²` tokens: `L²·L²·d`.
pub fn full_attention_score_macs(grid: usize, dim: usize) -> u64 {
    let t = (grid * grid) as u64;
    t * t * dim as u64
}

/// The order-of-growth term quoted for windowed attention, `L⁴/m⁴·d`. The
/// direct count is `L⁴/m²·d`; the two differ by a factor of `m²`.
pub fn quoted_lsa_order(config: &AttentionConfig) -> f64 {
    let l = config.grid as f64;
    let m = config.windows_per_side() as f64;
    l.powi(4) / m.powi(4) * config.dim as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(32, 8, 32, 4).is_ok());
        assert!(AttentionConfig::new(30, 8, 32, 4).is_err());
        assert!(AttentionConfig::new(32, 8, 30, 4).is_err());
        let c = AttentionConfig::new(32, 8, 32, 4).unwrap();
        assert_eq!(c.windows_per_side() * c.window, c.grid);
        assert_eq!(c.head_dim(), 8);
    }

    #[test]
    fn partition_counts_and_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([2, 32, 32, 3], |i| i as f32));
        let w = window_partition(&mut g, x, 8).unwrap();
        assert_eq!(g.shape(w), &[2 * 16, 64, 3]);
        let back = window_merge(&mut g, w, 32, 8).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let whole = window_partition(&mut g, x, 32).unwrap();
        assert_eq!(g.shape(whole), &[2, 1024, 3]);
        assert!(window_partition(&mut g, x, 5).is_err());
    }

    #[test]
    fn first_window_holds_the_top_left_tile() {
        let mut g = Graph::<f64>::new();
        // value encodes (row, col)
        let x = g.constant(Tensor::from_fn([1, 4, 4, 1], |i| i as f64));
        let w = window_partition(&mut g, x, 2).unwrap();
        assert_eq!(&g.value(w).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.value(w).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_token_attention_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MhaWeights::new("mha", 4, 2).unwrap();
        let mut store = ParamStore::<f64>::new();
        mha.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([1, 1, 4], -1.0, 1.0, &mut rng));
        let (attn, heads) = mha.heads_forward(&mut g, &store, x, x, x).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| a == 1.0));
        let v = mha.value.forward(&mut g, &store, x).unwrap();
        assert!(g.value(heads).max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn flops_reference_identities() {
        let c = AttentionConfig::new(32, 8, 32, 4).unwrap();
        let f = attention_flops(&c).unwrap();
        let m = 4u64;
        assert_eq!(f.lsa_score * m * m, full_attention_score_macs(32, 32));
        let full = AttentionConfig::new(32, 32, 32, 4).unwrap();
        assert_eq!(attention_flops(&full).unwrap().lsa_score, full_attention_score_macs(32, 32));
        let c2 = AttentionConfig::new(32, 4, 32, 4).unwrap();
        assert_eq!(attention_flops(&c2).unwrap().gsa_score, 4 * f.gsa_score);
        assert!((quoted_lsa_order(&c) * (m * m) as f64 - f.lsa_score as f64).abs() < 1e-6);
    }
}
