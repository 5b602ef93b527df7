//! The STNet autoencoder: an encoder built from convolutions around one
//! local-then-global attention transformer block (STB), and a decoder with
//! a CNN stem (two CR blocks) and a transformer stem (one STB) whose outputs
//! are summed, fused and squashed into `(0, 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Gsa, Lsa};
use crate::autodiff::{Graph, OpCost, Var, NORM_FLOPS_PER_ELEMENT};
use crate::domain::CompressionRatio;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters. One model is trained per compression ratio.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Retained delay rows `N_c`.
    pub n_c: usize,
    /// Base-station antennas `N_t`.
    pub n_t: usize,
    /// Codeword length `M`.
    pub codeword: usize,
    /// Token embedding dimension `d`.
    pub embed_dim: usize,
    /// Attention window side `W`.
    pub window: usize,
    /// Attention heads `P`.
    pub heads: usize,
    /// Channels between the encoder's post-STB convolution and its
    /// transposed convolution.
    pub encoder_hidden: usize,
    /// Per-path channel width inside the decoder's CR blocks.
    pub cr_hidden: usize,
    /// STB count in the encoder and in the decoder's transformer stem.
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_c: 32,
            n_t: 32,
            codeword: 512,
            embed_dim: 4,
            window: 8,
            heads: 4,
            encoder_hidden: 8,
            cr_hidden: 6,
            encoder_blocks: 1,
            decoder_blocks: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture for `gamma = num/den` on a 32×32 grid.
    pub fn for_gamma(num: u64, den: u64) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.codeword = CompressionRatio::codeword_for(num, den, c.n_c, c.n_t)?;
        Ok(c)
    }

    /// The small configuration used for end-to-end gradient checks
    /// (`L = 8`, `d = 8`, `P = 2`, `W = 4`).
    pub fn tiny() -> Self {
        ModelConfig {
            n_c: 8,
            n_t: 8,
            codeword: 32,
            embed_dim: 8,
            window: 4,
            heads: 2,
            encoder_hidden: 4,
            cr_hidden: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Real degrees of freedom of one sample, `2·N_c·N_t`.
    pub fn sample_len(&self) -> usize {
        2 * self.n_c * self.n_t
    }

    pub fn gamma(&self) -> CompressionRatio {
        CompressionRatio::new(self.codeword as u64, self.n_c as u64, self.n_t as u64)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.n_c, self.window, self.embed_dim, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c != self.n_t {
            return Err(Error::Config(format!(
                "attention grid must be square, got N_c={} N_t={}",
                self.n_c, self.n_t
            )));
        }
        if self.codeword == 0 || self.codeword > self.sample_len() {
            return Err(Error::Config(format!(
                "codeword length {} must be in 1..={}",
                self.codeword,
                self.sample_len()
            )));
        }
        if self.encoder_hidden == 0 || self.cr_hidden == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        self.attention()?;
        Ok(())
    }
}

/// `linear → GELU → linear`, both `d → d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(name: &str, dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{name}.fc1"), dim, dim),
            fc2: Linear::new(format!("{name}.fc2"), dim, dim),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Local-then-global attention transformer block:
/// `LSA → add&norm → MLP → add&norm → GSA → add&norm → MLP → add&norm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stb {
    pub name: String,
    pub lsa: Lsa,
    pub norm1: LayerNorm,
    pub mlp1: Mlp,
    pub norm2: LayerNorm,
    pub gsa: Gsa,
    pub norm3: LayerNorm,
    pub mlp2: Mlp,
    pub norm4: LayerNorm,
}

impl Stb {
    pub fn new(name: impl Into<String>, config: AttentionConfig) -> Result<Self> {
        let name = name.into();
        let d = config.dim;
        Ok(Stb {
            lsa: Lsa::new(format!("{name}.lsa"), config)?,
            norm1: LayerNorm::new(format!("{name}.norm1"), d),
            mlp1: Mlp::new(&format!("{name}.mlp1"), d),
            norm2: LayerNorm::new(format!("{name}.norm2"), d),
            gsa: Gsa::new(format!("{name}.gsa"), config)?,
            norm3: LayerNorm::new(format!("{name}.norm3"), d),
            mlp2: Mlp::new(&format!("{name}.mlp2"), d),
            norm4: LayerNorm::new(format!("{name}.norm4"), d),
            name,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.lsa.config
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.lsa.init(store, rng)?;
        self.norm1.init(store)?;
        self.mlp1.init(store, rng)?;
        self.norm2.init(store)?;
        self.gsa.init(store, rng)?;
        self.norm3.init(store)?;
        self.mlp2.init(store, rng)?;
        self.norm4.init(store)
    }

    /// `x: [b, L, L, d]` to the same shape.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.lsa.forward(g, store, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let h = self.mlp1.forward(g, store, x)?;
        let x = g.add(x, h)?;
        let x = self.norm2.forward(g, store, x)?;
        let a = self.gsa.forward(g, store, x)?;
        let x = g.add(x, a)?;
        let x = self.norm3.forward(g, store, x)?;
        let h = self.mlp2.forward(g, store, x)?;
        let x = g.add(x, h)?;
        self.norm4.forward(g, store, x)
    }

    fn costs(&self, out: &mut Vec<(String, OpCost)>) {
        let c = self.config();
        let (t, d, p) = (c.tokens(), c.dim, c.heads);
        let (w, m) = (c.window, c.windows_per_side());
        let lin = |out: &mut Vec<(String, OpCost)>, l: &Linear, rows: usize| {
            out.push((l.name.clone(), macs(l.macs(rows))));
        };
        let norm = |out: &mut Vec<(String, OpCost)>, n: &LayerNorm| {
            out.push((n.name.clone(), flops((t * d) as u64 * NORM_FLOPS_PER_ELEMENT)));
        };
        let lsa = &self.lsa.mha;
        for l in [&lsa.query, &lsa.key, &lsa.value] {
            lin(out, l, t);
        }
        let score = (m * m * w * w * w * w * d) as u64;
        out.push((format!("{}.score", lsa.name), macs(score)));
        out.push((
            format!("{}.softmax", lsa.name),
            flops((p * t * w * w) as u64 * NORM_FLOPS_PER_ELEMENT),
        ));
        out.push((format!("{}.aggregate", lsa.name), macs(score)));
        lin(out, &lsa.output, t);
        norm(out, &self.norm1);
        lin(out, &self.mlp1.fc1, t);
        lin(out, &self.mlp1.fc2, t);
        norm(out, &self.norm2);
        let gsa = &self.gsa.mha;
        out.push((self.gsa.subsample.name.clone(), macs(self.gsa.subsample.macs(c.grid, c.grid))));
        lin(out, &gsa.query, t);
        lin(out, &gsa.key, m * m);
        lin(out, &gsa.value, m * m);
        let score = (t * m * m * d) as u64;
        out.push((format!("{}.score", gsa.name), macs(score)));
        out.push((
            format!("{}.softmax", gsa.name),
            flops((p * t * m * m) as u64 * NORM_FLOPS_PER_ELEMENT),
        ));
        out.push((format!("{}.aggregate", gsa.name), macs(score)));
        lin(out, &gsa.output, t);
        norm(out, &self.norm3);
        lin(out, &self.mlp2.fc1, t);
        lin(out, &self.mlp2.fc2, t);
        norm(out, &self.norm4);
    }
}

fn macs(m: u64) -> OpCost {
    OpCost {
        macs: m,
        extra_flops: 0,
    }
}

fn flops(f: u64) -> OpCost {
    OpCost {
        macs: 0,
        extra_flops: f,
    }
}

/// Multi-resolution residual block: a 3×3 path and a 1×9 → 9×1 path,
/// concatenated, fused by a 1×1 convolution and added to the input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrBlock {
    pub name: String,
    pub path_a: Conv2d,
    pub path_b1: Conv2d,
    pub path_b2: Conv2d,
    pub fuse: Conv2d,
}

impl CrBlock {
    pub fn new(name: impl Into<String>, channels: usize, hidden: usize) -> Self {
        let name = name.into();
        CrBlock {
            path_a: Conv2d::same(format!("{name}.path_a"), channels, hidden, 3),
            path_b1: Conv2d::new(format!("{name}.path_b1"), channels, hidden, (1, 9), 1, (0, 4)),
            path_b2: Conv2d::new(format!("{name}.path_b2"), hidden, hidden, (9, 1), 1, (4, 0)),
            fuse: Conv2d::same(format!("{name}.fuse"), 2 * hidden, channels, 1),
            name,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for c in [&self.path_a, &self.path_b1, &self.path_b2, &self.fuse] {
            c.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.path_a.forward(g, store, x)?;
        let a = g.gelu(a);
        let b = self.path_b1.forward(g, store, x)?;
        let b = g.gelu(b);
        let b = self.path_b2.forward(g, store, b)?;
        let b = g.gelu(b);
        let cat = g.concat(&[a, b], 1)?;
        let y = self.fuse.forward(g, store, cat)?;
        g.add(x, y)
    }

    fn costs(&self, h: usize, w: usize, out: &mut Vec<(String, OpCost)>) {
        for c in [&self.path_a, &self.path_b1, &self.path_b2, &self.fuse] {
            out.push((c.name.clone(), macs(c.macs(h, w))));
        }
    }
}

/// Layer descriptors of the whole autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stnet {
    pub config: ModelConfig,
    pub enc_embed: Conv2d,
    pub enc_blocks: Vec<Stb>,
    pub enc_conv: Conv2d,
    pub enc_convt: ConvTranspose2d,
    pub enc_fc: Linear,
    pub dec_fc: Linear,
    pub cr1: CrBlock,
    pub cr2: CrBlock,
    pub dec_embed: Conv2d,
    pub dec_blocks: Vec<Stb>,
    pub dec_proj: Conv2d,
    pub dec_fusion: Conv2d,
}

impl Stnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let att = config.attention()?;
        let d = config.embed_dim;
        let h = config.encoder_hidden;
        let n = config.sample_len();
        let enc_blocks = (0..config.encoder_blocks)
            .map(|i| Stb::new(block_name("encoder.stb", i, config.encoder_blocks), att))
            .collect::<Result<_>>()?;
        let dec_blocks = (0..config.decoder_blocks)
            .map(|i| Stb::new(block_name("decoder.stb", i, config.decoder_blocks), att))
            .collect::<Result<_>>()?;
        Ok(Stnet {
            enc_embed: Conv2d::same("encoder.embed", 2, d, 3),
            enc_blocks,
            enc_conv: Conv2d::same("encoder.conv", d, h, 3),
            enc_convt: ConvTranspose2d::same("encoder.convt", h, 2, 3),
            enc_fc: Linear::new("encoder.fc", n, config.codeword),
            dec_fc: Linear::new("decoder.fc", config.codeword, n),
            cr1: CrBlock::new("decoder.cr1", 2, config.cr_hidden),
            cr2: CrBlock::new("decoder.cr2", 2, config.cr_hidden),
            dec_embed: Conv2d::same("decoder.embed", 2, d, 3),
            dec_blocks,
            dec_proj: Conv2d::same("decoder.proj", d, 2, 3),
            dec_fusion: Conv2d::same("decoder.fusion", 2, 2, 3),
            config,
        })
    }

    /// Seeded parameter initialization: Kaiming-uniform weights, zero
    /// biases, unit/zero LayerNorm affine.
    pub fn init<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::new();
        self.enc_embed.init(&mut store, &mut rng)?;
        for b in &self.enc_blocks {
            b.init(&mut store, &mut rng)?;
        }
        self.enc_conv.init(&mut store, &mut rng)?;
        self.enc_convt.init(&mut store, &mut rng)?;
        self.enc_fc.init(&mut store, &mut rng)?;
        self.dec_fc.init(&mut store, &mut rng)?;
        self.cr1.init(&mut store, &mut rng)?;
        self.cr2.init(&mut store, &mut rng)?;
        self.dec_embed.init(&mut store, &mut rng)?;
        for b in &self.dec_blocks {
            b.init(&mut store, &mut rng)?;
        }
        self.dec_proj.init(&mut store, &mut rng)?;
        self.dec_fusion.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn transformer_path<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        blocks: &[Stb],
        x: Var,
    ) -> Result<Var> {
        let mut t = g.permute(x, &[0, 2, 3, 1])?;
        for b in blocks {
            t = b.forward(g, store, t)?;
        }
        g.permute(t, &[0, 3, 1, 2])
    }

    /// `h: [b, 2, N_c, N_t]` to codewords `[b, M]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(h).to_vec();
        if s.len() != 4 || s[1..] != [2, c.n_c, c.n_t] {
            return Err(Error::shape("encode", &s, &[2, c.n_c, c.n_t]));
        }
        let b = s[0];
        let offset = g.constant(Tensor::full([1], T::of(-0.5)));
        let h = g.add(h, offset)?;
        let x = self.enc_embed.forward(g, store, h)?;
        let x = self.transformer_path(g, store, &self.enc_blocks, x)?;
        let x = self.enc_conv.forward(g, store, x)?;
        let x = g.gelu(x);
        let x = self.enc_convt.forward(g, store, x)?;
        let x = g.reshape(x, &[b, c.sample_len()])?;
        self.enc_fc.forward(g, store, x)
    }

    /// Codewords `[b, M]` to reconstructions `[b, 2, N_c, N_t]` in `(0, 1)`.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, s: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(s).to_vec();
        if shape.len() != 2 || shape[1] != c.codeword {
            return Err(Error::shape("decode", &shape, &[c.codeword]));
        }
        let b = shape[0];
        let x = self.dec_fc.forward(g, store, s)?;
        let x = g.reshape(x, &[b, 2, c.n_c, c.n_t])?;
        let cnn = self.cr1.forward(g, store, x)?;
        let cnn = self.cr2.forward(g, store, cnn)?;
        let t = self.dec_embed.forward(g, store, x)?;
        let t = self.transformer_path(g, store, &self.dec_blocks, t)?;
        let t = self.dec_proj.forward(g, store, t)?;
        let y = g.add(cnn, t)?;
        let y = self.dec_fusion.forward(g, store, y)?;
        Ok(g.sigmoid(y))
    }

    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let s = self.encode_graph(g, store, h)?;
        self.decode_graph(g, store, s)
    }

    /// Analytic per-sample cost of every scope the forward pass charges, in
    /// execution order. Keys match the profiling scopes of [`Graph`].
    pub fn scope_costs(&self) -> Vec<(String, OpCost)> {
        let c = &self.config;
        let (hh, ww) = (c.n_c, c.n_t);
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, OpCost)>, l: &Conv2d| out.push((l.name.clone(), macs(l.macs(hh, ww))));
        conv(&mut out, &self.enc_embed);
        for b in &self.enc_blocks {
            b.costs(&mut out);
        }
        conv(&mut out, &self.enc_conv);
        out.push((self.enc_convt.name.clone(), macs(self.enc_convt.macs(hh, ww))));
        out.push((self.enc_fc.name.clone(), macs(self.enc_fc.macs(1))));
        out.push((self.dec_fc.name.clone(), macs(self.dec_fc.macs(1))));
        self.cr1.costs(hh, ww, &mut out);
        self.cr2.costs(hh, ww, &mut out);
        conv(&mut out, &self.dec_embed);
        for b in &self.dec_blocks {
            b.costs(&mut out);
        }
        conv(&mut out, &self.dec_proj);
        conv(&mut out, &self.dec_fusion);
        out
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Stb> {
        self.enc_blocks.iter().chain(&self.dec_blocks)
    }
}

fn block_name(prefix: &str, i: usize, count: usize) -> String {
    if count == 1 {
        prefix.to_string()
    } else {
        format!("{prefix}{i}")
    }
}

/// A model's configuration together with its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StnetParams<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

/// Build the architecture for `config` and initialize it from `config.seed`.
pub fn build_model(config: ModelConfig) -> Result<StnetParams<f32>> {
    let net = Stnet::new(config.clone())?;
    Ok(StnetParams {
        store: net.init()?,
        config,
    })
}

impl<T: Real> StnetParams<T> {
    pub fn architecture(&self) -> Result<Stnet> {
        Stnet::new(self.config.clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn cast<U: Real>(&self) -> StnetParams<U> {
        StnetParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }

    /// Inference-only encoder: `[b, 2, N_c, N_t]` to `[b, M]`.
    pub fn encode(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self.architecture()?;
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let s = net.encode_graph(&mut g, &self.store, x)?;
        Ok(g.value(s).clone())
    }

    /// Inference-only decoder: `[b, M]` to `[b, 2, N_c, N_t]`.
    pub fn decode(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self.architecture()?;
        let mut g = Graph::new();
        let x = g.constant(s.clone());
        let y = net.decode_graph(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }

    pub fn reconstruct(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self.architecture()?;
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = net.forward_graph(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codeword_lengths_follow_gamma() {
        assert_eq!(ModelConfig::for_gamma(1, 4).unwrap().codeword, 512);
        assert_eq!(ModelConfig::for_gamma(1, 64).unwrap().codeword, 32);
        assert!(ModelConfig::for_gamma(1, 3).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::default();
        c.codeword = 0;
        assert!(Stnet::new(c).is_err());
        let mut c = ModelConfig::default();
        c.n_t = 16;
        assert!(Stnet::new(c).is_err());
        let mut c = ModelConfig::default();
        c.window = 5;
        assert!(Stnet::new(c).is_err());
    }

    #[test]
    fn parameter_paths_are_unique_and_seeded() {
        let a = build_model(ModelConfig::tiny().with_seed(5)).unwrap();
        let b = build_model(ModelConfig::tiny().with_seed(5)).unwrap();
        assert_eq!(a, b);
        let c = build_model(ModelConfig::tiny().with_seed(6)).unwrap();
        assert_ne!(a.store, c.store);
        assert!(a.store.contains("encoder.stb.lsa.query.weight"));
        assert!(a.store.contains("decoder.cr2.fuse.bias"));
        assert!(a.store.contains("decoder.stb.gsa.subsample.weight"));
    }

    #[test]
    fn cr_block_with_zero_fuse_is_identity() {
        let block = CrBlock::new("cr", 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng).unwrap();
        let w = store.get_mut("cr.fuse.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([2, 2, 9, 7], -1.0, 1.0, &mut rng));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
