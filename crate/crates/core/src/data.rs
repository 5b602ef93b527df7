//! Dataset container, COST2100-layout import/export, synthetic sparse
//! multipath channels and normalization bookkeeping.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! "CSIB" | u32 version | u64 sample_count | u32 N_c | u32 N_t | u32 dtype | f32 payload
//! ```
//!
//! Each sample is a contiguous `[2, N_c, N_t]` record. Normalization,
//! scenario and source live in a JSON sidecar next to the container.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{to_angular_delay, AngularDelayChannel, FreqChannel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: [u8; 4] = *b"CSIB";
pub const CONTAINER_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 1;
const HEADER_LEN: usize = 28;

/// Grid of the public COST2100 distribution: 2048 values per sample.
pub const COST2100_GRID: usize = 32;
/// Accepted range for imported values; anything outside is rejected.
pub const IMPORT_RANGE: (f32, f32) = (-0.1, 1.1);

/// Affine map between physical values and `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min >= max {
            return Err(Error::DegenerateRange { min, max });
        }
        Ok(Normalization { min, max })
    }

    /// Range symmetric about zero covering every value, so zero maps to 0.5.
    pub fn symmetric(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let bound = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new(-bound, bound)
    }

    /// The public distribution's centering: stored = physical + 0.5.
    pub fn cost2100() -> Self {
        Normalization { min: -0.5, max: 0.5 }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }

    pub fn normalize_tensor(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| self.normalize(v))
    }

    pub fn denormalize_tensor(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| self.denormalize(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Indoor,
    Outdoor,
    Synthetic,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Indoor => "indoor",
            Scenario::Outdoor => "outdoor",
            Scenario::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Scenario::Indoor),
            "outdoor" => Ok(Scenario::Outdoor),
            "synthetic" => Ok(Scenario::Synthetic),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub normalization: Normalization,
    pub scenario: Scenario,
    pub source: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub split: Option<String>,
}

/// In-memory dataset: `sample_count` records of `[2, N_c, N_t]` f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    pub n_c: usize,
    pub n_t: usize,
    pub samples: Vec<f32>,
    pub meta: DatasetMeta,
}

impl DatasetContainer {
    pub fn new(n_c: usize, n_t: usize, samples: Vec<f32>, meta: DatasetMeta) -> Result<Self> {
        let per = 2 * n_c * n_t;
        if per == 0 || samples.len() % per != 0 {
            return Err(Error::DimMismatch(format!(
                "{} values is not a whole number of [2, {n_c}, {n_t}] samples",
                samples.len()
            )));
        }
        Ok(DatasetContainer {
            n_c,
            n_t,
            samples,
            meta,
        })
    }

    pub fn sample_len(&self) -> usize {
        2 * self.n_c * self.n_t
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    /// Gather samples into a `[b, 2, N_c, N_t]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample {i} out of range ({} samples)", self.len())));
            }
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new([indices.len(), 2, self.n_c, self.n_t], data)
    }

    pub fn subset(&self, indices: &[usize], split: Option<&str>) -> Result<Self> {
        let mut samples = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample {i} out of range ({} samples)", self.len())));
            }
            samples.extend_from_slice(self.sample(i));
        }
        let mut meta = self.meta.clone();
        meta.split = split.map(str::to_string);
        DatasetContainer::new(self.n_c, self.n_t, samples, meta)
    }

    /// Physical-domain angular-delay channel of sample `i`.
    pub fn channel(&self, i: usize) -> AngularDelayChannel {
        let norm = self.meta.normalization;
        let data = self.sample(i).iter().map(|&v| norm.denormalize(v as f64)).collect();
        AngularDelayChannel::from_planes(Tensor::new([2, self.n_c, self.n_t], data).expect("sample dims"))
            .expect("two planes")
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write the binary container and its JSON sidecar.
pub fn write_container(c: &DatasetContainer, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&CONTAINER_MAGIC);
    header.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    header.extend_from_slice(&(c.len() as u64).to_le_bytes());
    header.extend_from_slice(&(c.n_c as u32).to_le_bytes());
    header.extend_from_slice(&(c.n_t as u32).to_le_bytes());
    header.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    let io = |e| Error::io(path, e);
    w.write_all(&header).map_err(io)?;
    for v in &c.samples {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let meta = serde_json::to_string_pretty(&c.meta)?;
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(side, e))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Read and validate a container written by [`write_container`].
pub fn read_container(path: &Path) -> Result<DatasetContainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || bytes[..4] != CONTAINER_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.into(),
            expected: CONTAINER_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(&bytes, 4);
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "container",
            version,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let (n_c, n_t) = (u32_at(&bytes, 16) as usize, u32_at(&bytes, 20) as usize);
    let dtype = u32_at(&bytes, 24);
    if dtype != DTYPE_F32_LE {
        return Err(Error::UnsupportedVersion {
            what: "dtype",
            version: dtype,
        });
    }
    if n_c == 0 || n_t == 0 {
        return Err(Error::DimMismatch(format!("header declares a {n_c}×{n_t} grid")));
    }
    let values = count
        .checked_mul(2 * n_c as u64 * n_t as u64)
        .ok_or_else(|| Error::DimMismatch(format!("sample count {count} overflows")))?;
    let expected = HEADER_LEN as u64 + values * 4;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::DimMismatch(format!(
            "{} trailing bytes after {count} samples of [2, {n_c}, {n_t}]",
            found - expected
        )));
    }
    let samples = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side).map_err(|e| Error::io(side, e))?;
    let meta = serde_json::from_str(&meta_text)?;
    DatasetContainer::new(n_c, n_t, samples, meta)
}

fn read_flat_vectors(src: &Path, len: usize) -> Result<Vec<f32>> {
    let is_csv = src.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(src)?;
        let mut out = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != len {
                return Err(Error::DimMismatch(format!(
                    "row {row} of {} has {} values, expected {len}",
                    src.display(),
                    rec.len()
                )));
            }
            for field in rec.iter() {
                let v: f32 = field
                    .parse()
                    .map_err(|_| Error::Validation(format!("row {row}: cannot parse {field:?}")))?;
                out.push(v);
            }
        }
        Ok(out)
    } else {
        let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
        if bytes.len() % (4 * len) != 0 {
            return Err(Error::DimMismatch(format!(
                "{} bytes is not a whole number of {len}-value f32 vectors",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Import flattened 2048-value vectors (CSV rows or raw little-endian f32)
/// laid out as in the public COST2100 distribution.
pub fn import_cost2100(src: &Path, split: &str, scenario: Scenario) -> Result<DatasetContainer> {
    let len = 2 * COST2100_GRID * COST2100_GRID;
    let values = read_flat_vectors(src, len)?;
    let (lo, hi) = IMPORT_RANGE;
    let bad: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !(**v >= lo && **v <= hi))
        .map(|(i, _)| i)
        .collect();
    if let Some(&first) = bad.first() {
        return Err(Error::Validation(format!(
            "{} values outside [{lo}, {hi}]; first at sample {} index {}: {}",
            bad.len(),
            first / len,
            first % len,
            values[first]
        )));
    }
    let meta = DatasetMeta {
        normalization: Normalization::cost2100(),
        scenario,
        source: src.display().to_string(),
        seed: None,
        split: Some(split.to_string()),
    };
    DatasetContainer::new(COST2100_GRID, COST2100_GRID, values, meta)
}

/// Write the flattened vectors back out in the import layout (format chosen
/// by extension as for [`import_cost2100`]).
pub fn export_cost2100(c: &DatasetContainer, dst: &Path) -> Result<()> {
    let is_csv = dst.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dst)?;
        for i in 0..c.len() {
            w.write_record(c.sample(i).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dst, e))?;
        Ok(())
    } else {
        let bytes: Vec<u8> = c.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dst, bytes).map_err(|e| Error::io(dst, e))
    }
}

/// One propagation path: complex gain, delay in samples, angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSpec {
    pub gain: Complex64,
    pub delay: f64,
    pub angle: f64,
}

/// `H̃(n, t) = Σ_p a_p · exp(−j2πnτ_p/Ñ_c) · exp(−jπ t sinθ_p)`.
pub fn multipath_channel(paths: &[PathSpec], subcarriers: usize, antennas: usize) -> FreqChannel {
    let mut h = FreqChannel::zeros(subcarriers, antennas);
    for p in paths {
        for n in 0..subcarriers {
            let delay = Complex64::from_polar(1.0, -2.0 * PI * n as f64 * p.delay / subcarriers as f64);
            for t in 0..antennas {
                let steer = Complex64::from_polar(1.0, -PI * t as f64 * p.angle.sin());
                h.data[n * antennas + t] += p.gain * delay * steer;
            }
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    /// Paths per channel, at least one.
    pub paths: usize,
    /// Full sub-carrier count before truncation.
    pub subcarriers: usize,
    /// Delay rows kept after truncation.
    pub n_c: usize,
    pub n_t: usize,
    /// Delays are drawn as integers in `[0, max_delay]`; must be `< n_c`.
    pub max_delay: usize,
    /// Power-delay profile decay constant, in samples.
    pub decay: f64,
    /// Angles uniform in `[-angle_spread, angle_spread]` degrees.
    pub angle_spread_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 1000,
            paths: 4,
            subcarriers: 128,
            n_c: 32,
            n_t: 32,
            max_delay: 15,
            decay: 4.0,
            angle_spread_deg: 60.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("at least one path required".into()));
        }
        if self.n_c == 0 || self.n_t == 0 || self.n_c > self.subcarriers {
            return Err(Error::Config(format!(
                "need 0 < N_c = {} <= sub-carriers = {} and N_t > 0",
                self.n_c, self.subcarriers
            )));
        }
        if self.max_delay >= self.n_c {
            return Err(Error::Config(format!(
                "max delay {} must be below N_c = {}",
                self.max_delay, self.n_c
            )));
        }
        if !(self.decay > 0.0) || !(0.0..=90.0).contains(&self.angle_spread_deg) {
            return Err(Error::Config("decay must be positive and angle spread within 0..=90 degrees".into()));
        }
        Ok(())
    }

    fn draw_paths(&self, rng: &mut impl Rng) -> Vec<PathSpec> {
        let spread = self.angle_spread_deg.to_radians();
        (0..self.paths)
            .map(|_| {
                let delay = rng.random_range(0..=self.max_delay) as f64;
                let power = (-delay / self.decay).exp() / self.paths as f64;
                let (re, im): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                let scale = (power / 2.0).sqrt();
                // a tiny jitter on the spread keeps angles off a lattice
                let jitter: f64 = Exp1.sample(rng);
                let angle = if spread > 0.0 {
                    rng.random_range(-spread..=spread) * (1.0 - 1e-9 * jitter.min(1.0))
                } else {
                    0.0
                };
                PathSpec {
                    gain: Complex64::new(re * scale, im * scale),
                    delay,
                    angle,
                }
            })
            .collect()
    }
}

/// Synthetic dataset plus the frequency-domain channels it was derived from.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub container: DatasetContainer,
    pub truth: Vec<FreqChannel>,
}

/// Draw channels, transform and truncate them, then normalize with a range
/// symmetric about zero recorded in the metadata.
pub fn synth_channels(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = Vec::with_capacity(config.samples);
    let mut planes = Vec::with_capacity(config.samples * 2 * config.n_c * config.n_t);
    for _ in 0..config.samples {
        let paths = config.draw_paths(&mut rng);
        let h = multipath_channel(&paths, config.subcarriers, config.n_t);
        planes.extend_from_slice(to_angular_delay(&h, config.n_c)?.planes.data());
        truth.push(h);
    }
    let normalization = if planes.is_empty() {
        Normalization { min: -1.0, max: 1.0 }
    } else {
        Normalization::symmetric(planes.iter().copied())?
    };
    let samples = planes
        .iter()
        .map(|&v| (normalization.normalize(v) as f32).clamp(0.0, 1.0))
        .collect();
    let meta = DatasetMeta {
        normalization,
        scenario: Scenario::Synthetic,
        source: "synthetic multipath".into(),
        seed: Some(config.seed),
        split: None,
    };
    Ok(SynthOutput {
        container: DatasetContainer::new(config.n_c, config.n_t, samples, meta)?,
        truth,
    })
}

/// Seeded disjoint partition of `0..n` into groups of the given sizes.
pub fn split_indices(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > n {
        return Err(Error::Config(format!("split sizes {sizes:?} exceed {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(idx[at..at + s].to_vec());
        at += s;
    }
    Ok(out)
}
