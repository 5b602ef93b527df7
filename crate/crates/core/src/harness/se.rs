//! Spectral efficiency of ZF precoding driven by fed-back channels.

use serde::{Deserialize, Serialize};

use crate::data::{split_indices, DatasetContainer};
use crate::domain::{from_angular_delay, zf_spectral_efficiency, AngularDelayChannel, FreqChannel, PrecodingScenario};
use crate::error::{Error, Result};
use crate::model::StnetParams;
use crate::tensor::Tensor;

/// One row of the SE-vs-SNR table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeRecord {
    pub snr_db: f64,
    pub se_bits_per_hz: f64,
    pub method: String,
    pub gamma: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeConfig {
    pub users: usize,
    pub snr_db: Vec<f64>,
    /// Sub-carriers the truncated channels are expanded back to.
    pub subcarriers: usize,
    /// Seed for picking which samples act as users.
    pub seed: u64,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            users: 4,
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            subcarriers: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeOutcome {
    pub records: Vec<SeRecord>,
    /// Sub-carriers that needed the pseudo-inverse fallback, per method.
    pub singular_subcarriers: Vec<(String, usize)>,
}

fn expand(ch: &AngularDelayChannel, subcarriers: usize) -> Result<FreqChannel> {
    from_angular_delay(ch, subcarriers)
}

/// Users are distinct dataset samples. Each user's true channel is scaled
/// to unit average per-sub-carrier power and the same factor is applied to
/// its estimate. Always reports perfect CSI; adds the model's
/// reconstructions when `params` is given.
pub fn se_curve(params: Option<&StnetParams<f32>>, data: &DatasetContainer, config: &SeConfig) -> Result<SeOutcome> {
    if config.users == 0 || config.users > data.len() {
        return Err(Error::Config(format!(
            "{} users requested from {} samples",
            config.users,
            data.len()
        )));
    }
    if config.users > data.n_t {
        return Err(Error::Config(format!("{} users exceed {} antennas", config.users, data.n_t)));
    }
    let picked = split_indices(data.len(), &[config.users], config.seed)?.remove(0);
    let mut truth = Vec::with_capacity(picked.len());
    let mut scales = Vec::with_capacity(picked.len());
    for &i in &picked {
        let h = expand(&data.channel(i), config.subcarriers)?;
        let power = h.frobenius_sq() / config.subcarriers as f64;
        if !(power > 0.0) {
            return Err(Error::Numerical(format!("sample {i} has zero power")));
        }
        let s = 1.0 / power.sqrt();
        truth.push(h.scaled(s));
        scales.push(s);
    }
    let gamma = params.map_or_else(|| "-".to_string(), |p| p.config.gamma().to_string());
    let mut methods = vec![("perfect".to_string(), truth.clone())];
    if let Some(p) = params {
        let batch = data.batch(&picked)?;
        let recon = p.reconstruct(&batch)?;
        let norm = data.meta.normalization;
        let per = data.sample_len();
        let mut est = Vec::with_capacity(picked.len());
        for (k, r) in recon.data().chunks(per).enumerate() {
            let planes = Tensor::new(
                [2, data.n_c, data.n_t],
                r.iter().map(|&v| norm.denormalize(v as f64)).collect(),
            )?;
            let ad = AngularDelayChannel::from_planes(planes)?;
            est.push(expand(&ad, config.subcarriers)?.scaled(scales[k]));
        }
        methods.push(("stnet".to_string(), est));
    }
    let mut records = Vec::new();
    let mut singular_subcarriers = Vec::new();
    for (method, estimate) in methods {
        let curve = zf_spectral_efficiency(&PrecodingScenario {
            truth: truth.clone(),
            estimate,
            snr_db: config.snr_db.clone(),
        })?;
        for (&snr, &se) in curve.snr_db.iter().zip(&curve.se_bits_per_hz) {
            records.push(SeRecord {
                snr_db: snr,
                se_bits_per_hz: se,
                method: method.clone(),
                gamma: gamma.clone(),
            });
        }
        singular_subcarriers.push((method, curve.singular_subcarriers));
    }
    Ok(SeOutcome {
        records,
        singular_subcarriers,
    })
}
