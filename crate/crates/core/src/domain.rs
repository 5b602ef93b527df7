//! Channel-domain math: the angular-delay transform with truncation,
//! real/imaginary plane packing, compression-ratio arithmetic and
//! zero-forcing spectral efficiency.
//!
//! Both DFT matrices are unitary with kernel `exp(+j2πkn/N)/sqrt(N)`, so a
//! path with frequency response `exp(−j2πnτ/Ñ_c)` lands in delay row `τ`.
//! The angular-delay channel is `F_d · H̃ · F_aᴴ`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact `γ = M / (2·N_c·N_t)` in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub num: u64,
    pub den: u64,
}

impl CompressionRatio {
    pub fn new(codeword: u64, n_c: u64, n_t: u64) -> Self {
        Self::reduced(codeword, 2 * n_c * n_t)
    }

    fn reduced(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        CompressionRatio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Codeword length `M` for `γ = num/den`; must come out a positive
    /// integer no larger than `2·N_c·N_t`.
    pub fn codeword_for(num: u64, den: u64, n_c: usize, n_t: usize) -> Result<usize> {
        let total = 2 * (n_c * n_t) as u64;
        if den == 0 || num == 0 || num > den {
            return Err(Error::Config(format!("compression ratio {num}/{den} must lie in (0, 1]")));
        }
        if (num * total) % den != 0 {
            return Err(Error::Config(format!(
                "compression ratio {num}/{den} does not give an integer codeword for 2·{n_c}·{n_t}"
            )));
        }
        Ok((num * total / den) as usize)
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for CompressionRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse compression ratio {s:?}; expected e.g. 1/16"));
        let (n, d) = s.trim().split_once('/').ok_or_else(bad)?;
        let num: u64 = n.trim().parse().map_err(|_| bad())?;
        let den: u64 = d.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Self::reduced(num, den))
    }
}

/// `γ = M / (2·N_c·N_t)`.
pub fn compression_ratio(codeword: usize, n_c: usize, n_t: usize) -> CompressionRatio {
    CompressionRatio::new(codeword as u64, n_c as u64, n_t as u64)
}

/// Complex frequency-domain channel, `Ñ_c × N_t` row-major (sub-carriers ×
/// antennas).
#[derive(Clone, Debug, PartialEq)]
pub struct FreqChannel {
    pub subcarriers: usize,
    pub antennas: usize,
    pub data: Vec<Complex64>,
}

impl FreqChannel {
    pub fn new(subcarriers: usize, antennas: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != subcarriers * antennas || subcarriers == 0 || antennas == 0 {
            return Err(Error::DimMismatch(format!(
                "{} values for a {subcarriers}×{antennas} channel",
                data.len()
            )));
        }
        Ok(FreqChannel {
            subcarriers,
            antennas,
            data,
        })
    }

    pub fn zeros(subcarriers: usize, antennas: usize) -> Self {
        FreqChannel {
            subcarriers,
            antennas,
            data: vec![Complex64::new(0.0, 0.0); subcarriers * antennas],
        }
    }

    pub fn at(&self, n: usize, t: usize) -> Complex64 {
        self.data[n * self.antennas + t]
    }

    pub fn row(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.antennas..(n + 1) * self.antennas]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        FreqChannel {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// Truncated angular-delay channel as two real planes `[2, N_c, N_t]`
/// (plane 0 real, plane 1 imaginary).
#[derive(Clone, Debug, PartialEq)]
pub struct AngularDelayChannel {
    pub planes: Tensor<f64>,
}

impl AngularDelayChannel {
    pub fn from_planes(planes: Tensor<f64>) -> Result<Self> {
        if planes.rank() != 3 || planes.shape()[0] != 2 {
            return Err(Error::DimMismatch(format!(
                "angular-delay planes must be [2, N_c, N_t], got {:?}",
                planes.shape()
            )));
        }
        Ok(AngularDelayChannel { planes })
    }

    pub fn from_complex(rows: usize, cols: usize, values: &[Complex64]) -> Self {
        let mut data = Vec::with_capacity(2 * rows * cols);
        data.extend(values.iter().map(|c| c.re));
        data.extend(values.iter().map(|c| c.im));
        AngularDelayChannel {
            planes: Tensor::new([2, rows, cols], data).expect("consistent dims"),
        }
    }

    pub fn rows(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        let n = self.rows() * self.cols();
        let d = self.planes.data();
        (0..n).map(|i| Complex64::new(d[i], d[n + i])).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.planes.cast()
    }
}

/// In-place unitary transform of every column (`axis = 0`) or row
/// (`axis = 1`) of a row-major complex matrix.
fn unitary_dft(data: &mut [Complex64], rows: usize, cols: usize, axis: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let (len, count) = if axis == 0 { (rows, cols) } else { (cols, rows) };
    let fft = planner.plan_fft(len, direction);
    let scale = 1.0 / (len as f64).sqrt();
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for line in 0..count {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if axis == 0 { data[i * cols + line] } else { data[line * cols + i] };
        }
        fft.process(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            let dst = if axis == 0 { i * cols + line } else { line * cols + i };
            data[dst] = b * scale;
        }
    }
}

/// Full (untruncated) `F_d · H̃ · F_aᴴ`, `Ñ_c × N_t`.
pub fn angular_delay_full(h: &FreqChannel) -> Vec<Complex64> {
    let mut data = h.data.clone();
    // F_d has kernel exp(+j..): rustfft's inverse direction.
    unitary_dft(&mut data, h.subcarriers, h.antennas, 0, FftDirection::Inverse);
    // right-multiplying by F_aᴴ applies exp(-j..) along each row.
    unitary_dft(&mut data, h.subcarriers, h.antennas, 1, FftDirection::Forward);
    data
}

/// Transform to the angular-delay domain and keep the first `n_c` delay rows.
pub fn to_angular_delay(h: &FreqChannel, n_c: usize) -> Result<AngularDelayChannel> {
    if n_c == 0 || n_c > h.subcarriers {
        return Err(Error::Config(format!(
            "N_c = {n_c} must lie in 1..={} (sub-carrier count)",
            h.subcarriers
        )));
    }
    let full = angular_delay_full(h);
    Ok(AngularDelayChannel::from_complex(n_c, h.antennas, &full[..n_c * h.antennas]))
}

/// Zero-pad the delay rows to `subcarriers` and invert both transforms.
pub fn from_angular_delay(h: &AngularDelayChannel, subcarriers: usize) -> Result<FreqChannel> {
    let (rows, cols) = (h.rows(), h.cols());
    if subcarriers < rows {
        return Err(Error::DimMismatch(format!(
            "cannot expand {rows} delay rows into {subcarriers} sub-carriers"
        )));
    }
    let mut data = h.to_complex();
    data.resize(subcarriers * cols, Complex64::new(0.0, 0.0));
    unitary_dft(&mut data, subcarriers, cols, 0, FftDirection::Forward);
    unitary_dft(&mut data, subcarriers, cols, 1, FftDirection::Inverse);
    FreqChannel::new(subcarriers, cols, data)
}

/// Multi-user downlink scenario for ZF evaluation: per user, the true and
/// estimated frequency channels (same dimensions for every user).
#[derive(Clone, Debug)]
pub struct PrecodingScenario {
    pub truth: Vec<FreqChannel>,
    pub estimate: Vec<FreqChannel>,
    pub snr_db: Vec<f64>,
}

impl PrecodingScenario {
    pub fn users(&self) -> usize {
        self.truth.len()
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .truth
            .first()
            .ok_or_else(|| Error::Config("scenario has no users".into()))?;
        let (n, t) = (first.subcarriers, first.antennas);
        if self.estimate.len() != self.truth.len() {
            return Err(Error::DimMismatch("one estimate per user required".into()));
        }
        if self.truth.len() > t {
            return Err(Error::Config(format!(
                "{} users exceed {t} transmit antennas",
                self.truth.len()
            )));
        }
        for ch in self.truth.iter().chain(&self.estimate) {
            if ch.subcarriers != n || ch.antennas != t {
                return Err(Error::DimMismatch("user channels must share dimensions".into()));
            }
        }
        Ok((n, t))
    }
}

/// Per-SNR spectral efficiency of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SeCurve {
    pub snr_db: Vec<f64>,
    pub se_bits_per_hz: Vec<f64>,
    /// Sub-carriers whose estimated channel was rank-deficient and fell back
    /// to the SVD pseudo-inverse.
    pub singular_subcarriers: usize,
}

/// Stack user rows of sub-carrier `n` into a `K × N_t` matrix.
pub fn user_matrix(channels: &[FreqChannel], n: usize) -> DMatrix<Complex64> {
    let k = channels.len();
    let t = channels[0].antennas;
    DMatrix::from_fn(k, t, |r, c| channels[r].at(n, c))
}

/// ZF precoder `Ĥᴴ(ĤĤᴴ)⁻¹` with unit-norm columns scaled to share total
/// power 1 equally. Returns the precoder and whether the pseudo-inverse
/// fallback was needed.
pub fn zf_precoder(estimate: &DMatrix<Complex64>) -> (DMatrix<Complex64>, bool) {
    let k = estimate.nrows();
    let hh = estimate.adjoint();
    let gram = estimate * &hh;
    let svals = estimate.clone().svd(false, false).singular_values;
    let smax = svals.iter().cloned().fold(0.0, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    let singular = !(smax > 0.0) || smin <= 1e-10 * smax;
    let mut v = match (singular, gram.try_inverse()) {
        (false, Some(inv)) => hh * inv,
        _ => estimate
            .clone()
            .pseudo_inverse(1e-10 * smax.max(f64::MIN_POSITIVE))
            .unwrap_or_else(|_| DMatrix::zeros(estimate.ncols(), k)),
    };
    let share = (1.0 / k as f64).sqrt();
    for mut col in v.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= Complex64::new(norm / share, 0.0);
        }
    }
    (v, singular)
}

/// `|g_k · v_j|²` for every user pair: entry `(k, j)`.
pub fn gain_matrix(truth: &DMatrix<Complex64>, precoder: &DMatrix<Complex64>) -> DMatrix<f64> {
    (truth * precoder).map(|c| c.norm_sqr())
}

/// ZF spectral efficiency, averaged over sub-carriers and summed over
/// users, with SINR measured against the true channels.
pub fn zf_spectral_efficiency(scenario: &PrecodingScenario) -> Result<SeCurve> {
    let (subcarriers, _) = scenario.validate()?;
    let k = scenario.users();
    let mut se = vec![0.0; scenario.snr_db.len()];
    let mut singular_subcarriers = 0;
    for n in 0..subcarriers {
        let est = user_matrix(&scenario.estimate, n);
        let truth = user_matrix(&scenario.truth, n);
        let (v, singular) = zf_precoder(&est);
        singular_subcarriers += singular as usize;
        let gains = gain_matrix(&truth, &v);
        for (slot, &snr) in se.iter_mut().zip(&scenario.snr_db) {
            let noise = 10f64.powf(-snr / 10.0);
            for u in 0..k {
                let interference: f64 = (0..k).filter(|&j| j != u).map(|j| gains[(u, j)]).sum();
                let sinr = gains[(u, u)] / (interference + noise);
                *slot += (1.0 + sinr).log2();
            }
        }
    }
    se.iter_mut().for_each(|v| *v /= subcarriers as f64);
    Ok(SeCurve {
        snr_db: scenario.snr_db.clone(),
        se_bits_per_hz: se,
        singular_subcarriers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(compression_ratio(512, 32, 32).to_string(), "1/4");
        assert_eq!(compression_ratio(32, 32, 32).to_string(), "1/64");
        assert_eq!(compression_ratio(2048, 32, 32).to_string(), "1/1");
        assert_eq!("1/16".parse::<CompressionRatio>().unwrap(), compression_ratio(128, 32, 32));
        assert!("0.25".parse::<CompressionRatio>().is_err());
        assert!("1/0".parse::<CompressionRatio>().is_err());
        assert!(CompressionRatio::codeword_for(1, 3, 32, 32).is_err());
    }

    #[test]
    fn truncation_bounds() {
        let h = FreqChannel::zeros(8, 4);
        assert!(to_angular_delay(&h, 9).is_err());
        assert!(to_angular_delay(&h, 0).is_err());
        let ad = to_angular_delay(&h, 8).unwrap();
        assert!(from_angular_delay(&ad, 4).is_err());
        let back = from_angular_delay(&ad, 8).unwrap();
        assert!(back.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn single_user_closed_form() {
        let mut h = FreqChannel::zeros(1, 4);
        h.data[2] = Complex64::new(0.6, 0.8);
        let s = PrecodingScenario {
            truth: vec![h.clone()],
            estimate: vec![h],
            snr_db: vec![10.0],
        };
        let curve = zf_spectral_efficiency(&s).unwrap();
        assert!((curve.se_bits_per_hz[0] - 11f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        let mut h = FreqChannel::zeros(1, 4);
        h.data[0] = Complex64::new(1.0, 0.0);
        let s = PrecodingScenario {
            truth: vec![h.clone(), h.clone()],
            estimate: vec![h.clone(), h],
            snr_db: vec![0.0],
        };
        let curve = zf_spectral_efficiency(&s).unwrap();
        assert_eq!(curve.singular_subcarriers, 1);
        assert!(curve.se_bits_per_hz[0].is_finite());
    }
}
