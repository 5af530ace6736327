use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Matrix, TfMatrix};
use crate::error::{Error, Result};

/// Filter energies are floored here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccParams {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    /// Zero-padded transform length of each windowed slice.
    pub n_fft: usize,
}

impl Default for MfccParams {
    fn default() -> Self {
        Self {
            win_ms: 30.0,
            hop_ms: 10.0,
            n_mels: 26,
            n_coeffs: 13,
            n_fft: 512,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centres uniform in mel between 0 Hz and Nyquist;
/// `result[m][k]` weights FFT bin `k`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: u32) -> Vec<Vec<f64>> {
    let nyquist = rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * rate as f64 / n_fft as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `keep` coefficients.
fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Cepstral coefficients: `n_coeffs` rows by one column per hop.
pub fn mfcc(samples: &[f64], rate: u32, params: &MfccParams) -> Result<TfMatrix> {
    if params.n_coeffs > params.n_mels || params.n_mels == 0 {
        return Err(Error::Config(format!(
            "need 0 < n_coeffs <= n_mels, got {} and {}",
            params.n_coeffs, params.n_mels
        )));
    }
    let win = (params.win_ms * rate as f64 / 1000.0).round() as usize;
    let hop = (params.hop_ms * rate as f64 / 1000.0).round() as usize;
    if win == 0 || hop == 0 || params.n_fft < win {
        return Err(Error::Config(format!("invalid MFCC window {win} / hop {hop} / n_fft {}", params.n_fft)));
    }
    if samples.len() < win {
        return Err(Error::ShortFrame {
            len: samples.len(),
            window: win,
        });
    }
    let frames = (samples.len() - win) / hop + 1;
    let window: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect();
    let bank = mel_filterbank(params.n_mels, params.n_fft, rate);
    let fft = FftPlanner::new().plan_fft_forward(params.n_fft);

    let mut out = vec![0.0; params.n_coeffs * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); params.n_fft];
    for t in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for n in 0..win {
            buf[n] = Complex64::new(samples[t * hop + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..params.n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / params.n_fft as f64)
            .collect();
        let log_energy: Vec<f64> = bank
            .iter()
            .map(|f| f.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(LOG_FLOOR).ln())
            .collect();
        for (c, v) in dct2(&log_energy, params.n_coeffs).into_iter().enumerate() {
            out[c * frames + t] = v;
        }
    }
    Ok(TfMatrix {
        values: Matrix::from_vec(params.n_coeffs, frames, out),
        row_axis: (0..params.n_coeffs).map(|c| c as f64).collect(),
    })
}
