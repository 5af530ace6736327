use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::stft::hann;
use super::{Matrix, TfMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqtParams {
    pub bins_per_octave: usize,
    pub f_min: f64,
    /// Upper edge; `None` means Nyquist.
    #[serde(default)]
    pub f_max: Option<f64>,
    /// Minimum atom length; atoms whose constant-Q length is shorter use this.
    pub win_len: usize,
    pub hop: usize,
}

impl Default for CqtParams {
    fn default() -> Self {
        Self {
            bins_per_octave: 12,
            f_min: 40.0,
            f_max: None,
            win_len: 128,
            hop: 64,
        }
    }
}

impl CqtParams {
    pub fn q_factor(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn center_frequencies(&self, rate: u32) -> Vec<f64> {
        let f_max = self.f_max.unwrap_or(rate as f64 / 2.0);
        let b = self.bins_per_octave as f64;
        let n_bins = (b * (f_max / self.f_min).log2()).floor() as usize + 1;
        (0..n_bins).map(|k| self.f_min * 2f64.powf(k as f64 / b)).collect()
    }

    /// Atom length of a bin centred at `freq`, before clipping to the frame.
    pub fn atom_len(&self, freq: f64, rate: u32) -> usize {
        ((self.q_factor() * rate as f64 / freq).ceil() as usize).max(self.win_len)
    }
}

/// Constant-Q magnitudes: one row per bin (lowest frequency first), one column
/// per hop. Column `j` is the inner product with atoms centred on sample
/// `j * hop`; samples outside the frame count as zero.
pub fn cqt(samples: &[f64], rate: u32, params: &CqtParams) -> Result<TfMatrix> {
    if params.bins_per_octave == 0 || params.hop == 0 || params.win_len == 0 {
        return Err(Error::Config("CQT bins_per_octave, hop and win_len must be positive".into()));
    }
    if !(params.f_min > 0.0) || params.f_max.is_some_and(|f| f < params.f_min) {
        return Err(Error::Config(format!("invalid CQT frequency range from {} Hz", params.f_min)));
    }
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let freqs = params.center_frequencies(rate);
    let len = samples.len() as isize;
    let cols = samples.len().div_ceil(params.hop);
    let mut out = vec![0.0; freqs.len() * cols];
    for (k, &f) in freqs.iter().enumerate() {
        let n = params.atom_len(f, rate).min(samples.len());
        let window = hann(n);
        let norm: f64 = window.iter().sum();
        let half = (n / 2) as isize;
        let w = 2.0 * std::f64::consts::PI * f / rate as f64;
        let atom: Vec<Complex64> = window
            .iter()
            .enumerate()
            .map(|(m, &h)| Complex64::from_polar(h / norm, -w * (m as isize - half) as f64))
            .collect();
        for j in 0..cols {
            let start = (j * params.hop) as isize - half;
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, a) in atom.iter().enumerate() {
                let idx = start + m as isize;
                if idx >= 0 && idx < len {
                    acc += a * samples[idx as usize];
                }
            }
            out[k * cols + j] = acc.norm();
        }
    }
    Ok(TfMatrix {
        values: Matrix::from_vec(freqs.len(), cols, out),
        row_axis: freqs,
    })
}
