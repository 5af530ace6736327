use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ComplexTf, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub win_len: usize,
    pub hop: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { win_len: 128, hop: 64 }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided STFT: `win_len / 2 + 1` bins by `(len - win_len) / hop + 1` frames,
/// column `t` transforms the windowed slice starting at `t * hop`.
pub fn stft(samples: &[f64], rate: u32, params: &StftParams) -> Result<ComplexTf> {
    let StftParams { win_len, hop } = *params;
    if win_len == 0 || hop == 0 || hop > win_len {
        return Err(Error::Config(format!("invalid STFT window {win_len} / hop {hop}")));
    }
    if samples.len() < win_len {
        return Err(Error::ShortFrame {
            len: samples.len(),
            window: win_len,
        });
    }
    let bins = win_len / 2 + 1;
    let frames = (samples.len() - win_len) / hop + 1;
    let window = hann(win_len);
    let fft = FftPlanner::new().plan_fft_forward(win_len);

    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); win_len];
    for t in 0..frames {
        let slice = &samples[t * hop..t * hop + win_len];
        for (b, (&x, &w)) in buf.iter_mut().zip(slice.iter().zip(&window)) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    let row_axis = (0..bins).map(|k| k as f64 * rate as f64 / win_len as f64).collect();
    Ok(ComplexTf {
        values: Matrix::from_vec(bins, frames, data),
        row_axis,
    })
}
