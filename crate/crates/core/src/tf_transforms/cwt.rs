//! Continuous wavelet transform with the analytic generalized Morse wavelet.
//!
//! The mother wavelet is defined in frequency:
//! `Psi(w) = A w^beta exp(-w^gamma)` for `w > 0`, zero otherwise, with `A`
//! chosen so `integral |Psi|^2 dw = 2 pi`. Daughter wavelets use
//! `Psi(a w)` without an extra `sqrt(a)`, so a unit tone produces the same
//! ridge height at every scale.
//!
//! Scales are geometric with `voices_per_octave` steps. The smallest scale
//! puts the wavelet peak at Nyquist; the largest is the last one whose
//! `+-2 sigma_t` time support still fits inside the frame.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Matrix, TfMatrix};
use crate::error::{Error, Result};

/// Half-width of the time support in units of the wavelet's time spread.
pub const SUPPORT_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorseParams {
    /// Symmetry.
    pub gamma: f64,
    pub beta: f64,
    pub voices_per_octave: usize,
}

impl Default for MorseParams {
    fn default() -> Self {
        // Time-bandwidth product beta * gamma = 60.
        Self {
            gamma: 3.0,
            beta: 20.0,
            voices_per_octave: 10,
        }
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Frequency-domain Morse wavelet with unit-energy normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorseWavelet {
    pub beta: f64,
    pub gamma: f64,
    ln_amplitude: f64,
}

impl MorseWavelet {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !(beta > 0.0 && gamma > 0.0) {
            return Err(Error::Config(format!("Morse parameters must be positive, got beta {beta}, gamma {gamma}")));
        }
        // integral_0^inf w^(2 beta) exp(-2 w^gamma) dw
        //   = 2^(-(2 beta + 1) / gamma) Gamma((2 beta + 1) / gamma) / gamma
        let r = (2.0 * beta + 1.0) / gamma;
        let ln_integral = -r * 2f64.ln() + ln_gamma(r) - gamma.ln();
        let ln_amplitude = 0.5 * ((2.0 * std::f64::consts::PI).ln() - ln_integral);
        Ok(Self {
            beta,
            gamma,
            ln_amplitude,
        })
    }

    /// `Psi(w)`, with `w` in radians per sample.
    pub fn eval(&self, w: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        (self.ln_amplitude + self.beta * w.ln() - w.powf(self.gamma)).exp()
    }

    /// Peak radian frequency `(beta / gamma)^(1 / gamma)`.
    pub fn peak(&self) -> f64 {
        (self.beta / self.gamma).powf(1.0 / self.gamma)
    }

    /// Standard deviation of `|psi(t)|^2` at unit scale, in samples.
    pub fn time_spread(&self) -> f64 {
        // Var_t = integral |dPsi/dw|^2 / integral |Psi|^2 by Parseval.
        let upper = (40.0f64 + self.beta * self.peak().ln().abs()).powf(1.0 / self.gamma) + 2.0 * self.peak();
        let steps = 200_000;
        let h = upper / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 1..steps {
            let w = i as f64 * h;
            let p = self.eval(w);
            let dp = p * (self.beta / w - self.gamma * w.powf(self.gamma - 1.0));
            num += dp * dp;
            den += p * p;
        }
        (num / den).sqrt()
    }
}

/// Peak frequency in Hz of the daughter wavelet at `scale`.
pub fn morse_peak_frequency(wavelet: &MorseWavelet, scale: f64, rate: u32) -> f64 {
    wavelet.peak() / (2.0 * std::f64::consts::PI * scale) * rate as f64
}

/// Geometric scale grid for a signal of `len` samples, smallest scale first.
pub fn morse_scales(wavelet: &MorseWavelet, voices_per_octave: usize, len: usize) -> Vec<f64> {
    let min_scale = wavelet.peak() / std::f64::consts::PI;
    let max_scale = len as f64 / (2.0 * SUPPORT_SIGMAS * wavelet.time_spread());
    let mut scales = Vec::new();
    let mut j = 0;
    loop {
        let a = min_scale * 2f64.powf(j as f64 / voices_per_octave as f64);
        if a > max_scale {
            break;
        }
        scales.push(a);
        j += 1;
    }
    scales
}

/// `|Z(a, b)|^2`, one row per scale (smallest scale, highest frequency first)
/// and one column per sample.
pub fn cwt_scalogram(samples: &[f64], rate: u32, params: &MorseParams) -> Result<TfMatrix> {
    if params.voices_per_octave == 0 {
        return Err(Error::Config("voices_per_octave must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let wavelet = MorseWavelet::new(params.beta, params.gamma)?;
    let n = samples.len();
    let scales = morse_scales(&wavelet, params.voices_per_octave, n);
    let n_fft = n.next_power_of_two();

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(n_fft);
    let inverse = planner.plan_fft_inverse(n_fft);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n_fft];
    for (s, &x) in spectrum.iter_mut().zip(samples) {
        *s = Complex64::new(x, 0.0);
    }
    forward.process(&mut spectrum);

    let mut out = Vec::with_capacity(scales.len() * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); inverse.get_inplace_scratch_len()];
    for &a in &scales {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for k in 1..n_fft / 2 {
            let w = 2.0 * std::f64::consts::PI * k as f64 / n_fft as f64;
            buf[k] = spectrum[k] * wavelet.eval(a * w);
        }
        inverse.process_with_scratch(&mut buf, &mut scratch);
        let norm = 1.0 / n_fft as f64;
        out.extend(buf[..n].iter().map(|z| (z * norm).norm_sqr()));
    }
    let row_axis = scales.iter().map(|&a| morse_peak_frequency(&wavelet, a, rate)).collect();
    Ok(TfMatrix {
        values: Matrix::from_vec(scales.len(), n, out),
        row_axis,
    })
}
