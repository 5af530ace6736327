//! Butterworth band-pass filtering and fixed-length framing.
//!
//! Filters are designed as cascades of second-order sections through the
//! bilinear transform and applied forward-backward, so the output has zero
//! phase and the same length as the input.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{normalize, resample, Label, SignalClip};

/// Sample rate of every frame.
pub const FRAME_RATE: u32 = 2000;
/// 3.5 s at [`FRAME_RATE`].
pub const FRAME_LEN: usize = 7000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    ButterworthBandpass,
}

/// Band edges in Hz and the order of the low-pass prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    #[serde(default)]
    pub kind: FilterKind,
}

impl FilterSpec {
    pub fn pcg() -> Self {
        Self {
            low_hz: 50.0,
            high_hz: 800.0,
            order: 4,
            kind: FilterKind::ButterworthBandpass,
        }
    }

    pub fn lung() -> Self {
        Self {
            low_hz: 50.0,
            high_hz: 2500.0,
            order: 6,
            kind: FilterKind::ButterworthBandpass,
        }
    }

    pub fn validate(&self, rate: u32) -> Result<()> {
        let nyquist = rate as f64 / 2.0;
        if self.order == 0 {
            return Err(Error::FilterDesign("order must be positive".into()));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(Error::FilterDesign(format!(
                "band edges must satisfy 0 < low < high, got {}..{} Hz",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= nyquist {
            return Err(Error::FilterDesign(format!(
                "high edge {} Hz is not below the {} Hz Nyquist frequency",
                self.high_hz, nyquist
            )));
        }
        Ok(())
    }
}

/// Direct-form II transposed biquad, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b.iter().sum::<f64>()) / (self.a.iter().sum::<f64>())
    }

    fn run(&self, x: &mut [f64], mut z1: f64, mut z2: f64) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z1;
            z1 = b1 * input - a1 * y + z2;
            z2 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Digital Butterworth band-pass with `2 * order` poles.
    pub fn butterworth_bandpass(spec: &FilterSpec, rate: u32) -> Result<Self> {
        spec.validate(rate)?;
        let fs = rate as f64;
        let n = spec.order;
        let pi = std::f64::consts::PI;
        let w1 = 2.0 * fs * (pi * spec.low_hz / fs).tan();
        let w2 = 2.0 * fs * (pi * spec.high_hz / fs).tan();
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        let mut poles = Vec::with_capacity(2 * n);
        for k in 0..n {
            let theta = pi * (2 * k + n + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let half = p * (bw / 2.0);
            let d = (half * half - w0 * w0).sqrt();
            for s in [half + d, half - d] {
                poles.push((2.0 * fs + s) / (2.0 * fs - s));
            }
        }

        let tol = 1e-12;
        let mut sections = Vec::with_capacity(n);
        let mut reals: Vec<f64> = Vec::new();
        for z in &poles {
            if z.im > tol {
                sections.push(Biquad {
                    b: [1.0, 0.0, -1.0],
                    a: [1.0, -2.0 * z.re, z.norm_sqr()],
                });
            } else if z.im.abs() <= tol {
                reals.push(z.re);
            }
        }
        reals.sort_by(|a, b| a.total_cmp(b));
        for pair in reals.chunks(2) {
            let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -(r1 + r2), r1 * r2],
            });
        }
        if sections.len() != n {
            return Err(Error::FilterDesign(format!(
                "pole pairing produced {} sections for order {n}",
                sections.len()
            )));
        }

        // Unit gain at the (warped) geometric band centre.
        let center = Complex64::from_polar(1.0, 2.0 * (w0 / (2.0 * fs)).atan());
        let mag = sections.iter().fold(Complex64::new(1.0, 0.0), |h, s| h * s.response(center)).norm();
        let g = 1.0 / mag;
        for c in sections[0].b.iter_mut() {
            *c *= g;
        }
        Ok(Self { sections })
    }

    pub fn gain_at(&self, freq_hz: f64, rate: u32) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * freq_hz / rate as f64);
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |h, s| h * s.response(z)).norm()
    }

    /// Causal filtering with zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, 0.0, 0.0);
        }
        y
    }

    fn filter_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for s in &self.sections {
            // Per-section state for a constant input in steady state.
            let g = s.dc_gain();
            let z1 = g - s.b[0];
            let z2 = s.b[2] - s.a[2] * g;
            s.run(x, z1 * scale, z2 * scale);
            scale *= g;
        }
    }

    /// Zero-phase forward-backward filtering with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let len = x.len();
        if len == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(len - 1);
        let mut ext = Vec::with_capacity(len + 2 * pad);
        let (first, last) = (x[0], x[len - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[len - 1 - i]));

        self.filter_steady(&mut ext);
        ext.reverse();
        self.filter_steady(&mut ext);
        ext.reverse();
        ext[pad..pad + len].to_vec()
    }
}

/// Zero-phase Butterworth band-pass applied at the clip's own rate.
pub fn butterworth_bandpass(clip: &SignalClip, spec: &FilterSpec) -> Result<SignalClip> {
    let filter = SosFilter::butterworth_bandpass(spec, clip.rate)?;
    Ok(clip.with_samples(filter.filtfilt(&clip.samples), clip.rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Repeat the signal from its start until the frame is full.
    #[default]
    Cycle,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverflowMode {
    #[default]
    Truncate,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingOptions {
    #[serde(default)]
    pub pad: PadMode,
    #[serde(default)]
    pub overflow: OverflowMode,
}

impl Default for FramingOptions {
    fn default() -> Self {
        Self {
            pad: PadMode::Cycle,
            overflow: OverflowMode::Truncate,
        }
    }
}

/// A 7000-sample, 2 kHz, peak-normalized signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub samples: Vec<f64>,
    pub rate: u32,
    pub label: Label,
    pub origin: String,
}

impl Frame {
    /// Wraps already-framed samples, checking length and rate invariants.
    pub fn new(samples: Vec<f64>, label: Label, origin: impl Into<String>) -> Result<Self> {
        if samples.len() != FRAME_LEN {
            return Err(Error::Shape(format!(
                "frame must hold {FRAME_LEN} samples, got {}",
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            rate: FRAME_RATE,
            label,
            origin: origin.into(),
        })
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn to_clip(&self) -> SignalClip {
        SignalClip {
            samples: self.samples.clone(),
            rate: self.rate,
            label: self.label,
            source_id: self.origin.clone(),
        }
    }
}

/// Truncates or pads a 2 kHz clip to exactly [`FRAME_LEN`] samples.
pub fn frame_fixed(clip: &SignalClip, options: &FramingOptions) -> Result<Frame> {
    if clip.rate != FRAME_RATE {
        return Err(Error::Config(format!(
            "framing expects {FRAME_RATE} Hz input, got {} Hz",
            clip.rate
        )));
    }
    let x = &clip.samples;
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let samples = if x.len() >= FRAME_LEN {
        if x.len() > FRAME_LEN && options.overflow == OverflowMode::Error {
            return Err(Error::Config(format!(
                "signal of {} samples exceeds the {FRAME_LEN}-sample frame",
                x.len()
            )));
        }
        x[..FRAME_LEN].to_vec()
    } else {
        match options.pad {
            PadMode::Cycle => (0..FRAME_LEN).map(|k| x[k % x.len()]).collect(),
            PadMode::Zero => {
                let mut v = x.clone();
                v.resize(FRAME_LEN, 0.0);
                v
            }
        }
    };
    Frame::new(samples, clip.label, clip.source_id.clone())
}

/// Options for turning raw recordings into frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    #[serde(default = "FilterSpec::pcg")]
    pub pcg_filter: FilterSpec,
    #[serde(default = "FilterSpec::lung")]
    pub lung_filter: FilterSpec,
    /// Fraction of the native Nyquist used when the lung high edge does not fit.
    #[serde(default = "default_lung_clamp")]
    pub lung_nyquist_clamp: f64,
    #[serde(default)]
    pub framing: FramingOptions,
}

fn default_lung_clamp() -> f64 {
    0.95
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            pcg_filter: FilterSpec::pcg(),
            lung_filter: FilterSpec::lung(),
            lung_nyquist_clamp: default_lung_clamp(),
            framing: FramingOptions::default(),
        }
    }
}

fn finish(filtered: SignalClip, framing: &FramingOptions) -> Result<Frame> {
    let clip = normalize(&resample(&filtered, FRAME_RATE)?);
    frame_fixed(&clip, framing)
}

/// Heart sound: band-pass at native rate, resample, normalize, frame.
pub fn prepare_pcg(clip: &SignalClip, config: &PreprocessConfig) -> Result<Frame> {
    if clip.samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    finish(butterworth_bandpass(clip, &config.pcg_filter)?, &config.framing)
}

/// Lung band edge actually used at a given native rate.
pub fn lung_filter_for(rate: u32, config: &PreprocessConfig) -> FilterSpec {
    let nyquist = rate as f64 / 2.0;
    let mut spec = config.lung_filter;
    if spec.high_hz >= nyquist {
        spec.high_hz = config.lung_nyquist_clamp * nyquist;
    }
    spec
}

/// Lung sound: order-6 band-pass at native rate (before any rate reduction).
pub fn prepare_lung(clip: &SignalClip, config: &PreprocessConfig) -> Result<Frame> {
    if clip.samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let spec = lung_filter_for(clip.rate, config);
    finish(butterworth_bandpass(clip, &spec)?, &config.framing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn clip(samples: Vec<f64>, rate: u32) -> SignalClip {
        SignalClip::new(samples, rate, Label::N, "c").unwrap()
    }

    #[test]
    fn passband_gain_mid_band() {
        let x = sine(400.0, 2000, 8000);
        let y = butterworth_bandpass(&clip(x.clone(), 2000), &FilterSpec::pcg()).unwrap();
        assert_eq!(y.samples.len(), x.len());
        let ratio = rms(&y.samples[500..7500]) / rms(&x[500..7500]);
        assert!(ratio >= 0.95, "gain {ratio}");
    }

    #[test]
    fn stopband_attenuation_decade_below() {
        let x = sine(5.0, 2000, 8000);
        let y = butterworth_bandpass(&clip(x.clone(), 2000), &FilterSpec::pcg()).unwrap();
        let ratio = rms(&y.samples[1000..7000]) / rms(&x[1000..7000]);
        let db = 20.0 * ratio.log10();
        assert!(db <= -20.0, "attenuation {db} dB");
    }

    #[test]
    fn designed_response_is_butterworth() {
        let spec = FilterSpec::pcg();
        let f = SosFilter::butterworth_bandpass(&spec, 2000).unwrap();
        assert_eq!(f.sections.len(), 4);
        // -3 dB at both band edges.
        for edge in [50.0, 800.0] {
            let g = f.gain_at(edge, 2000);
            assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "{edge}: {g}");
        }
        assert!(f.gain_at(0.0, 2000) < 1e-12);
    }

    #[test]
    fn lung_filter_requires_native_rate() {
        let spec = FilterSpec::lung();
        let f = SosFilter::butterworth_bandpass(&spec, 14000).unwrap();
        assert_eq!(f.sections.len(), 6);
        assert!(matches!(
            SosFilter::butterworth_bandpass(&spec, 2000),
            Err(Error::FilterDesign(_))
        ));
    }

    #[test]
    fn invalid_specs() {
        let mut s = FilterSpec::pcg();
        s.low_hz = 900.0;
        assert!(s.validate(2000).is_err());
        s = FilterSpec::pcg();
        s.order = 0;
        assert!(s.validate(2000).is_err());
    }

    #[test]
    fn zero_phase_has_no_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Band-limit the probe first so it lies inside the pass band.
        let probe = SosFilter::butterworth_bandpass(&FilterSpec::pcg(), 2000).unwrap().filtfilt(&noise);
        let out = butterworth_bandpass(&clip(probe.clone(), 2000), &FilterSpec::pcg()).unwrap().samples;
        let xcorr = |lag: i64| -> f64 {
            (0..probe.len() as i64)
                .filter_map(|i| {
                    let j = i + lag;
                    (j >= 0 && j < out.len() as i64).then(|| probe[i as usize] * out[j as usize])
                })
                .sum()
        };
        let peak = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert_eq!(peak, 0);
    }

    #[test]
    fn filtering_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -2.3);
        let f = SosFilter::butterworth_bandpass(&FilterSpec::lung(), 44100).unwrap();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = f.filtfilt(&combo);
        let (fx, fy) = (f.filtfilt(&x), f.filtfilt(&y));
        let scale = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..lhs.len() {
            let rhs = a * fx[i] + b * fy[i];
            assert!((lhs[i] - rhs).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn framing_rules() {
        let opts = FramingOptions::default();
        let x: Vec<f64> = (0..7000).map(|i| (i as f64 * 0.001).sin() * 0.5).collect();
        assert_eq!(frame_fixed(&clip(x.clone(), 2000), &opts).unwrap().samples, x);

        let half: Vec<f64> = x[..3500].to_vec();
        let f = frame_fixed(&clip(half.clone(), 2000), &opts).unwrap();
        assert_eq!(&f.samples[..3500], &half[..]);
        assert_eq!(&f.samples[3500..], &half[..]);

        let long: Vec<f64> = (0..10000).map(|i| i as f64 / 10000.0).collect();
        assert_eq!(frame_fixed(&clip(long.clone(), 2000), &opts).unwrap().samples, long[..7000].to_vec());
        let strict = FramingOptions {
            overflow: OverflowMode::Error,
            ..opts
        };
        assert!(frame_fixed(&clip(long, 2000), &strict).is_err());

        let zero_pad = FramingOptions {
            pad: PadMode::Zero,
            ..opts
        };
        let z = frame_fixed(&clip(vec![0.5; 10], 2000), &zero_pad).unwrap();
        assert!(z.samples[10..].iter().all(|&v| v == 0.0));

        assert!(matches!(frame_fixed(&clip(vec![], 2000), &opts), Err(Error::EmptySignal)));
        assert!(frame_fixed(&clip(vec![0.1; 10], 4000), &opts).is_err());
    }

    #[test]
    fn prepare_pcg_lengths() {
        let cfg = PreprocessConfig::default();
        let rate = 8000;
        let f = prepare_pcg(&clip(sine(120.0, rate, 28000), rate), &cfg).unwrap();
        assert_eq!((f.samples.len(), f.rate), (7000, 2000));
        assert!((f.peak() - 1.0).abs() < 1e-12);

        // 2 s recording: cyclic padding with period 4000.
        let f = prepare_pcg(&clip(sine(120.0, rate, 16000), rate), &cfg).unwrap();
        for k in 4000..7000 {
            assert_eq!(f.samples[k], f.samples[k % 4000]);
        }

        // 5 s recording: the first 7000 output samples of the prepared clip.
        let x = sine(120.0, rate, 40000);
        let f = prepare_pcg(&clip(x.clone(), rate), &cfg).unwrap();
        let full = normalize(&resample(&butterworth_bandpass(&clip(x, rate), &cfg.pcg_filter).unwrap(), 2000).unwrap());
        assert_eq!(full.samples.len(), 10000);
        assert_eq!(f.samples, full.samples[..7000].to_vec());
    }

    #[test]
    fn prepare_lung_rates() {
        let cfg = PreprocessConfig::default();
        let f = prepare_lung(&clip(sine(300.0, 44100, 44100 * 4), 44100), &cfg).unwrap();
        assert_eq!((f.samples.len(), f.rate), (7000, 2000));

        let spec = lung_filter_for(4000, &cfg);
        assert!((spec.high_hz - 1900.0).abs() < 1e-12);
        let f = prepare_lung(&clip(sine(300.0, 4000, 16000), 4000), &cfg).unwrap();
        assert_eq!(f.samples.len(), 7000);

        let f = prepare_lung(&clip(vec![0.0; 20000], 4000), &cfg).unwrap();
        assert!(f.samples.iter().all(|&v| v == 0.0));
    }
}
