//! SNR-controlled corruption of heart-sound frames, plus a synthetic corpus
//! generator used when no recordings are available.
//!
//! SNR is always `10 log10(sum s^2 / sum n^2)` over the full frame. Mixed
//! output is left unnormalized so the realized SNR survives downstream.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Frame, FRAME_LEN, FRAME_RATE};
use crate::rng::{derive_seed, rng_for};
use crate::signal_io::{Label, Manifest, ManifestEntry};

/// SNR levels of the noisy test conditions, in dB.
pub const DEFAULT_SNR_LEVELS: [f64; 4] = [0.0, 5.0, 10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Lung,
    Awgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl MixSpec {
    /// One spec per level, all sharing `seed` so every level reuses the same
    /// clean frames, pairings, and noise draws.
    pub fn levels(snrs: &[f64], noise_kind: NoiseKind, seed: u64) -> Vec<MixSpec> {
        snrs.iter()
            .map(|&snr_db| MixSpec {
                snr_db,
                noise_kind,
                seed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyFrame {
    pub samples: Vec<f64>,
    pub label: Label,
    /// Realized SNR in dB.
    pub snr_db: f64,
    pub clean_ref: String,
    /// Origin of the noise frame, or `"awgn"`.
    pub noise_ref: String,
    /// Scale applied to the noise before adding it.
    pub alpha: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(sum s^2 / sum n^2)`.
pub fn measure_snr(signal: &[f64], noise: &[f64]) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(Error::Shape(format!(
            "signal has {} samples, noise {}",
            signal.len(),
            noise.len()
        )));
    }
    let pn = energy(noise);
    if pn == 0.0 {
        return Err(Error::ZeroNoise);
    }
    Ok(10.0 * (energy(signal) / pn).log10())
}

/// Noise scale that puts `noise` at `target_db` below `signal`.
pub fn snr_scale(signal: &[f64], noise: &[f64], target_db: f64) -> Result<f64> {
    if !target_db.is_finite() {
        return Err(Error::Config(format!("SNR target {target_db} is not finite")));
    }
    if signal.len() != noise.len() {
        return Err(Error::Shape(format!(
            "signal has {} samples, noise {}",
            signal.len(),
            noise.len()
        )));
    }
    let pn = energy(noise);
    if pn == 0.0 {
        return Err(Error::ZeroNoise);
    }
    let ps = energy(signal);
    if ps == 0.0 {
        return Err(Error::ZeroSignal);
    }
    Ok((ps / pn * 10f64.powf(-target_db / 10.0)).sqrt())
}

fn mix_samples(signal: &Frame, noise: &[f64], noise_ref: String, target_db: f64) -> Result<NoisyFrame> {
    let alpha = snr_scale(&signal.samples, noise, target_db)?;
    let scaled: Vec<f64> = noise.iter().map(|n| alpha * n).collect();
    let snr_db = measure_snr(&signal.samples, &scaled)?;
    let samples = signal.samples.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok(NoisyFrame {
        samples,
        label: signal.label,
        snr_db,
        clean_ref: signal.origin.clone(),
        noise_ref,
        alpha,
    })
}

/// `signal + alpha * noise` with alpha chosen for the exact target SNR.
pub fn mix_at_snr(signal: &Frame, noise: &Frame, target_db: f64) -> Result<NoisyFrame> {
    mix_samples(signal, &noise.samples, noise.origin.clone(), target_db)
}

fn gaussian(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// White Gaussian noise scaled by its realized power, so the SNR is exact.
pub fn awgn_mix(signal: &Frame, target_db: f64, seed: u64) -> Result<NoisyFrame> {
    if energy(&signal.samples) == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let noise = gaussian(signal.samples.len(), seed);
    mix_samples(signal, &noise, "awgn".into(), target_db)
}

/// Pairing record for one mixed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub clean_ref: String,
    pub noise_ref: String,
    /// Index into the lung frame list, absent for AWGN.
    pub noise_index: Option<usize>,
    pub alpha: f64,
    pub realized_snr_db: f64,
}

/// All heart frames corrupted at one SNR level.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLevel {
    pub spec: MixSpec,
    pub frames: Vec<NoisyFrame>,
    pub records: Vec<MixRecord>,
}

/// Sidecar describing how a noisy level was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSidecar {
    pub seed: u64,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    /// Every level is built from the same clean frames.
    pub reuses_clean_frames: bool,
    pub pairs: Vec<MixRecord>,
}

impl NoisyLevel {
    pub fn sidecar(&self) -> MixSidecar {
        MixSidecar {
            seed: self.spec.seed,
            snr_db: self.spec.snr_db,
            noise_kind: self.spec.noise_kind,
            reuses_clean_frames: true,
            pairs: self.records.clone(),
        }
    }
}

/// Mixes one heart frame under `spec`; `index` selects its sub-seed.
pub fn mix_one(heart: &Frame, index: usize, lung: &[Frame], spec: &MixSpec) -> Result<(NoisyFrame, MixRecord)> {
    let sub = derive_seed(spec.seed, index as u64);
    let (noisy, noise_index) = match spec.noise_kind {
        NoiseKind::Lung => {
            if lung.is_empty() {
                return Err(Error::Config("lung noise requested but no lung frames given".into()));
            }
            let j = rng_for(sub).random_range(0..lung.len());
            (mix_at_snr(heart, &lung[j], spec.snr_db)?, Some(j))
        }
        NoiseKind::Awgn => (awgn_mix(heart, spec.snr_db, sub)?, None),
    };
    let record = MixRecord {
        clean_ref: noisy.clean_ref.clone(),
        noise_ref: noisy.noise_ref.clone(),
        noise_index,
        alpha: noisy.alpha,
        realized_snr_db: noisy.snr_db,
    };
    Ok((noisy, record))
}

/// Corrupts every heart frame at every level. Pairing is seeded with
/// replacement and depends only on the seed and the frame index.
pub fn build_noisy_corpus(heart: &[Frame], lung: &[Frame], specs: &[MixSpec]) -> Result<Vec<NoisyLevel>> {
    specs
        .iter()
        .map(|spec| {
            if spec.noise_kind == NoiseKind::Lung && lung.is_empty() {
                return Err(Error::Config("lung noise requested but the lung manifest is empty".into()));
            }
            let (frames, records) = heart
                .iter()
                .enumerate()
                .map(|(i, h)| mix_one(h, i, lung, spec))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok(NoisyLevel {
                spec: *spec,
                frames,
                records,
            })
        })
        .collect()
}

/// Noise whose spectrum is confined to `[lo, hi]` Hz with amplitude `|f|^-slope`.
fn shaped_noise(rng: &mut impl Rng, len: usize, rate: f64, lo: f64, hi: f64, slope: f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k) as f64;
        let f = bin * rate / len as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        } else if slope != 0.0 {
            *c *= f.powf(-slope);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re / len as f64).collect();
    let r = (energy(&out) / len as f64).sqrt();
    if r > 0.0 {
        out.iter().map(|v| v / r).collect()
    } else {
        out
    }
}

fn raised_gate(t: f64, start: f64, end: f64, ramp: f64) -> f64 {
    if t < start || t > end {
        return 0.0;
    }
    let edge = (t - start).min(end - t);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge / ramp).cos()
    }
}

/// Decaying 30 to 150 Hz chirp used for S1 and S2.
fn heart_sound(t: f64) -> f64 {
    const DURATION: f64 = 0.1;
    if !(0.0..DURATION).contains(&t) {
        return 0.0;
    }
    let (f0, f1) = (30.0, 150.0);
    let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * (f1 - f0) / DURATION * t * t);
    (-t / 0.025).exp() * phase.sin()
}

fn click(t: f64) -> f64 {
    if !(0.0..0.015).contains(&t) {
        return 0.0;
    }
    (-t / 0.004).exp() * (2.0 * std::f64::consts::PI * 300.0 * t).sin()
}

fn normalize_peak(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    x
}

/// One synthetic phonocardiogram frame of class `label`.
pub fn synth_heart_frame(label: Label, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed);
    let rate = FRAME_RATE as f64;
    let cycle = 0.8 + rng.random_range(-0.05..0.05);
    let systole = 0.35 * cycle;
    let offset = rng.random_range(0.0..cycle);
    let s1_amp = 1.0 + rng.random_range(-0.1..0.1);
    let s2_amp = 0.7 + rng.random_range(-0.1..0.1);
    let murmur_amp = 0.3 * (1.0 + rng.random_range(-0.2..0.2));

    let band = match label {
        Label::AS => Some((100.0, 400.0)),
        Label::MS => Some((40.0, 120.0)),
        Label::MR => Some((100.0, 300.0)),
        Label::MVP => Some((100.0, 400.0)),
        _ => None,
    };
    let murmur = band.map(|(lo, hi)| shaped_noise(&mut rng, FRAME_LEN, rate, lo, hi, 0.0));
    let background = shaped_noise(&mut rng, FRAME_LEN, rate, 20.0, 1000.0, 0.0);

    // Beat onsets covering the frame, with small per-beat jitter.
    let mut beats = Vec::new();
    let mut t0 = offset - cycle;
    while t0 < FRAME_LEN as f64 / rate {
        beats.push(t0 + rng.random_range(-0.01..0.01));
        t0 += cycle;
    }

    let mut x = vec![0.0; FRAME_LEN];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let mut acc = 0.005 * background[i];
        for &b in &beats {
            let s2 = b + systole;
            acc += s1_amp * heart_sound(t - b) + s2_amp * heart_sound(t - s2);
            let env = match label {
                // Crescendo-decrescendo between the heart sounds.
                Label::AS => {
                    let (start, end) = (b + 0.08, s2 - 0.03);
                    if t > start && t < end {
                        let mid = 0.5 * (start + end);
                        1.0 - ((t - mid) / (0.5 * (end - start))).abs()
                    } else {
                        0.0
                    }
                }
                Label::MS => raised_gate(t, s2 + 0.08, b + cycle - 0.02, 0.03),
                Label::MR => raised_gate(t, b + 0.03, s2, 0.01),
                Label::MVP => {
                    let c = b + 0.6 * systole;
                    acc += 0.6 * s1_amp * click(t - c);
                    raised_gate(t, c + 0.01, s2, 0.01)
                }
                _ => 0.0,
            };
            if let Some(m) = &murmur {
                acc += murmur_amp * env * m[i];
            }
        }
        *v = acc;
    }
    normalize_peak(x)
}

/// Pink noise band-limited to 50 to 1000 Hz, peak-normalized.
pub fn synth_lung_frame(seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed);
    normalize_peak(shaped_noise(&mut rng, FRAME_LEN, FRAME_RATE as f64, 50.0, 1000.0, 0.5))
}

/// Synthetic heart and lung frames plus their manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub heart: Vec<Frame>,
    pub heart_splits: Vec<String>,
    pub lung: Vec<Frame>,
}

pub const SYNTH_TEST_FRACTION: f64 = 0.2;

impl SynthCorpus {
    pub fn heart_path(frame: &Frame) -> PathBuf {
        PathBuf::from(format!("heart/{}.wav", frame.origin))
    }

    pub fn lung_path(frame: &Frame) -> PathBuf {
        PathBuf::from(format!("lung/{}.wav", frame.origin))
    }

    pub fn heart_manifest(&self, root: impl Into<PathBuf>) -> Result<Manifest> {
        let entries = self
            .heart
            .iter()
            .zip(&self.heart_splits)
            .map(|(f, split)| ManifestEntry {
                path: Self::heart_path(f),
                label: f.label,
                split: split.clone(),
            })
            .collect();
        Manifest::new(root, entries)
    }

    pub fn lung_manifest(&self, root: impl Into<PathBuf>) -> Result<Manifest> {
        let entries = self
            .lung
            .iter()
            .map(|f| ManifestEntry {
                path: Self::lung_path(f),
                label: Label::LUNG,
                split: "noise".into(),
            })
            .collect();
        Manifest::new(root, entries)
    }
}

/// `n_per_class` frames of each heart class and as many lung frames.
///
/// Within each class the last 20% of frames are tagged `test`; frames are
/// drawn independently, so the tail is an unbiased holdout.
pub fn synth_corpus(n_per_class: usize, seed: u64) -> Result<SynthCorpus> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let n_test = ((n_per_class as f64) * SYNTH_TEST_FRACTION).round() as usize;
    let mut heart = Vec::with_capacity(5 * n_per_class);
    let mut heart_splits = Vec::with_capacity(5 * n_per_class);
    for (c, &label) in Label::CLASSES.iter().enumerate() {
        for i in 0..n_per_class {
            let sub = derive_seed(seed, (c * 1_000_003 + i) as u64);
            let samples = synth_heart_frame(label, sub);
            heart.push(Frame::new(samples, label, format!("{label}_{i:04}"))?);
            heart_splits.push(if i >= n_per_class - n_test { "test" } else { "train" }.to_string());
        }
    }
    let lung_base = derive_seed(seed, u64::MAX);
    let lung = (0..n_per_class)
        .map(|i| Frame::new(synth_lung_frame(derive_seed(lung_base, i as u64)), Label::LUNG, format!("LUNG_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        heart,
        heart_splits,
        lung,
    })
}
