//! Audio clips, WAV I/O, corpus manifests, resampling, and peak normalization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor mapping PCM16 integers onto [-1, 1).
pub const PCM16_FULL_SCALE: f64 = 32768.0;

/// Kaiser window shape parameter of the resampling filter.
pub const RESAMPLE_KAISER_BETA: f64 = 8.6;
/// Filter taps per polyphase branch, counted at the lower of the two rates.
pub const RESAMPLE_TAPS_PER_PHASE: usize = 64;
/// Resampler cutoff as a fraction of the lower Nyquist frequency.
pub const RESAMPLE_ROLLOFF: f64 = 0.9;

/// Provenance label of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    N,
    AS,
    MS,
    MR,
    MVP,
    LUNG,
    NOISE,
}

impl Label {
    /// The five heart-sound classes in one-hot order.
    pub const CLASSES: [Label; 5] = [Label::N, Label::AS, Label::MS, Label::MR, Label::MVP];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::N => "N",
            Label::AS => "AS",
            Label::MS => "MS",
            Label::MR => "MR",
            Label::MVP => "MVP",
            Label::LUNG => "LUNG",
            Label::NOISE => "NOISE",
        }
    }

    /// One-hot index for heart classes, `None` for noise recordings.
    pub fn class_index(self) -> Option<usize> {
        Self::CLASSES.iter().position(|&c| c == self)
    }

    pub fn from_class_index(index: usize) -> Result<Label> {
        Self::CLASSES.get(index).copied().ok_or(Error::Class(index))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim() {
            "N" => Label::N,
            "AS" => Label::AS,
            "MS" => Label::MS,
            "MR" => Label::MR,
            "MVP" => Label::MVP,
            "LUNG" => Label::LUNG,
            "NOISE" => Label::NOISE,
            other => return Err(format!("unknown label {other:?}")),
        })
    }
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalClip {
    pub samples: Vec<f64>,
    pub rate: u32,
    pub label: Label,
    pub source_id: String,
}

impl SignalClip {
    pub fn new(samples: Vec<f64>, rate: u32, label: Label, source_id: impl Into<String>) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            rate,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>, rate: u32) -> SignalClip {
        SignalClip {
            samples,
            rate,
            label: self.label,
            source_id: self.source_id.clone(),
        }
    }
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::Unsupported(format!("{}", path.display())),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM16 or IEEE float32 WAV, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>, label: Label) -> Result<SignalClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_FULL_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (format, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {format:?} samples",
                path.display()
            )))
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SignalClip::new(samples, spec.sample_rate, label, source_id)
}

/// Writes a mono PCM16 WAV. Samples outside [-1, 1) are clipped.
pub fn write_wav(path: impl AsRef<Path>, clip: &SignalClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let q = (s * PCM16_FULL_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Writes a mono IEEE float32 WAV (used for intermediate frame stores).
pub fn write_wav_f32(path: impl AsRef<Path>, clip: &SignalClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        writer.write_sample(s as f32).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Divides by the peak magnitude; all-zero input is returned unchanged.
pub fn normalize(clip: &SignalClip) -> SignalClip {
    let peak = clip.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return clip.clone();
    }
    clip.with_samples(clip.samples.iter().map(|v| v / peak).collect(), clip.rate)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase windowed-sinc resampler for a rational rate change.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Offset of tap 0 relative to the integer input index.
    first_offset: i64,
    /// `phases[p][j]` weights input `i + first_offset + j` for fractional position `p / up`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(src_rate: u32, dst_rate: u32) -> Result<Self> {
        if src_rate == 0 || dst_rate == 0 {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        let g = gcd(src_rate as u64, dst_rate as u64);
        let up = (dst_rate as u64 / g) as usize;
        let down = (src_rate as u64 / g) as usize;

        let src = src_rate as f64;
        let low = src_rate.min(dst_rate) as f64;
        // Cutoff in cycles per input sample, half-width in input samples.
        let fc = RESAMPLE_ROLLOFF * 0.5 * low / src;
        let half = 0.5 * RESAMPLE_TAPS_PER_PHASE as f64 * src / low;
        let k = half.ceil() as i64;
        let first_offset = -k + 1;
        let n_taps = (2 * k) as usize;
        let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);

        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..n_taps)
                    .map(|j| {
                        let u = frac - (first_offset + j as i64) as f64;
                        let r = u / half;
                        if r.abs() > 1.0 {
                            0.0
                        } else {
                            let w = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                            2.0 * fc * sinc(2.0 * fc * u) * w
                        }
                    })
                    .collect();
                // Unit DC gain per branch.
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();

        Ok(Self {
            up,
            down,
            first_offset,
            phases,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let n_out = self.output_len(input.len());
        let len = input.len() as i64;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let i = (pos / self.up) as i64;
                let taps = &self.phases[pos % self.up];
                let start = i + self.first_offset;
                let mut acc = 0.0;
                for (j, &t) in taps.iter().enumerate() {
                    let idx = start + j as i64;
                    if idx >= 0 && idx < len {
                        acc += t * input[idx as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Band-limited rate conversion; same-rate input is returned unchanged.
pub fn resample(clip: &SignalClip, target_rate: u32) -> Result<SignalClip> {
    if target_rate == 0 {
        return Err(Error::Config("target rate must be positive".into()));
    }
    if target_rate == clip.rate {
        return Ok(clip.clone());
    }
    let resampler = Resampler::new(clip.rate, target_rate)?;
    Ok(clip.with_samples(resampler.process(&clip.samples), target_rate))
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: String,
}

/// A labelled list of recordings; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    label: String,
    split: String,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.path.clone()) {
                return Err(Error::Manifest {
                    row: i + 2,
                    message: format!("duplicate path {}", e.path.display()),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `path,label,split` CSV; paths are written as stored.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["path", "label", "split"]).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            w.write_record([&e.path.to_string_lossy(), e.label.as_str(), e.split.as_str()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, err: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(err.to_string()))
}

/// Parses a `path,label,split` CSV. Row numbers in errors are file line numbers.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Manifest {
            row: 1,
            message: format!("expected header path,label,split, found {:?}", headers),
        });
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 2;
        let raw = record.map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        let label = raw.label.parse::<Label>().map_err(|message| Error::Manifest { row, message })?;
        let entry_path = PathBuf::from(&raw.path);
        if !seen.insert(entry_path.clone()) {
            return Err(Error::Manifest {
                row,
                message: format!("duplicate path {}", raw.path),
            });
        }
        entries.push(ManifestEntry {
            path: entry_path,
            label,
            split: raw.split,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { root, entries })
}
