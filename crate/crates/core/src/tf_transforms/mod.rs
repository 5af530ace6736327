//! Time-frequency representations of a frame and their rendering to
//! 224x224x3 network inputs.

mod colormap;
mod cqt;
mod cwt;
mod mfcc;
mod render;
mod stft;

use serde::{Deserialize, Serialize};

pub use colormap::VIRIDIS;
pub use cqt::{cqt, CqtParams};
pub use cwt::{cwt_scalogram, morse_peak_frequency, morse_scales, MorseParams, MorseWavelet};
pub use mfcc::{hz_to_mel, mel_filterbank, mel_to_hz, mfcc, MfccParams};
pub use render::{colorize, normalize_matrix, read_raw, render_image, render_indices, write_png, write_raw, RawHeader, TfImage, IMAGE_CHANNELS, IMAGE_SIZE};
pub use stft::{hann, stft, StftParams};

use crate::error::Result;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A real time-frequency matrix; `row_axis[r]` is the centre frequency in Hz
/// of row `r` (or the coefficient index for cepstra).
#[derive(Debug, Clone, PartialEq)]
pub struct TfMatrix {
    pub values: Matrix<f64>,
    pub row_axis: Vec<f64>,
}

impl TfMatrix {
    /// Mean over time of each row.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.values.rows)
            .map(|r| self.values.row(r).iter().sum::<f64>() / self.values.cols as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Cwt,
    Cqt,
    Stft,
    Mfcc,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [TransformKind::Cwt, TransformKind::Cqt, TransformKind::Stft, TransformKind::Mfcc];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Cwt => "cwt",
            TransformKind::Cqt => "cqt",
            TransformKind::Stft => "stft",
            TransformKind::Mfcc => "mfcc",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown transform {s:?} (expected cwt, cqt, stft, or mfcc)"))
    }
}

/// Parameters of all four transforms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    #[serde(default)]
    pub stft: StftParams,
    #[serde(default)]
    pub mfcc: MfccParams,
    #[serde(default)]
    pub cwt: MorseParams,
    #[serde(default)]
    pub cqt: CqtParams,
}

/// The matrix a transform hands to the renderer: power for STFT, CQT, and
/// CWT, raw coefficients for MFCC.
pub fn transform_matrix(samples: &[f64], rate: u32, kind: TransformKind, params: &TransformParams) -> Result<TfMatrix> {
    Ok(match kind {
        TransformKind::Stft => {
            let m = stft(samples, rate, &params.stft)?;
            TfMatrix {
                values: m.values.map(|c| c.norm_sqr()),
                row_axis: m.row_axis,
            }
        }
        TransformKind::Mfcc => mfcc(samples, rate, &params.mfcc)?,
        TransformKind::Cwt => cwt_scalogram(samples, rate, &params.cwt)?,
        TransformKind::Cqt => {
            let m = cqt(samples, rate, &params.cqt)?;
            TfMatrix {
                values: m.values.map(|v| v * v),
                row_axis: m.row_axis,
            }
        }
    })
}

/// Transform and render in one step.
pub fn frame_to_image(
    samples: &[f64],
    rate: u32,
    kind: TransformKind,
    params: &TransformParams,
    source: impl Into<String>,
    snr_db: Option<f64>,
) -> Result<TfImage> {
    let m = transform_matrix(samples, rate, kind, params)?;
    render_image(&m, kind, source, snr_db)
}

/// Complex-valued time-frequency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTf {
    pub values: Matrix<rustfft::num_complex::Complex64>,
    pub row_axis: Vec<f64>,
}
