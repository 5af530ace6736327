use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::colormap::VIRIDIS;
use super::{Matrix, TfMatrix, TransformKind};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const IMAGE_CHANNELS: usize = 3;

const DB_EPS: f64 = 1e-12;
const DB_RANGE: f64 = 80.0;

/// A rendered network input, `IMAGE_SIZE x IMAGE_SIZE x IMAGE_CHANNELS` in
/// H, W, C order with values in `[0, 1]`. Row 0 is the highest frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct TfImage {
    pub pixels: Vec<f32>,
    pub kind: TransformKind,
    pub source: String,
    pub snr_db: Option<f64>,
}

impl TfImage {
    pub const LEN: usize = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * IMAGE_SIZE + col) * IMAGE_CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Min-max scale to `[0, 1]`; a constant input maps to all ones.
pub fn normalize_matrix(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

fn to_db(values: &[f64]) -> Vec<f64> {
    let db: Vec<f64> = values.iter().map(|&v| 10.0 * v.max(DB_EPS).log10()).collect();
    let top = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    db.into_iter().map(|v| v.max(top - DB_RANGE)).collect()
}

/// Bilinear resize with aligned corners.
fn resize(m: &Matrix<f64>, rows: usize, cols: usize) -> Vec<f64> {
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if inp == 1 || out == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let i0 = (x.floor() as usize).min(inp - 2);
        (i0, i0 + 1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, fr) = coord(r, rows, m.rows);
        for c in 0..cols {
            let (c0, c1, fc) = coord(c, cols, m.cols);
            let top = m.get(r0, c0) * (1.0 - fc) + m.get(r0, c1) * fc;
            let bottom = m.get(r1, c0) * (1.0 - fc) + m.get(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Colormap index of every pixel of the rendered image, row-major. Power
/// matrices go through a dB scale clipped 80 dB below the maximum; MFCC
/// values are scaled as they are.
pub fn render_indices(m: &TfMatrix, kind: TransformKind) -> Result<Vec<u8>> {
    if m.values.data.is_empty() {
        return Err(Error::Shape("cannot render an empty matrix".into()));
    }
    if m.values.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite value in transform matrix".into()));
    }
    let scaled = match kind {
        TransformKind::Mfcc => m.values.data.clone(),
        _ => to_db(&m.values.data),
    };
    let mut norm = Matrix::from_vec(m.values.rows, m.values.cols, normalize_matrix(&scaled));
    // Put the highest frequency in row 0.
    let ascending = m.row_axis.first() < m.row_axis.last();
    if ascending {
        let cols = norm.cols;
        let flipped: Vec<f64> = (0..norm.rows).rev().flat_map(|r| norm.data[r * cols..(r + 1) * cols].to_vec()).collect();
        norm.data = flipped;
    }
    Ok(resize(&norm, IMAGE_SIZE, IMAGE_SIZE)
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// RGB pixels of a colormap index grid.
pub fn colorize(indices: &[u8]) -> Vec<f32> {
    indices.iter().flat_map(|&i| VIRIDIS[i as usize]).collect()
}

/// Colormapped `IMAGE_SIZE` square image of a transform matrix.
pub fn render_image(m: &TfMatrix, kind: TransformKind, source: impl Into<String>, snr_db: Option<f64>) -> Result<TfImage> {
    Ok(TfImage {
        pixels: colorize(&render_indices(m, kind)?),
        kind,
        source: source.into(),
        snr_db,
    })
}

pub fn write_png(img: &TfImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, bytes)
        .ok_or_else(|| Error::Shape("pixel buffer does not match image size".into()))?;
    buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// First line of a raw tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    pub transform: TransformKind,
    pub source: String,
    pub snr_db: Option<f64>,
}

pub fn write_raw(img: &TfImage, path: &Path) -> Result<()> {
    let header = RawHeader {
        shape: vec![IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS],
        transform: img.kind,
        source: img.source.clone(),
        snr_db: img.snr_db,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(line.len() + 1 + img.pixels.len() * 4);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    for v in &img.pixels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<TfImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: RawHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("{}: bad raw header: {e}", path.display())))?;
    if header.shape != [IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS] {
        return Err(Error::Shape(format!("{}: unexpected shape {:?}", path.display(), header.shape)));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != TfImage::LEN * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            TfImage::LEN * 4,
            body.len()
        )));
    }
    let pixels = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(TfImage {
        pixels,
        kind: header.transform,
        source: header.source,
        snr_db: header.snr_db,
    })
}
