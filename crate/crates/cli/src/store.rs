//! Content hashes, stage manifests, and the binary frame and image stores.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nrc_core::signal_io::Label;
use nrc_core::tf_transforms::{colorize, TransformKind, IMAGE_CHANNELS, IMAGE_SIZE};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Compact JSON with sorted keys.
pub fn canonical_json(value: &impl Serialize) -> String {
    serde_json::to_value(value).expect("serializable value").to_string()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let v = serde_json::to_value(value).expect("serializable value");
    let mut text = serde_json::to_string_pretty(&v).expect("serializable value");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(nrc_core::Error::Format(format!("{}: {e}", path.display()))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the stage directory.
    pub path: String,
    pub sha256: String,
    /// False for wall-clock measurements.
    pub deterministic: bool,
}

/// `<work_dir>/<stage>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub upstream: Option<String>,
    pub seed: u64,
    pub params: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
}

impl StageManifest {
    /// Whether every listed artifact is still present, and unchanged when
    /// deterministic.
    pub fn artifacts_intact(&self, dir: &Path) -> Result<bool> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.is_file() {
                return Ok(false);
            }
            if a.deterministic && sha256_file(&p)? != a.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A JSON header line followed by a little-endian body.
fn write_store(path: &Path, header: &impl Serialize, body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = canonical_json(header);
    w.write_all(line.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.write_all(body))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn read_store<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
    let header = serde_json::from_str(line.trim_end())
        .map_err(|e| CliError::Core(nrc_core::Error::Format(format!("{}: bad header: {e}", path.display()))))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| CliError::io(path, e))?;
    Ok((header, body))
}

fn check_provenance(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(CliError::Provenance {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn truncated(path: &Path, want: usize, got: usize) -> CliError {
    CliError::Core(nrc_core::Error::Format(format!("{}: body holds {got} bytes, expected {want}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameItem {
    pub origin: String,
    pub label: Label,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameHeader {
    config_hash: String,
    frame_len: usize,
    rate: u32,
    snr_db: Option<f64>,
    items: Vec<FrameItem>,
}

/// Frames of one condition as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub snr_db: Option<f64>,
    pub items: Vec<FrameItem>,
    pub samples: Vec<Vec<f64>>,
}

pub fn write_frames(path: &Path, config_hash: &str, set: &FrameSet, frame_len: usize, rate: u32) -> Result<()> {
    let header = FrameHeader {
        config_hash: config_hash.to_string(),
        frame_len,
        rate,
        snr_db: set.snr_db,
        items: set.items.clone(),
    };
    let mut body = Vec::with_capacity(set.samples.len() * frame_len * 8);
    for s in &set.samples {
        debug_assert_eq!(s.len(), frame_len);
        for v in s {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_store(path, &header, &body)
}

pub fn read_frames(path: &Path, expected_hash: &str) -> Result<FrameSet> {
    let (h, body): (FrameHeader, _) = read_store(path)?;
    check_provenance(path, &h.config_hash, expected_hash)?;
    let want = h.items.len() * h.frame_len * 8;
    if body.len() != want {
        return Err(truncated(path, want, body.len()));
    }
    let samples = body
        .chunks_exact(h.frame_len * 8)
        .map(|c| c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
        .collect();
    Ok(FrameSet {
        snr_db: h.snr_db,
        items: h.items,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageHeader {
    config_hash: String,
    condition: String,
    snr_db: Option<f64>,
    transform: TransformKind,
    shape: Vec<usize>,
    /// Pixels are stored as indices into the colormap.
    encoding: String,
    items: Vec<FrameItem>,
}

const IMAGE_ENCODING: &str = "viridis_index_u8";
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Rendered images of one condition, one colormap index per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub condition: String,
    pub snr_db: Option<f64>,
    pub transform: TransformKind,
    pub items: Vec<FrameItem>,
    pub indices: Vec<Vec<u8>>,
}

impl ImageSet {
    /// RGB network input of image `i`.
    pub fn pixels(&self, i: usize) -> Vec<f32> {
        colorize(&self.indices[i])
    }
}

pub fn write_images(path: &Path, config_hash: &str, set: &ImageSet) -> Result<()> {
    let header = ImageHeader {
        config_hash: config_hash.to_string(),
        condition: set.condition.clone(),
        snr_db: set.snr_db,
        transform: set.transform,
        shape: vec![IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS],
        encoding: IMAGE_ENCODING.into(),
        items: set.items.clone(),
    };
    write_store(path, &header, &set.indices.concat())
}

pub fn read_images(path: &Path, expected_hash: &str) -> Result<ImageSet> {
    let (h, body): (ImageHeader, Vec<u8>) = read_store(path)?;
    check_provenance(path, &h.config_hash, expected_hash)?;
    if h.encoding != IMAGE_ENCODING {
        return Err(CliError::Core(nrc_core::Error::Format(format!("{}: unknown encoding {}", path.display(), h.encoding))));
    }
    let want = h.items.len() * IMAGE_PIXELS;
    if body.len() != want {
        return Err(truncated(path, want, body.len()));
    }
    Ok(ImageSet {
        condition: h.condition,
        snr_db: h.snr_db,
        transform: h.transform,
        items: h.items,
        indices: body.chunks_exact(IMAGE_PIXELS).map(<[u8]>::to_vec).collect(),
    })
}

/// File name of a condition's store, e.g. `clean.images` or `5dB.frames`.
pub fn condition_file(condition: &str, ext: &str) -> PathBuf {
    PathBuf::from(format!("{condition}.{ext}"))
}
