//! Minimal raster plots for the report stage.

use std::path::Path;

use image::{Rgb, RgbImage};
use nrc_core::nrc_net::TrainHistory;
use nrc_core::tf_transforms::{colorize, IMAGE_SIZE};

use crate::error::{CliError, Result};

const PANEL_W: u32 = 400;
const PANEL_H: u32 = 300;
const MARGIN: u32 = 30;
const TRAIN: Rgb<u8> = Rgb([31, 119, 180]);
const VAL: Rgb<u8> = Rgb([255, 127, 14]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| CliError::Core(nrc_core::Error::Format(format!("{}: {e}", path.display()))))
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws `series` into the panel whose left edge is `x_off`, with y spanning
/// `[0, y_max]`.
fn panel(img: &mut RgbImage, x_off: u32, series: &[(&[f64], Rgb<u8>)], y_max: f64) {
    let (left, right) = ((x_off + MARGIN) as i64, (x_off + PANEL_W - MARGIN / 2) as i64);
    let (top, bottom) = (MARGIN as i64 / 2, (PANEL_H - MARGIN) as i64);
    for q in 1..=4 {
        let y = bottom - (bottom - top) * q / 4;
        line(img, (left, y), (right, y), GRID);
    }
    line(img, (left, bottom), (right, bottom), AXIS);
    line(img, (left, top), (left, bottom), AXIS);
    for (values, color) in series {
        let n = values.len();
        let point = |i: usize| -> (i64, i64) {
            let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let fy = if y_max > 0.0 { (values[i] / y_max).clamp(0.0, 1.0) } else { 0.0 };
            (
                left + (fx * (right - left) as f64).round() as i64,
                bottom - (fy * (bottom - top) as f64).round() as i64,
            )
        };
        for i in 1..n {
            line(img, point(i - 1), point(i), *color);
        }
        if n == 1 {
            let (x, y) = point(0);
            line(img, (x - 2, y), (x + 2, y), *color);
        }
    }
}

/// Loss (left panel) and accuracy (right panel) per epoch; training in blue,
/// validation in orange.
pub fn history_png(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(2 * PANEL_W, PANEL_H, Rgb([255, 255, 255]));
    let col = |f: fn(&nrc_core::nrc_net::EpochRecord) -> f64| history.epochs.iter().map(f).collect::<Vec<_>>();
    let (tl, vl, ta, va) = (col(|e| e.train_loss), col(|e| e.val_loss), col(|e| e.train_acc), col(|e| e.val_acc));
    let loss_max = tl.iter().chain(&vl).cloned().fold(0.0, f64::max);
    panel(&mut img, 0, &[(&tl, TRAIN), (&vl, VAL)], loss_max);
    panel(&mut img, PANEL_W, &[(&ta, TRAIN), (&va, VAL)], 1.0);
    save(&img, path)
}

/// A stored image as a viewable PNG.
pub fn indices_png(indices: &[u8], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = colorize(indices).iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, bytes).expect("image-sized buffer");
    save(&img, path)
}
