//! 2-D cross-correlation on NHWC inputs with HWIO kernels, lowered to GEMM
//! one sample at a time.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub o: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects NHWC input and HWIO kernel, got {x:?} and {k:?}")));
        }
        if x[3] != k[2] {
            return Err(Error::Shape(format!("conv2d input has {} channels, kernel expects {}", x[3], k[2])));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let (ho, wo, pad_top, pad_left) = conv_output_dims(x[1], x[2], k[0], k[1], stride, padding)
            .ok_or_else(|| Error::Shape(format!("kernel {}x{} does not fit input {}x{}", k[0], k[1], x[1], x[2])))?;
        Ok(Self {
            n: x[0],
            h: x[1],
            w: x[2],
            c: x[3],
            kh: k[0],
            kw: k[1],
            o: k[3],
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        })
    }

    fn rows(&self) -> usize {
        self.ho * self.wo
    }

    fn depth(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

/// Output height and width plus the top and left zero padding. `Same`
/// pads so the output is `ceil(input / stride)`, with any odd padding on the
/// bottom/right.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize, usize, usize)> {
    match padding {
        Padding::Valid => {
            if kh > h || kw > w || kh == 0 || kw == 0 {
                return None;
            }
            Some(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Padding::Same => {
            if kh == 0 || kw == 0 || h == 0 || w == 0 {
                return None;
            }
            let ho = h.div_ceil(stride);
            let wo = w.div_ceil(stride);
            let ph = ((ho - 1) * stride + kh).saturating_sub(h);
            let pw = ((wo - 1) * stride + kw).saturating_sub(w);
            Some((ho, wo, ph / 2, pw / 2))
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let depth = g.depth();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * depth..][..depth];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.c..][..g.c];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        dst.copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let depth = g.depth();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * depth..][..depth];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = &row[(ky * g.kw + kx) * g.c..][..g.c];
                    for (d, &s) in dx[dst..dst + g.c].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (rows, depth) = (g.rows(), g.depth());
    let in_stride = g.h * g.w * g.c;
    let out_stride = rows * g.o;
    let mut out = vec![T::zero(); g.n * out_stride];
    let mut cols = vec![T::zero(); rows * depth];
    for s in 0..g.n {
        im2col(g, &x.data[s * in_stride..(s + 1) * in_stride], &mut cols);
        let y = &mut out[s * out_stride..(s + 1) * out_stride];
        if let Some(b) = bias {
            for r in 0..rows {
                y[r * g.o..(r + 1) * g.o].copy_from_slice(&b.data);
            }
            T::gemm(rows, depth, g.o, &cols, false, &k.data, false, T::one(), y);
        } else {
            T::gemm(rows, depth, g.o, &cols, false, &k.data, false, T::zero(), y);
        }
    }
    Tensor {
        shape: vec![g.n, g.ho, g.wo, g.o],
        data: out,
    }
}

/// Returns `(dx, dk, db)`; `dx` only when requested.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (rows, depth) = (g.rows(), g.depth());
    let in_stride = g.h * g.w * g.c;
    let out_stride = rows * g.o;
    let mut dk = vec![T::zero(); depth * g.o];
    let mut db = vec![T::zero(); g.o];
    let mut dx = need_dx.then(|| vec![T::zero(); x.data.len()]);
    let mut cols = vec![T::zero(); rows * depth];
    let mut dcols = vec![T::zero(); if need_dx { rows * depth } else { 0 }];
    for s in 0..g.n {
        let dys = &dy[s * out_stride..(s + 1) * out_stride];
        for r in 0..rows {
            for (acc, &v) in db.iter_mut().zip(&dys[r * g.o..(r + 1) * g.o]) {
                *acc = *acc + v;
            }
        }
        im2col(g, &x.data[s * in_stride..(s + 1) * in_stride], &mut cols);
        T::gemm(depth, rows, g.o, &cols, true, dys, false, T::one(), &mut dk);
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, g.o, depth, dys, false, &k.data, true, T::zero(), &mut dcols);
            col2im(g, &dcols, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    (dx, dk, db)
}
