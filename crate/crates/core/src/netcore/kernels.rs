//! Forward kernels and their vector-Jacobian products on flat buffers.
//!
//! Layouts: dense inputs are `rows x features`; images are `B x H x W x C`;
//! convolution kernels are `Kh x Kw x Cin x Cout`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// `y = x w + b` for `x: rows x fin`, `w: fin x fout`.
pub fn dense_forward<T: Real>(x: &[T], rows: usize, fin: usize, w: &[T], b: &[T]) -> Vec<T> {
    let fout = b.len();
    let mut y = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    T::gemm(rows, fin, fout, T::one(), x, (fin as isize, 1), w, (fout as isize, 1), T::one(), &mut y, (fout as isize, 1));
    y
}

/// Returns `(d_x, d_w, d_b)` for upstream `g: rows x fout`.
pub fn dense_vjp<T: Real>(
    x: &[T],
    rows: usize,
    fin: usize,
    w: &[T],
    fout: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * fin];
    T::gemm(rows, fout, fin, T::one(), g, (fout as isize, 1), w, (1, fout as isize), T::zero(), &mut dx, (fin as isize, 1));
    let mut dw = vec![T::zero(); fin * fout];
    T::gemm(fin, rows, fout, T::one(), x, (1, fin as isize), g, (fout as isize, 1), T::zero(), &mut dw, (fout as isize, 1));
    let mut db = vec![T::zero(); fout];
    for row in g.chunks_exact(fout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output is `ceil(H / stride)`.
    Same,
    Valid,
}

/// Resolved shapes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[batch, h, w, cin], &[kh, kw, kcin, cout]) = (x_shape, k_shape) else {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and kernel, got {x_shape:?} and {k_shape:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::Shape(format!("conv2d kernel expects {kcin} input channels, input has {cin}")));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("conv2d stride and kernel size must be positive".into()));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Shape(format!("same padding needs odd kernel sizes, got {kh}x{kw}")));
                }
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Shape(format!("kernel {kh}x{kw} larger than input {h}x{w}")));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.ho, self.wo, self.cout]
    }

    fn kdim(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }

    /// Pointwise stride-1 convolutions read the input directly as columns.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (cin, kdim) = (self.cin, self.kdim());
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * kdim..][..kdim];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * cin..][..cin];
                        match self.source(oy, ky, ox, kx) {
                            Some((iy, ix)) => dst.copy_from_slice(&x[(iy * self.w + ix) * cin..][..cin]),
                            None => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (cin, kdim) = (self.cin, self.kdim());
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * kdim..][..kdim];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((iy, ix)) = self.source(oy, ky, ox, kx) {
                            let src = &row[(ky * self.kw + kx) * cin..][..cin];
                            for (d, &s) in dx[(iy * self.w + ix) * cin..][..cin].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with optional per-output-channel bias.
pub fn conv2d_forward<T: Real>(geom: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (kdim, cout, pixels) = (geom.kdim(), geom.cout, geom.ho * geom.wo);
    let mut y = vec![T::zero(); geom.batch * geom.out_len()];
    y.par_chunks_mut(geom.out_len().max(1))
        .zip(x.par_chunks(geom.in_len().max(1)))
        .for_each(|(yb, xb)| {
            if let Some(b) = bias {
                for px in yb.chunks_exact_mut(cout) {
                    px.copy_from_slice(b);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            let owned;
            let cols: &[T] = if geom.is_pointwise() {
                xb
            } else {
                let mut c = vec![T::zero(); pixels * kdim];
                geom.im2col(xb, &mut c);
                owned = c;
                &owned
            };
            T::gemm(pixels, kdim, cout, T::one(), cols, (kdim as isize, 1), k, (cout as isize, 1), beta, yb, (cout as isize, 1));
        });
    y
}

/// Gradients `(d_x, d_k, d_bias)` of a convolution for upstream `g`.
/// `d_x` is skipped (empty) when `need_dx` is false.
pub fn conv2d_vjp<T: Real>(geom: &ConvGeom, x: &[T], k: &[T], g: &[T], need_dx: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kdim, cout, pixels) = (geom.kdim(), geom.cout, geom.ho * geom.wo);
    let per_item: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(geom.in_len().max(1))
        .zip(g.par_chunks(geom.out_len().max(1)))
        .map(|(xb, gb)| {
            let owned;
            let cols: &[T] = if geom.is_pointwise() {
                xb
            } else {
                let mut c = vec![T::zero(); pixels * kdim];
                geom.im2col(xb, &mut c);
                owned = c;
                &owned
            };
            let mut dk = vec![T::zero(); kdim * cout];
            T::gemm(kdim, pixels, cout, T::one(), cols, (1, kdim as isize), gb, (cout as isize, 1), T::zero(), &mut dk, (cout as isize, 1));
            let mut dxb = Vec::new();
            if need_dx {
                let mut dcols = vec![T::zero(); pixels * kdim];
                T::gemm(pixels, cout, kdim, T::one(), gb, (cout as isize, 1), k, (1, cout as isize), T::zero(), &mut dcols, (kdim as isize, 1));
                if geom.is_pointwise() {
                    dxb = dcols;
                } else {
                    dxb = vec![T::zero(); geom.in_len()];
                    geom.col2im(&dcols, &mut dxb);
                }
            }
            (dxb, dk)
        })
        .collect();

    let mut dx = Vec::with_capacity(if need_dx { x.len() } else { 0 });
    let mut dk = vec![T::zero(); kdim * cout];
    for (dxb, dkb) in per_item {
        dx.extend(dxb);
        for (a, b) in dk.iter_mut().zip(dkb) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); cout];
    for px in g.chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }
    (dx, dk, db)
}

pub fn relu_forward<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient passes where `x > 0`; the derivative at 0 is 0.
pub fn relu_vjp<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

/// 2x2 max pooling with stride 2 on `B x H x W x C`. Returns the pooled
/// values and, per output, the flat input index of the first maximum.
pub fn maxpool2_forward<T: Real>(x: &[T], shape: [usize; 4]) -> Result<(Vec<T>, Vec<usize>)> {
    let [b, h, w, c] = shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(b * ho * wo * c);
    let mut arg = Vec::with_capacity(b * ho * wo * c);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ci in 0..c {
                    let mut best_idx = ((bi * h + 2 * oy) * w + 2 * ox) * c + ci;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ci;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    y.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((y, arg))
}

/// Routes each upstream value to its recorded argmax.
pub fn scatter_to_argmax<T: Real>(g: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&d, &i) in g.iter().zip(argmax) {
        dx[i] += d;
    }
    dx
}

/// Nearest-neighbour 2x upsampling of `B x H x W x C`.
pub fn upsample2_forward<T: Real>(x: &[T], shape: [usize; 4]) -> Vec<T> {
    let [b, h, w, c] = shape;
    let mut y = vec![T::zero(); b * 4 * h * w * c];
    for bi in 0..b {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                let dst = ((bi * 2 * h + oy) * 2 * w + ox) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

pub fn upsample2_vjp<T: Real>(g: &[T], in_shape: [usize; 4]) -> Vec<T> {
    let [b, h, w, c] = in_shape;
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((bi * 2 * h + oy) * 2 * w + ox) * c;
                let dst = ((bi * h + oy / 2) * w + ox / 2) * c;
                for (d, &v) in dx[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                    *d += v;
                }
            }
        }
    }
    dx
}

/// Per-feature maximum over the point axis of `B x N x F`; argmax holds the
/// flat input index of the first maximum.
pub fn global_maxpool_forward<T: Real>(x: &[T], b: usize, n: usize, f: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Shape("global max pool over zero points".into()));
    }
    let mut y = Vec::with_capacity(b * f);
    let mut arg = Vec::with_capacity(b * f);
    for bi in 0..b {
        for fi in 0..f {
            let mut best_idx = bi * n * f + fi;
            for p in 1..n {
                let idx = (bi * n + p) * f + fi;
                if x[idx] > x[best_idx] {
                    best_idx = idx;
                }
            }
            y.push(x[best_idx]);
            arg.push(best_idx);
        }
    }
    Ok((y, arg))
}

/// Mean softmax cross-entropy over `M` rows of `K` logits. Returns the loss
/// and the softmax probabilities.
pub fn softmax_ce_forward<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if k == 0 || logits.len() != labels.len() * k {
        return Err(Error::Shape(format!(
            "{} logits for {} labels over {k} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (row, &label) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    let m = T::from_usize(labels.len().max(1)).unwrap();
    Ok((total / m, probs))
}

/// `d_logits = (p - onehot) / M`, scaled by the upstream scalar.
pub fn softmax_ce_vjp<T: Real>(probs: &[T], k: usize, labels: &[usize], upstream: T) -> Vec<T> {
    let scale = upstream / T::from_usize(labels.len().max(1)).unwrap();
    let mut d = probs.to_vec();
    for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    d
}

/// `y[b, n, :] = x[b, n, :] * M_b` with `M_b` a row-major 3x3 matrix.
pub fn transform_forward<T: Real>(x: &[T], m: &[T], b: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); b * n * 3];
    for bi in 0..b {
        let mat = &m[bi * 9..bi * 9 + 9];
        for p in 0..n {
            let src = &x[(bi * n + p) * 3..][..3];
            for j in 0..3 {
                y[(bi * n + p) * 3 + j] = src[0] * mat[j] + src[1] * mat[3 + j] + src[2] * mat[6 + j];
            }
        }
    }
    y
}

pub fn transform_vjp<T: Real>(x: &[T], m: &[T], b: usize, n: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); b * n * 3];
    let mut dm = vec![T::zero(); b * 9];
    for bi in 0..b {
        let mat = &m[bi * 9..bi * 9 + 9];
        for p in 0..n {
            let base = (bi * n + p) * 3;
            for i in 0..3 {
                for j in 0..3 {
                    dx[base + i] += g[base + j] * mat[i * 3 + j];
                    dm[bi * 9 + i * 3 + j] += x[base + i] * g[base + j];
                }
            }
        }
    }
    (dx, dm)
}
