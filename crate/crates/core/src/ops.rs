//! Tape-free numeric kernels.
//!
//! The tape, evaluation and sparse inference all route through these
//! functions, so a given forward computation yields the same bits no matter
//! which path runs it.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn dims2<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{what} must be 2-D, got shape {s:?}"))),
    }
}

/// Geometry of an NHWC cross-correlation with a `kh×kw×c_in×c_out` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, height, width, c_in] = input else {
            return Err(Error::dim(format!(
                "conv2d input must be N×H×W×C, got {input:?}"
            )));
        };
        let &[kh, kw, kc, c_out] = kernel else {
            return Err(Error::dim(format!(
                "conv2d kernel must be kh×kw×C_in×C_out, got {kernel:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be at least 1"));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}×{kw} does not fit padded input {ph}×{pw}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Rows of the patch matrix (one per output pixel).
    pub fn patch_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the patch matrix, equal to the kernel's fan-in.
    pub fn patch_cols(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.c_out]
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// lands inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }
}

/// Unfolds NHWC input into a `patch_rows × patch_cols` matrix whose column
/// order (ky, kx, c) matches the row-major kernel layout.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.patch_cols();
    let mut out = vec![T::zero(); g.patch_rows() * cols];
    let mut row = 0;
    for b in 0..g.batch {
        let image = &input[b * g.height * g.width * g.c_in..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        let src = (iy * g.width + ix) * g.c_in;
                        let d = (ky * g.kw + kx) * g.c_in;
                        dst[d..d + g.c_in].copy_from_slice(&image[src..src + g.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let width = g.patch_cols();
    let mut out = vec![T::zero(); g.batch * g.height * g.width * g.c_in];
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * g.c_in;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * width..(row + 1) * width];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        let dst = base + (iy * g.width + ix) * g.c_in;
                        let s = (ky * g.kw + kx) * g.c_in;
                        for c in 0..g.c_in {
                            out[dst + c] += src[s + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Cross-correlation returning the output and the patch matrix used to
/// compute it (kept by the tape for the kernel gradient).
pub fn conv2d_with_patches<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let patches = im2col(input.data(), &g);
    let mut out = vec![T::zero(); g.patch_rows() * g.c_out];
    T::gemm(
        g.patch_rows(),
        g.patch_cols(),
        g.c_out,
        &patches,
        false,
        kernel.data(),
        false,
        &mut out,
        false,
    );
    Ok((Tensor::new(g.output_shape(), out)?, patches, g))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_with_patches(input, kernel, stride, padding).map(|(out, _, _)| out)
}

/// Elementwise `a · t`.
pub fn scale<T: Real>(t: &Tensor<T>, a: T) -> Tensor<T> {
    t.map(|x| a * x)
}

/// Adds `bias` along the trailing axis.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [c] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match trailing axis of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Non-overlapping `size×size` max pooling over NHWC input. Also returns the
/// flat input index chosen for each output (first maximum wins).
pub fn max_pool<T: Real>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::dim(format!(
            "max_pool input must be N×H×W×C, got {:?}",
            x.shape()
        )));
    };
    if size == 0 || size > h || size > w {
        return Err(Error::dim(format!(
            "pool size {size} does not fit {h}×{w} input"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let data = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + oy * size) * w + ox * size) * c + ch;
                    let mut best = data[best_i];
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = ((b * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, oh, ow, c], out)?, arg))
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let (n, k) = dims2(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += sum.ln() - (row[label] - max);
        probs.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok((total / T::of(n as f64), probs))
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = dims2(logits, "logits")?;
    Ok(logits
        .data()
        .chunks_exact(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}
