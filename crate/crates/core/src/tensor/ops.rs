//! Forward operations. Each op validates shapes, computes its value, and
//! records itself so `backward` can propagate gradients (see autograd.rs).
//!
//! Layout conventions: feature maps are `[C, H, W]`, matrices `[R, C]`,
//! both row-major. There is no batch axis; the pipeline is per-image.

use std::sync::Arc;

use super::gemm::dgemm_rm;
use super::{numel_of, Op, Tensor};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Scatter pattern of one im2col/col2im traversal.
/// `col` is `[C*kh*kw, OH*OW]`; entry `((c,ki,kj),(oy,ox))` reads input
/// pixel `(c, oy*stride+ki-pad, ox*stride+kj-pad)` or 0 when outside.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let mut col = vec![0.0; c * k * k * ohw];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = row_base + oy * ow;
                    if stride == 1 {
                        // Valid ox form one contiguous run: 0 <= ox + kj - pad < w.
                        let lo = pad.saturating_sub(kj).min(ow);
                        let hi = ((w + pad) as isize - kj as isize).clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let src = src_row + lo + kj - pad;
                            col[dst_row + lo..dst_row + hi]
                                .copy_from_slice(&x[src..src + hi - lo]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                col[dst_row + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transpose of im2col as a scatter-add: accumulates `dcol` back onto
/// the input grid. Used by conv backward for the input gradient.
#[allow(clippy::too_many_arguments)]
pub(super) fn col2im_add(
    dcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += dcol[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_out_side(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

impl Tensor {
    /// 2-D cross-correlation: input `[C,H,W]`, kernel `[K,C,k,k]` with odd
    /// square `k`, output `[K,H',W']` where `H' = (H + 2p - k)/s + 1`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d wants [C,H,W] input and [K,C,k,k] kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ko, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d supports odd square kernels only, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = conv_out_side(h, kh, stride, padding);
        let ow = conv_out_side(w, kw, stride, padding);

        let x = self.data();
        let kd = kernel.data();
        let mut out = vec![0.0; ko * oh * ow];
        if kh == 1 && stride == 1 && padding == 0 {
            // 1x1 conv is a plain channel-mixing matmul.
            dgemm_rm(ko, c, h * w, 1.0, &kd, c, 1, &x, w * h, 1, 0.0, &mut out, oh * ow, 1);
        } else {
            let col = im2col(&x, c, h, w, kh, stride, padding, oh, ow);
            let ckk = c * kh * kw;
            dgemm_rm(ko, ckk, oh * ow, 1.0, &kd, ckk, 1, &col, oh * ow, 1, 0.0, &mut out, oh * ow, 1);
        }
        drop(x);
        drop(kd);
        Ok(Tensor::from_op(
            vec![ko, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Add a per-channel bias `[C]` to a `[C,H,W]` map.
    pub fn bias_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 || bias.shape() != [xs[0]] {
            return Err(Error::ShapeMismatch(format!(
                "bias_channel wants [C,H,W] and [C], got {:?} and {:?}",
                xs,
                bias.shape()
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let x = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(c * hw);
        for ci in 0..c {
            let bv = b[ci];
            out.extend(x[ci * hw..(ci + 1) * hw].iter().map(|v| v + bv));
        }
        drop(x);
        drop(b);
        Ok(Tensor::from_op(
            xs.to_vec(),
            out,
            Op::BiasChannel {
                input: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Add a bias `[C]` to every row of a `[R,C]` matrix.
    pub fn bias_row(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 || bias.shape() != [xs[1]] {
            return Err(Error::ShapeMismatch(format!(
                "bias_row wants [R,C] and [C], got {:?} and {:?}",
                xs,
                bias.shape()
            )));
        }
        let (r, c) = (xs[0], xs[1]);
        let x = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for col in 0..c {
                out.push(x[row * c + col] + b[col]);
            }
        }
        drop(x);
        drop(b);
        Ok(Tensor::from_op(
            xs.to_vec(),
            out,
            Op::BiasRow {
                input: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Elementwise max(x, 0). Subgradient at exactly 0 is taken as 0.
    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Relu {
                input: self.clone(),
            },
        )
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sigmoid {
                input: self.clone(),
            },
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add on {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let out = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Scale {
                input: self.clone(),
                factor,
            },
        )
    }

    /// Stack `[C_i,H,W]` maps along the channel axis.
    pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch("concat_channels of nothing".into()));
        }
        let (h, w) = match inputs[0].shape() {
            [_, h, w] => (*h, *w),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels wants [C,H,W] inputs, got {s:?}"
                )))
            }
        };
        let mut c_total = 0;
        for t in inputs {
            match t.shape() {
                [c, th, tw] if *th == h && *tw == w => c_total += c,
                s => {
                    return Err(Error::ShapeMismatch(format!(
                        "concat_channels spatial mismatch: {s:?} vs {h}x{w}"
                    )))
                }
            }
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for t in inputs {
            out.extend_from_slice(&t.data());
        }
        Ok(Tensor::from_op(
            vec![c_total, h, w],
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Stack `[R_i,C]` matrices along the row axis.
    pub fn concat_rows(inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows of nothing".into()));
        }
        let c = match inputs[0].shape() {
            [_, c] => *c,
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows wants [R,C] inputs, got {s:?}"
                )))
            }
        };
        let mut rows = 0;
        for t in inputs {
            match t.shape() {
                [r, tc] if *tc == c => rows += r,
                s => {
                    return Err(Error::ShapeMismatch(format!(
                        "concat_rows column mismatch: {s:?} vs {c}"
                    )))
                }
            }
        }
        let mut out = Vec::with_capacity(rows * c);
        for t in inputs {
            out.extend_from_slice(&t.data());
        }
        Ok(Tensor::from_op(
            vec![rows, c],
            out,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Row-wise softmax of a `[R,C]` matrix, stabilized by the row max;
    /// every output row sums to 1 up to rounding.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_rows wants [R,C], got {xs:?}"
            )));
        }
        let (r, c) = (xs[0], xs[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let xr = &x[row * c..(row + 1) * c];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[row * c..(row + 1) * c].iter_mut().zip(xr) {
                let e = (v - m).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[row * c..(row + 1) * c] {
                *o /= sum;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            xs.to_vec(),
            out,
            Op::SoftmaxRows {
                input: self.clone(),
            },
        ))
    }

    /// Max-pool a box of the input map into a fixed `out x out` grid.
    ///
    /// `roi` is in image coordinates; `scale` maps image to feature
    /// coordinates (1/stride). Each output cell takes the max over the
    /// feature cells its fractional bin touches, clamped to the map; a
    /// bin left empty by clamping (ROI partly or fully outside) is 0.
    pub fn roi_pool(&self, roi: &BBox, out: usize, scale: f64) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "roi_pool wants [C,H,W] features, got {xs:?}"
            )));
        }
        if out == 0 {
            return Err(Error::ShapeMismatch("roi_pool output size 0".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::ShapeMismatch(format!("roi_pool scale {scale}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (x1, y1) = (roi.x1 * scale, roi.y1 * scale);
        let (x2, y2) = (roi.x2 * scale, roi.y2 * scale);

        // Per-bin windows, shared by all channels.
        let mut windows = Vec::with_capacity(out * out);
        for by in 0..out {
            let yl = y1 + (y2 - y1) * by as f64 / out as f64;
            let yh = y1 + (y2 - y1) * (by + 1) as f64 / out as f64;
            let h0 = (yl.floor() as isize).clamp(0, h as isize) as usize;
            let h1 = (yh.ceil() as isize).clamp(0, h as isize) as usize;
            for bx in 0..out {
                let xl = x1 + (x2 - x1) * bx as f64 / out as f64;
                let xh = x1 + (x2 - x1) * (bx + 1) as f64 / out as f64;
                let w0 = (xl.floor() as isize).clamp(0, w as isize) as usize;
                let w1 = (xh.ceil() as isize).clamp(0, w as isize) as usize;
                windows.push((h0, h1, w0, w1));
            }
        }

        let x = self.data();
        let mut out_data = vec![0.0; c * out * out];
        let mut argmax = vec![-1_i64; c * out * out];
        for ci in 0..c {
            let plane = ci * h * w;
            for (bin, &(h0, h1, w0, w1)) in windows.iter().enumerate() {
                if h0 >= h1 || w0 >= w1 {
                    continue; // empty after clamping -> stays 0
                }
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for hy in h0..h1 {
                    let row = plane + hy * w;
                    for wx in w0..w1 {
                        let v = x[row + wx];
                        if v > best {
                            best = v;
                            best_idx = row + wx;
                        }
                    }
                }
                out_data[ci * out * out + bin] = best;
                argmax[ci * out * out + bin] = best_idx as i64;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![c, out, out],
            out_data,
            Op::RoiPool {
                input: self.clone(),
                argmax: Arc::new(argmax),
            },
        ))
    }

    /// Dense matrix product `[M,K] @ [K,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch(format!("matmul on {a:?} @ {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![0.0; m * n];
        dgemm_rm(m, k, n, 1.0, &ad, k, 1, &bd, n, 1, 0.0, &mut out, n, 1);
        drop(ad);
        drop(bd);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Transpose of a `[R,C]` matrix.
    pub fn transpose2(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose2 on {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            Op::Transpose {
                input: self.clone(),
            },
        ))
    }

    /// View the same elements under a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape {
                input: self.clone(),
            },
        ))
    }

    /// Pick elements at the given flat indices; output is `[indices.len()]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::ShapeMismatch(format!(
                "gather index {bad} out of {n} elements"
            )));
        }
        let x = self.data();
        let out = indices.iter().map(|&i| x[i]).collect();
        drop(x);
        Ok(Tensor::from_op(
            vec![indices.len()],
            out,
            Op::Gather {
                input: self.clone(),
                indices: Arc::new(indices.to_vec()),
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            Op::SumAll {
                input: self.clone(),
            },
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Nearest-neighbor 2x upsample of a `[C,H,W]` map.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "upsample_nearest2 wants [C,H,W], got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let x = self.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for hy in 0..h {
                let src = (ci * h + hy) * w;
                let dst0 = (ci * 2 * h + 2 * hy) * 2 * w;
                let dst1 = dst0 + 2 * w;
                for wx in 0..w {
                    let v = x[src + wx];
                    out[dst0 + 2 * wx] = v;
                    out[dst0 + 2 * wx + 1] = v;
                    out[dst1 + 2 * wx] = v;
                    out[dst1 + 2 * wx + 1] = v;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![c, 2 * h, 2 * w],
            out,
            Op::UpsampleNearest2 {
                input: self.clone(),
            },
        ))
    }

    /// Elementwise binary cross-entropy on logits against constant
    /// targets in [0,1], computed in the numerically stable form
    /// `max(l,0) - l*t + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "bce_with_logits: {} logits vs {} targets",
                self.numel(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::ShapeMismatch(format!(
                "bce_with_logits target {bad} outside [0,1]"
            )));
        }
        let x = self.data();
        let out = x
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .collect();
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::BceWithLogits {
                logits: self.clone(),
                targets: Arc::new(targets.to_vec()),
            },
        ))
    }

    /// Elementwise smooth-L1 against constant targets:
    /// `0.5 r^2` for `|r| < 1`, else `|r| - 0.5`, with `r = pred - target`.
    pub fn smooth_l1(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "smooth_l1: {} predictions vs {} targets",
                self.numel(),
                targets.len()
            )));
        }
        let x = self.data();
        let out = x
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let r = p - t;
                if r.abs() < 1.0 {
                    0.5 * r * r
                } else {
                    r.abs() - 0.5
                }
            })
            .collect();
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::SmoothL1 {
                pred: self.clone(),
                targets: Arc::new(targets.to_vec()),
            },
        ))
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Recompute the im2col matrix of a conv input; backward shares it.
pub(super) fn im2col_for(
    input: &Tensor,
    kernel_side: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let xs = input.shape();
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let oh = conv_out_side(h, kernel_side, stride, pad);
    let ow = conv_out_side(w, kernel_side, stride, pad);
    let x = input.data();
    (im2col(&x, c, h, w, kernel_side, stride, pad, oh, ow), oh, ow)
}
