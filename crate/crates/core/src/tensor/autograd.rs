//! Reverse-mode differentiation.
//!
//! [`GradTape::record`] linearizes the subgraph that can influence the
//! loss (parents before children); [`GradTape::replay`] walks that order
//! backwards, turning each node's output gradient into contributions to
//! its inputs. Every `requires_grad` leaf receives its final gradient
//! exactly once per replay; intermediate gradients are dropped as soon
//! as their node is processed. A tape is built, replayed and discarded
//! on one thread within a single forward/backward pass.

use std::collections::{HashMap, HashSet};

use super::gemm::dgemm_rm;
use super::ops::{col2im_add, im2col_for, sigmoid_scalar};
use super::{Op, Tensor};
use crate::error::{Error, Result};

pub struct GradTape {
    /// Topological order over requires_grad tensors: parents first.
    order: Vec<Tensor>,
}

impl GradTape {
    /// Capture the differentiable history of `root`.
    pub fn record(root: &Tensor) -> GradTape {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children_already_pushed)
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.op().parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        GradTape { order }
    }

    pub fn num_nodes(&self) -> usize {
        self.order.len()
    }

    /// Propagate d(root)/d(node) through the recorded order, depositing
    /// gradients on requires_grad leaves. `root` must be the tensor the
    /// tape was recorded from.
    pub fn replay(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(root.id(), vec![1.0]);

        for t in self.order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.is_leaf() {
                if t.requires_grad() {
                    t.set_grad(g);
                }
                continue;
            }
            backprop_one(t, &g, &mut grads);
        }
        Ok(())
    }
}

impl Tensor {
    /// Compute gradients of this scalar with respect to every
    /// `requires_grad` leaf below it. Each such leaf's `grad()` slot is
    /// replaced (not accumulated) by this call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        GradTape::record(self).replay(self)
    }
}

/// Add `src` into the gradient accumulator of `t`.
fn accumulate(grads: &mut HashMap<usize, Vec<f64>>, t: &Tensor, src: &[f64]) {
    let entry = grads
        .entry(t.id())
        .or_insert_with(|| vec![0.0; t.numel()]);
    for (e, s) in entry.iter_mut().zip(src) {
        *e += s;
    }
}

/// Mutable access to the accumulator of `t` for ops that write into it
/// directly (GEMM with beta = 1).
fn accumulator<'a>(
    grads: &'a mut HashMap<usize, Vec<f64>>,
    t: &Tensor,
) -> &'a mut Vec<f64> {
    grads
        .entry(t.id())
        .or_insert_with(|| vec![0.0; t.numel()])
}

fn backprop_one(t: &Tensor, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
    match t.op() {
        Op::Leaf => unreachable!("leaves are handled by the replay loop"),

        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let xs = input.shape();
            let ks = kernel.shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (ko, side) = (ks[0], ks[2]);
            let ckk = c * side * side;
            if side == 1 && *stride == 1 && *padding == 0 {
                let hw = h * w;
                if kernel.requires_grad() {
                    let x = input.data();
                    let dk = accumulator(grads, kernel);
                    // dK[K,C] += g[K,HW] @ X^T[HW,C]
                    dgemm_rm(ko, hw, c, 1.0, g, hw, 1, &x, 1, hw, 1.0, dk, c, 1);
                }
                if input.requires_grad() {
                    let kd = kernel.data();
                    let dx = accumulator(grads, input);
                    // dX[C,HW] += K^T[C,K] @ g[K,HW]
                    dgemm_rm(c, ko, hw, 1.0, &kd, 1, c, g, hw, 1, 1.0, dx, hw, 1);
                }
                return;
            }
            let (col, oh, ow) = im2col_for(input, side, *stride, *padding);
            let ohw = oh * ow;
            if kernel.requires_grad() {
                let dk = accumulator(grads, kernel);
                // dK[K,CKK] += g[K,OHW] @ col^T[OHW,CKK]
                dgemm_rm(ko, ohw, ckk, 1.0, g, ohw, 1, &col, 1, ohw, 1.0, dk, ckk, 1);
            }
            if input.requires_grad() {
                let kd = kernel.data();
                let mut dcol = vec![0.0; ckk * ohw];
                // dcol[CKK,OHW] = K^T[CKK,K] @ g[K,OHW]
                dgemm_rm(ckk, ko, ohw, 1.0, &kd, 1, ckk, g, ohw, 1, 0.0, &mut dcol, ohw, 1);
                drop(kd);
                let dx = accumulator(grads, input);
                col2im_add(&dcol, c, h, w, side, *stride, *padding, oh, ow, dx);
            }
        }

        Op::BiasChannel { input, bias } => {
            if input.requires_grad() {
                accumulate(grads, input, g);
            }
            if bias.requires_grad() {
                let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
                let db = accumulator(grads, bias);
                for ci in 0..c {
                    db[ci] += g[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
                }
            }
        }

        Op::BiasRow { input, bias } => {
            if input.requires_grad() {
                accumulate(grads, input, g);
            }
            if bias.requires_grad() {
                let (r, c) = (input.shape()[0], input.shape()[1]);
                let db = accumulator(grads, bias);
                for row in 0..r {
                    for col in 0..c {
                        db[col] += g[row * c + col];
                    }
                }
            }
        }

        Op::Relu { input } => {
            if input.requires_grad() {
                let x = input.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                drop(x);
                accumulate(grads, input, &dx);
            }
        }

        Op::Sigmoid { input } => {
            if input.requires_grad() {
                let y = t.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                drop(y);
                accumulate(grads, input, &dx);
            }
        }

        Op::Add { a, b } => {
            if a.requires_grad() {
                accumulate(grads, a, g);
            }
            if b.requires_grad() {
                accumulate(grads, b, g);
            }
        }

        Op::Scale { input, factor } => {
            if input.requires_grad() {
                let dx: Vec<f64> = g.iter().map(|&gv| gv * factor).collect();
                accumulate(grads, input, &dx);
            }
        }

        Op::ConcatChannels { inputs } | Op::ConcatRows { inputs } => {
            let mut offset = 0;
            for p in inputs {
                let n = p.numel();
                if p.requires_grad() {
                    accumulate(grads, p, &g[offset..offset + n]);
                }
                offset += n;
            }
        }

        Op::SoftmaxRows { input } => {
            if input.requires_grad() {
                let y = t.data();
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                drop(y);
                accumulate(grads, input, &dx);
            }
        }

        Op::RoiPool { input, argmax } => {
            if input.requires_grad() {
                let dx = accumulator(grads, input);
                for (out_idx, &src) in argmax.iter().enumerate() {
                    if src >= 0 {
                        dx[src as usize] += g[out_idx];
                    }
                }
            }
        }

        Op::MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bd = b.data();
                let da = accumulator(grads, a);
                // dA[M,K] += g[M,N] @ B^T[N,K]
                dgemm_rm(m, n, k, 1.0, g, n, 1, &bd, 1, n, 1.0, da, k, 1);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db = accumulator(grads, b);
                // dB[K,N] += A^T[K,M] @ g[M,N]
                dgemm_rm(k, m, n, 1.0, &ad, 1, k, g, n, 1, 1.0, db, n, 1);
            }
        }

        Op::Transpose { input } => {
            if input.requires_grad() {
                let (c, r) = (t.shape()[0], t.shape()[1]); // output dims
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                accumulate(grads, input, &dx);
            }
        }

        Op::Reshape { input } => {
            if input.requires_grad() {
                accumulate(grads, input, g);
            }
        }

        Op::Gather { input, indices } => {
            if input.requires_grad() {
                let dx = accumulator(grads, input);
                for (gi, &src) in g.iter().zip(indices.iter()) {
                    dx[src] += gi;
                }
            }
        }

        Op::SumAll { input } => {
            if input.requires_grad() {
                let dx = vec![g[0]; input.numel()];
                accumulate(grads, input, &dx);
            }
        }

        Op::UpsampleNearest2 { input } => {
            if input.requires_grad() {
                let xs = input.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for hy in 0..h {
                        let dst = (ci * h + hy) * w;
                        let src0 = (ci * 2 * h + 2 * hy) * 2 * w;
                        let src1 = src0 + 2 * w;
                        for wx in 0..w {
                            dx[dst + wx] = g[src0 + 2 * wx]
                                + g[src0 + 2 * wx + 1]
                                + g[src1 + 2 * wx]
                                + g[src1 + 2 * wx + 1];
                        }
                    }
                }
                accumulate(grads, input, &dx);
            }
        }

        Op::BceWithLogits { logits, targets } => {
            if logits.requires_grad() {
                let l = logits.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(l.iter())
                    .zip(targets.iter())
                    .map(|((&gv, &lv), &tv)| gv * (sigmoid_scalar(lv) - tv))
                    .collect();
                drop(l);
                accumulate(grads, logits, &dx);
            }
        }

        Op::SmoothL1 { pred, targets } => {
            if pred.requires_grad() {
                let p = pred.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(p.iter())
                    .zip(targets.iter())
                    .map(|((&gv, &pv), &tv)| gv * (pv - tv).clamp(-1.0, 1.0))
                    .collect();
                drop(p);
                accumulate(grads, pred, &dx);
            }
        }
    }
}
