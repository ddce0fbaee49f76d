//! Dependencies block: pairwise attention over every position of a
//! region descriptor, so distant parts of the (enlarged) region inform
//! each other.
//!
//! For a map `x` of shape `[C, H, W]` with `N = H*W` positions:
//! three bias-free 1x1 projections give `f`, `g`, `h` (each `[M, N]`);
//! the attention matrix is `A = softmax_rows(f^T g)` (`[N, N]`, each
//! row a distribution over positions); the aggregated signal is
//! `y = A h^T` (`[N, M]`), projected back by a fourth 1x1 conv and
//! added residually: `z = W_z y + x`. With `W_z = 0` the block is an
//! exact identity.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusedDescriptor, Origin};
use crate::nn::Conv2dLayer;
use crate::tensor::Tensor;

pub struct DependenciesBlock {
    origin: Origin,
    /// Query projection: its pairing with `g` decides who attends to whom.
    pub f: Conv2dLayer,
    /// Key projection.
    pub g: Conv2dLayer,
    /// Value projection: what gets aggregated across positions.
    pub h: Conv2dLayer,
    /// Output restore projection; zero weights make the block an identity.
    pub z: Conv2dLayer,
}

impl DependenciesBlock {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig, origin: Origin) -> DependenciesBlock {
        let c = cfg.descriptor_channels;
        let m = cfg.dc_mid_channels;
        let std = (2.0 / c as f64).sqrt();
        let proj = |rng: &mut _| Conv2dLayer::with_std(rng, c, m, 1, 1, 0, std, false);
        DependenciesBlock {
            origin,
            f: proj(rng),
            g: proj(rng),
            h: proj(rng),
            // Small initial scale: the block starts close to identity.
            z: Conv2dLayer::with_std(rng, m, c, 1, 1, 0, 0.01, false),
        }
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// Attention over positions of `x` (`[C, H, W]`), residual output
    /// of the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("dependencies block wants [C,H,W], got {s:?}")));
        }
        let (h_dim, w_dim) = (s[1], s[2]);
        let n = h_dim * w_dim;
        let m = self.f.out_channels();

        let f = self.f.forward(x)?.reshape(&[m, n])?;
        let g = self.g.forward(x)?.reshape(&[m, n])?;
        let h = self.h.forward(x)?.reshape(&[m, n])?;

        let logits = f.transpose2()?.matmul(&g)?; // [N, N]
        let attention = logits.softmax_rows()?;
        let y = attention.matmul(&h.transpose2()?)?; // [N, M]
        let y_map = y.transpose2()?.reshape(&[m, h_dim, w_dim])?;
        self.z.forward(&y_map)?.add(x)
    }

    /// Apply to a descriptor, insisting the origins agree.
    pub fn attach(&self, d: &FusedDescriptor) -> Result<FusedDescriptor> {
        if d.origin != self.origin {
            return Err(Error::OriginMismatch(format!(
                "dependencies block for {} features received {} features",
                self.origin, d.origin
            )));
        }
        Ok(FusedDescriptor { origin: d.origin, features: self.forward(&d.features)? })
    }

    /// The attention matrix alone (`[N, N]`), for inspection.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let n = s[1] * s[2];
        let m = self.f.out_channels();
        let f = self.f.forward(x)?.reshape(&[m, n])?;
        let g = self.g.forward(x)?.reshape(&[m, n])?;
        f.transpose2()?.matmul(&g)?.softmax_rows()
    }

    pub fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        self.f.collect(&format!("{name}.f"), out);
        self.g.collect(&format!("{name}.g"), out);
        self.h.collect(&format!("{name}.h"), out);
        self.z.collect(&format!("{name}.z"), out);
    }
}
