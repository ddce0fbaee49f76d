//! Layer primitives: 2-d convolution and fully-connected layers with
//! fan-in-scaled Gaussian initialization and stable parameter names.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

/// Draw a weight tensor from N(0, std^2).
fn normal_param(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, data).expect("data length matches shape")
}

/// A zero-filled trainable vector, used for biases.
fn zero_param(len: usize) -> Tensor {
    Tensor::param(&[len], vec![0.0; len]).expect("data length matches shape")
}

/// He initialization: std = sqrt(2 / fan_in), suited to ReLU stacks.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// A 2-d convolution over `[C, H, W]` maps with optional bias.
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-initialized convolution with a zero bias.
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2dLayer {
        let std = he_std(in_ch * ksize * ksize);
        Self::with_std(rng, in_ch, out_ch, ksize, stride, padding, std, true)
    }

    /// Convolution with an explicit weight scale; used for output
    /// layers that should start near zero, and for projections that
    /// carry no bias.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        std: f64,
        bias: bool,
    ) -> Conv2dLayer {
        let weight = normal_param(rng, &[out_ch, in_ch, ksize, ksize], std);
        let bias = bias.then(|| zero_param(out_ch));
        Conv2dLayer { weight, bias, stride, padding }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.bias_channel(b),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Append `(name, tensor)` pairs for every parameter.
    pub fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{name}.bias"), b.clone()));
        }
    }
}

/// A fully-connected layer over `[N, in]` row batches.
pub struct LinearLayer {
    /// Stored as `[out, in]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> LinearLayer {
        Self::with_std(rng, in_dim, out_dim, he_std(in_dim))
    }

    pub fn with_std(rng: &mut impl Rng, in_dim: usize, out_dim: usize, std: f64) -> LinearLayer {
        LinearLayer {
            weight: normal_param(rng, &[out_dim, in_dim], std),
            bias: zero_param(out_dim),
        }
    }

    /// `x [N, in] -> [N, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.transpose2()?)?.bias_row(&self.bias)
    }

    pub fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.weight"), self.weight.clone()));
        out.push((format!("{name}.bias"), self.bias.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn conv_layer_shapes_and_names() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let layer = Conv2dLayer::new(&mut rng, 3, 8, 3, 1, 1);
        let x = Tensor::zeros(&[3, 16, 16]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[8, 16, 16]);

        let mut params = Vec::new();
        layer.collect("stage1.block0", &mut params);
        let names: Vec<_> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["stage1.block0.weight", "stage1.block0.bias"]);
    }

    #[test]
    fn conv_without_bias_registers_one_param() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let layer = Conv2dLayer::with_std(&mut rng, 4, 4, 1, 1, 0, 0.01, false);
        let mut params = Vec::new();
        layer.collect("proj", &mut params);
        assert_eq!(params.len(), 1);
        assert_eq!(params[0].0, "proj.weight");
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let layer = LinearLayer::new(&mut rng, 3, 2);
        layer.bias.set_data(vec![0.5, -0.5]).unwrap();
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        let w = layer.weight.to_vec();
        let want = [
            w[0] + 2.0 * w[1] + 3.0 * w[2] + 0.5,
            w[3] + 2.0 * w[4] + 3.0 * w[5] - 0.5,
        ];
        let got = y.to_vec();
        assert!((got[0] - want[0]).abs() < 1e-12);
        assert!((got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn init_scale_tracks_fan_in() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // Large fan-in => smaller weights, on average.
        let wide = Conv2dLayer::new(&mut rng, 512, 4, 3, 1, 1);
        let narrow = Conv2dLayer::new(&mut rng, 2, 4, 3, 1, 1);
        let rms = |t: &Tensor| {
            let v = t.to_vec();
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(rms(&wide.weight) < rms(&narrow.weight) / 4.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let make = || {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            Conv2dLayer::new(&mut rng, 3, 3, 3, 1, 1).weight.to_vec()
        };
        assert_eq!(make(), make());
    }
}
