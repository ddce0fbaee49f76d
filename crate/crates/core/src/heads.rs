//! Prediction heads: a lesion-score head fed by original-box
//! descriptors and a box-refinement head fed by enlarged-box
//! descriptors. Both are two-layer perceptrons over the flattened
//! descriptor, batched across regions.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusedDescriptor, Origin};
use crate::nn::LinearLayer;
use crate::tensor::Tensor;

/// Flatten same-origin descriptors into a `[N, C*P*P]` batch.
fn batch(descriptors: &[FusedDescriptor], want: Origin) -> Result<Tensor> {
    if descriptors.is_empty() {
        return Err(Error::ShapeMismatch("no descriptors to score".into()));
    }
    let mut rows = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        if d.origin != want {
            return Err(Error::OriginMismatch(format!(
                "head for {want} features received {} features",
                d.origin
            )));
        }
        rows.push(d.features.reshape(&[1, d.features.numel()])?);
    }
    Tensor::concat_rows(&rows)
}

/// Two-layer perceptron `[N, in] -> [N, out]` with a ReLU between.
struct Mlp {
    hidden: LinearLayer,
    out: LinearLayer,
}

impl Mlp {
    fn new(rng: &mut impl Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
        Mlp {
            hidden: LinearLayer::new(rng, in_dim, hidden),
            // Small final scale so initial predictions are near zero.
            out: LinearLayer::with_std(rng, hidden, out_dim, 0.01),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu())
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        self.hidden.collect(&format!("{name}.hidden"), out);
        self.out.collect(&format!("{name}.out"), out);
    }
}

fn descriptor_dim(cfg: &RunConfig) -> usize {
    cfg.descriptor_channels * cfg.roi_pool_size * cfg.roi_pool_size
}

/// Lesion-presence logits from original-box descriptors.
pub struct ScoreHead {
    mlp: Mlp,
}

impl ScoreHead {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> ScoreHead {
        ScoreHead { mlp: Mlp::new(rng, descriptor_dim(cfg), cfg.head_hidden, 1) }
    }

    /// `N` descriptors -> `[N]` logits.
    pub fn forward(&self, descriptors: &[FusedDescriptor]) -> Result<Tensor> {
        let x = batch(descriptors, Origin::Original)?;
        let n = descriptors.len();
        self.mlp.forward(&x)?.reshape(&[n])
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.mlp.collect("score_head", out);
    }
}

/// Box offsets from enlarged-box descriptors.
pub struct BoxHead {
    mlp: Mlp,
}

impl BoxHead {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> BoxHead {
        BoxHead { mlp: Mlp::new(rng, descriptor_dim(cfg), cfg.head_hidden, 4) }
    }

    /// `N` descriptors -> `[N, 4]` offsets `(dx, dy, dw, dh)`.
    pub fn forward(&self, descriptors: &[FusedDescriptor]) -> Result<Tensor> {
        let x = batch(descriptors, Origin::Enlarged)?;
        self.mlp.forward(&x)
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.mlp.collect("box_head", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.descriptor_channels = 3;
        cfg.roi_pool_size = 2;
        cfg.head_hidden = 5;
        cfg
    }

    fn descriptor(origin: Origin, fill: f64) -> FusedDescriptor {
        FusedDescriptor { origin, features: Tensor::full(&[3, 2, 2], fill) }
    }

    #[test]
    fn score_head_emits_one_logit_per_region() {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let head = ScoreHead::new(&mut rng, &cfg);
        let ds = vec![descriptor(Origin::Original, 0.1), descriptor(Origin::Original, -0.4)];
        let logits = head.forward(&ds).unwrap();
        assert_eq!(logits.shape(), &[2]);
    }

    #[test]
    fn box_head_emits_four_offsets_per_region() {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let head = BoxHead::new(&mut rng, &cfg);
        let ds = vec![
            descriptor(Origin::Enlarged, 0.3),
            descriptor(Origin::Enlarged, 0.7),
            descriptor(Origin::Enlarged, -0.2),
        ];
        let deltas = head.forward(&ds).unwrap();
        assert_eq!(deltas.shape(), &[3, 4]);
    }

    #[test]
    fn heads_reject_the_wrong_origin() {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let score = ScoreHead::new(&mut rng, &cfg);
        let boxes = BoxHead::new(&mut rng, &cfg);
        let wrong_for_score = vec![descriptor(Origin::Enlarged, 0.5)];
        let wrong_for_box = vec![descriptor(Origin::Original, 0.5)];
        assert!(matches!(
            score.forward(&wrong_for_score).unwrap_err(),
            Error::OriginMismatch(_)
        ));
        assert!(matches!(
            boxes.forward(&wrong_for_box).unwrap_err(),
            Error::OriginMismatch(_)
        ));
    }

    #[test]
    fn batching_matches_single_region_pass() {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let head = ScoreHead::new(&mut rng, &cfg);
        let a = descriptor(Origin::Original, 0.25);
        let b = descriptor(Origin::Original, -0.75);
        let together = head.forward(&[a, b]).unwrap().to_vec();
        let a = descriptor(Origin::Original, 0.25);
        let b = descriptor(Origin::Original, -0.75);
        let one = head.forward(&[a]).unwrap().to_vec();
        let two = head.forward(&[b]).unwrap().to_vec();
        assert!((together[0] - one[0]).abs() < 1e-12);
        assert!((together[1] - two[0]).abs() < 1e-12);
    }
}
