//! Flip augmentations. All modes are involutions: applying one twice
//! reproduces the original image and boxes exactly.
//!
//! Box corners live in continuous coordinates on `[0, W] x [0, H]`, so a
//! horizontal flip maps `x -> W - x` (and swaps the pair to keep
//! `x1 < x2`); the pixel grid maps `x -> W - 1 - x`, which is the same
//! reflection expressed at pixel centers.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipMode {
    Horizontal,
    Vertical,
    /// Transpose about the main diagonal; square images only.
    Diagonal,
    /// Transpose about the anti-diagonal; square images only.
    /// Available but not part of the default augmentation set.
    AntiDiagonal,
}

impl FlipMode {
    /// The three modes applied during training by default.
    pub const DEFAULT_SET: [FlipMode; 3] =
        [FlipMode::Horizontal, FlipMode::Vertical, FlipMode::Diagonal];
}

/// Flip a `[1,H,W]` image.
pub fn flip_image(image: &Tensor, mode: FlipMode) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "flip_image wants [1,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if matches!(mode, FlipMode::Diagonal | FlipMode::AntiDiagonal) && h != w {
        return Err(Error::Data(format!(
            "diagonal flip needs a square image, got {h}x{w}"
        )));
    }
    let src = image.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            let (ny, nx) = match mode {
                FlipMode::Horizontal => (y, w - 1 - x),
                FlipMode::Vertical => (h - 1 - y, x),
                FlipMode::Diagonal => (x, y),
                FlipMode::AntiDiagonal => (w - 1 - x, h - 1 - y),
            };
            out[ny * w + nx] = v;
        }
    }
    drop(src);
    Tensor::new(&[1, h, w], out)
}

/// Map a box through the same flip, for an image of size `w x h`.
pub fn flip_box(b: &BBox, w: f64, h: f64, mode: FlipMode) -> Result<BBox> {
    match mode {
        FlipMode::Horizontal => BBox::new(w - b.x2, b.y1, w - b.x1, b.y2),
        FlipMode::Vertical => BBox::new(b.x1, h - b.y2, b.x2, h - b.y1),
        FlipMode::Diagonal => BBox::new(b.y1, b.x1, b.y2, b.x2),
        FlipMode::AntiDiagonal => BBox::new(w - b.y2, h - b.x2, w - b.y1, h - b.x1),
    }
}

/// Flip an image and its ground-truth boxes together.
pub fn augment_flips(image: &Tensor, boxes: &[BBox], mode: FlipMode) -> Result<(Tensor, Vec<BBox>)> {
    let flipped = flip_image(image, mode)?;
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let boxes = boxes
        .iter()
        .map(|b| flip_box(b, w, h, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok((flipped, boxes))
}
