//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! A box is the half-open region `[x1, x2) x [y1, y2)` with `x2 > x1`
//! and `y2 > y1`; width, height and area follow directly. Integer
//! coordinates therefore cover whole pixels exactly, which is what the
//! rasterization oracle in the metrics tests relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validated axis-aligned box. `Copy`; construction is the only gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corner ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "empty extent ({x1}, {y1}, {x2}, {y2}): need x2 > x1 and y2 > y1"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Longest side; this is the "diameter" the synthetic generator bounds.
    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }

    /// Intersect with the image rectangle `[0, w] x [0, h]`.
    /// `None` when nothing (with positive area) remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        let x2 = self.x2.clamp(0.0, w);
        let y2 = self.y2.clamp(0.0, h);
        BBox::new(x1, y1, x2, y2).ok()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}
