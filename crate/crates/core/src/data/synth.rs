//! Synthetic scan generator.
//!
//! Each scan is a noisy grayscale image. A lesion is a Gaussian-profile
//! ellipse whose peak amplitude sits well above the noise level; its
//! ground-truth box is the ellipse's bounding box. Scans also carry a
//! few faint distractor blobs below the noise level so that "any bright
//! pixel" is not a working detector. Generation is fully determined by
//! the seed: the same call produces byte-identical files.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{save_annotations, save_gray8, Annotation};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::util::write_atomic;

/// Generator knobs. Defaults produce a learnable but non-trivial task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenParams {
    /// Square image side in pixels.
    pub side: usize,
    /// Fraction of images that contain a lesion.
    pub tumor_fraction: f64,
    /// Mean background intensity.
    pub background: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Lesion peak amplitude above the background (scaled 0.8-1.2x
    /// per lesion); must stay above the noise even at the low end.
    pub contrast: f64,
    /// Peak amplitude of distractor blobs; must stay below the noise.
    pub distractor_amplitude: f64,
    /// Up to this many distractors per image.
    pub max_distractors: usize,
    /// Bounding-box longest side is drawn from a truncated normal.
    pub diameter_min: f64,
    pub diameter_max: f64,
    pub diameter_mean: f64,
    pub diameter_std: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            side: 256,
            tumor_fraction: 0.75,
            background: 0.35,
            noise_sigma: 0.05,
            contrast: 0.30,
            distractor_amplitude: 0.03,
            max_distractors: 3,
            diameter_min: 15.0,
            diameter_max: 104.0,
            diameter_mean: 50.0,
            diameter_std: 15.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.side < 32 {
            return Err(Error::Config(format!("side {} too small", self.side)));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return Err(Error::Config(format!(
                "tumor_fraction {} outside [0,1]",
                self.tumor_fraction
            )));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::Config("noise_sigma must be positive".into()));
        }
        if self.contrast * 0.8 <= self.noise_sigma {
            return Err(Error::Config(format!(
                "lesion contrast {} (min 0.8x) must exceed noise sigma {}",
                self.contrast, self.noise_sigma
            )));
        }
        if self.distractor_amplitude >= self.noise_sigma {
            return Err(Error::Config(format!(
                "distractor amplitude {} must stay below noise sigma {}",
                self.distractor_amplitude, self.noise_sigma
            )));
        }
        if !(self.diameter_min > 0.0
            && self.diameter_min <= self.diameter_mean
            && self.diameter_mean <= self.diameter_max)
        {
            return Err(Error::Config("diameter bounds out of order".into()));
        }
        if self.diameter_max > self.side as f64 - 8.0 {
            return Err(Error::Config(format!(
                "diameter_max {} leaves no margin on a {}px image",
                self.diameter_max, self.side
            )));
        }
        Ok(())
    }
}

/// What `generate_dataset` wrote.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub train_with_lesion: usize,
    pub test_with_lesion: usize,
    pub params: GenParams,
}

struct Blob {
    cx: f64,
    cy: f64,
    // Semi-axes of the bounding box.
    ax: f64,
    ay: f64,
    amplitude: f64,
}

impl Blob {
    fn bbox(&self) -> BBox {
        BBox::new(
            self.cx - self.ax,
            self.cy - self.ay,
            self.cx + self.ax,
            self.cy + self.ay,
        )
        .expect("positive semi-axes")
    }

    /// Add the Gaussian profile onto the pixel buffer. The profile hits
    /// `amplitude * exp(-2)` at the box edge, effectively vanishing a
    /// little beyond it.
    fn render(&self, px: &mut [f64], side: usize) {
        let x0 = ((self.cx - 2.0 * self.ax).floor().max(0.0)) as usize;
        let x1 = ((self.cx + 2.0 * self.ax).ceil().min(side as f64)) as usize;
        let y0 = ((self.cy - 2.0 * self.ay).floor().max(0.0)) as usize;
        let y1 = ((self.cy + 2.0 * self.ay).ceil().min(side as f64)) as usize;
        for y in y0..y1 {
            let dy = (y as f64 + 0.5 - self.cy) / self.ay;
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - self.cx) / self.ax;
                px[y * side + x] += self.amplitude * (-2.0 * (dx * dx + dy * dy)).exp();
            }
        }
    }
}

fn draw_lesion(rng: &mut ChaCha20Rng, p: &GenParams) -> Blob {
    let normal = Normal::new(p.diameter_mean, p.diameter_std).expect("std > 0");
    let major = loop {
        let d: f64 = normal.sample(rng);
        if d >= p.diameter_min && d <= p.diameter_max {
            break d;
        }
    };
    let aspect = Uniform::new(0.6, 1.0).sample(rng);
    let minor = major * aspect;
    let (w, h) = if rng.gen_bool(0.5) {
        (major, minor)
    } else {
        (minor, major)
    };
    let margin = 2.0;
    let cx = Uniform::new(w / 2.0 + margin, p.side as f64 - w / 2.0 - margin).sample(rng);
    let cy = Uniform::new(h / 2.0 + margin, p.side as f64 - h / 2.0 - margin).sample(rng);
    let amplitude = p.contrast * Uniform::new(0.8, 1.2).sample(rng);
    Blob {
        cx,
        cy,
        ax: w / 2.0,
        ay: h / 2.0,
        amplitude,
    }
}

fn draw_distractor(rng: &mut ChaCha20Rng, p: &GenParams) -> Blob {
    let d = Uniform::new(10.0, 40.0).sample(rng);
    let aspect = Uniform::new(0.6, 1.0).sample(rng);
    let margin = 2.0;
    let lo = d / 2.0 + margin;
    let hi = p.side as f64 - d / 2.0 - margin;
    Blob {
        cx: Uniform::new(lo, hi).sample(rng),
        cy: Uniform::new(lo, hi).sample(rng),
        ax: d / 2.0,
        ay: d * aspect / 2.0,
        amplitude: p.distractor_amplitude,
    }
}

fn render_scan(rng: &mut ChaCha20Rng, p: &GenParams, with_lesion: bool) -> (Vec<u8>, Vec<BBox>) {
    let side = p.side;
    let noise = Normal::new(0.0, p.noise_sigma).expect("sigma > 0");
    let mut px: Vec<f64> = (0..side * side)
        .map(|_| p.background + noise.sample(rng))
        .collect();

    let mut boxes = Vec::new();
    if with_lesion {
        let blob = draw_lesion(rng, p);
        boxes.push(blob.bbox());
        blob.render(&mut px, side);
    }
    let n_distractors = rng.gen_range(0..=p.max_distractors);
    for _ in 0..n_distractors {
        draw_distractor(rng, p).render(&mut px, side);
    }

    let bytes = px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (bytes, boxes)
}

/// Per-split lesion assignment: an exact count of lesion images, placed
/// by a seeded shuffle.
fn lesion_flags(rng: &mut ChaCha20Rng, n: usize, fraction: f64) -> Vec<bool> {
    let with = (n as f64 * fraction).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < with).collect();
    flags.shuffle(rng);
    flags
}

/// Generate `train_n` + `test_n` scans under `out_dir`, along with
/// annotation files and a metadata record. Deterministic in `seed`.
pub fn generate_dataset(
    out_dir: &Path,
    train_n: usize,
    test_n: usize,
    seed: u64,
    params: &GenParams,
) -> Result<DatasetSummary> {
    params.validate()?;
    if train_n == 0 || test_n == 0 {
        return Err(Error::Config(
            "both splits need at least one image".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut summary = DatasetSummary {
        seed,
        train_images: train_n,
        test_images: test_n,
        train_with_lesion: 0,
        test_with_lesion: 0,
        params: params.clone(),
    };

    for (split, n) in [("train", train_n), ("test", test_n)] {
        let flags = lesion_flags(&mut rng, n, params.tumor_fraction);
        let mut annotations = Vec::with_capacity(n);
        let mut with_lesion = 0;
        for (idx, &flag) in flags.iter().enumerate() {
            let (pixels, boxes) = render_scan(&mut rng, params, flag);
            let rel = format!("{split}/{idx:05}.png");
            save_gray8(&out_dir.join(&rel), &pixels, params.side, params.side)?;
            with_lesion += usize::from(!boxes.is_empty());
            annotations.push(Annotation {
                image: rel,
                boxes: boxes.iter().map(|b| b.corners()).collect(),
            });
        }
        save_annotations(&out_dir.join(format!("{split}.jsonl")), &annotations)?;
        if split == "train" {
            summary.train_with_lesion = with_lesion;
        } else {
            summary.test_with_lesion = with_lesion;
        }
    }

    write_atomic(
        &out_dir.join("meta.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}
