//! Dataset generation, storage and loading.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! root/
//!   meta.json      generator parameters, seed, split sizes
//!   train.jsonl    one {"image", "boxes"} record per training image
//!   test.jsonl     same for the held-out split
//!   train/00000.png ...
//!   test/00000.png ...
//! ```
//!
//! Images are 8-bit grayscale PNGs; in memory they become `[1,H,W]`
//! tensors with values in `[0,1]`. Boxes are `[x1,y1,x2,y2]` in pixels.

pub mod flips;
pub mod synth;

use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::write_atomic;

/// One line of an annotation file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    /// Image path relative to the dataset root.
    pub image: String,
    /// Ground-truth boxes as `[x1, y1, x2, y2]`.
    pub boxes: Vec<[f64; 4]>,
}

/// One image with its ground truth, pixels held as the stored 8-bit
/// values to keep memory modest.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    /// The image as a `[1,H,W]` tensor in `[0,1]`.
    pub fn image(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(&[1, self.height, self.width], data).expect("stored pixel count")
    }

    pub fn has_lesion(&self) -> bool {
        !self.boxes.is_empty()
    }
}

/// A loaded split of a dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load `root/<split>.jsonl` and every image it references.
    pub fn load(root: &Path, split: &str) -> Result<Dataset> {
        let ann_path = root.join(format!("{split}.jsonl"));
        let file = std::fs::File::open(&ann_path).map_err(|e| {
            Error::Data(format!("cannot open {}: {e}", ann_path.display()))
        })?;
        let reader = std::io::BufReader::new(file);
        let mut samples = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ann: Annotation = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!(
                    "{}:{}: bad annotation: {e}",
                    ann_path.display(),
                    line_no + 1
                ))
            })?;
            let image_path = root.join(&ann.image);
            let (pixels, width, height) = load_gray8(&image_path)?;
            let boxes = ann
                .boxes
                .iter()
                .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| {
                    Error::Data(format!("{}:{}: {e}", ann_path.display(), line_no + 1))
                })?;
            samples.push(Sample {
                image_path,
                width,
                height,
                pixels,
                boxes,
            });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "{} holds no samples",
                ann_path.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            split: split.to_string(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Read an 8-bit grayscale PNG.
pub fn load_gray8(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), w, h))
}

/// Encode pixels as an 8-bit grayscale PNG and write it atomically.
pub fn save_gray8(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} image needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut bytes: Vec<u8> = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    image::ImageEncoder::write_image(
        encoder,
        pixels,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )?;
    write_atomic(path, &bytes)
}

/// Serialize annotations as JSON-lines and write them atomically.
pub fn save_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut out = String::new();
    for ann in annotations {
        out.push_str(&serde_json::to_string(ann)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let pixels: Vec<u8> = (0..64u32).map(|v| (v * 4) as u8).collect();
        save_gray8(&path, &pixels, 8, 8).unwrap();
        let (back, w, h) = load_gray8(&path).unwrap();
        assert_eq!((w, h), (8, 8));
        assert_eq!(back, pixels);
    }

    #[test]
    fn dataset_loads_annotations_and_images() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("train")).unwrap();
        save_gray8(&dir.path().join("train/00000.png"), &[128; 64 * 64], 64, 64).unwrap();
        save_gray8(&dir.path().join("train/00001.png"), &[64; 64 * 64], 64, 64).unwrap();
        let anns = vec![
            Annotation {
                image: "train/00000.png".into(),
                boxes: vec![[4.0, 6.0, 20.0, 30.0]],
            },
            Annotation {
                image: "train/00001.png".into(),
                boxes: vec![],
            },
        ];
        save_annotations(&dir.path().join("train.jsonl"), &anns).unwrap();

        let ds = Dataset::load(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.samples[0].has_lesion());
        assert!(!ds.samples[1].has_lesion());
        let img = ds.samples[0].image();
        assert_eq!(img.shape(), [1, 64, 64]);
        assert!((img.at(&[0, 0, 0]) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn missing_annotation_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(dir.path(), "train"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn malformed_annotation_line_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.jsonl"), "{not json}\n").unwrap();
        let err = Dataset::load(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains(":1:"), "got: {err}");
    }
}
