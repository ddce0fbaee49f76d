//! Training loop: epoch-shuffled single-image steps with optional flip
//! augmentation, a three-phase learning-rate schedule, and SGD with
//! momentum. Fully deterministic for a given configuration and dataset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::data::flips::{augment_flips, FlipMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Detector, LossBreakdown};
use crate::optim::{LrSchedule, Sgd};

/// One log record, emitted every `log_every` iterations (and on the
/// first), after the optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct TrainEvent {
    /// 1-based iteration count.
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl std::fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iter={} lr={:e} {}", self.iteration, self.lr, self.loss)
    }
}

/// Train a fresh detector on a dataset. The observer sees periodic
/// loss records; pass `|_| {}` to train silently.
pub fn train(
    dataset: &Dataset,
    cfg: &RunConfig,
    mut observe: impl FnMut(&TrainEvent),
) -> Result<Detector> {
    cfg.validate()?;
    for s in &dataset.samples {
        if s.width != cfg.image_side || s.height != cfg.image_side {
            return Err(Error::Data(format!(
                "{} is {}x{}, configuration wants {}x{}",
                s.image_path.display(),
                s.width,
                s.height,
                cfg.image_side,
                cfg.image_side
            )));
        }
    }

    let model = Detector::new(cfg)?;
    let params = model.named_parameters();
    let mut opt = Sgd::new(cfg);
    let schedule = LrSchedule::new(cfg);
    // Distinct stream from weight init.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len(); // force a shuffle before first use

    for iteration in 0..cfg.iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let sample = &dataset.samples[order[cursor]];
        cursor += 1;

        let (image, boxes) = if cfg.flip_augment {
            let choice = rng.gen_range(0..=FlipMode::DEFAULT_SET.len());
            match choice.checked_sub(1) {
                None => (sample.image(), sample.boxes.clone()),
                Some(i) => augment_flips(&sample.image(), &sample.boxes, FlipMode::DEFAULT_SET[i])?,
            }
        } else {
            (sample.image(), sample.boxes.clone())
        };

        let loss = model.backward_step(&image, &boxes, &mut rng)?;
        let lr = schedule.rate(iteration);
        opt.step(&params, lr, iteration)?;

        let count = iteration + 1;
        if count == 1 || count % cfg.log_every == 0 || count == cfg.iterations {
            observe(&TrainEvent { iteration: count, lr, loss });
        }
    }
    Ok(model)
}
