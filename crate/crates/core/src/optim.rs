//! Training schedule and optimizer: piecewise-constant learning rate
//! over three phases, and SGD with momentum plus decoupled-from-nothing
//! classic L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step learning-rate schedule: the run is split into three phases
/// whose lengths follow the configured ratios; each phase has its own
/// constant rate.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    /// First iteration of phases 2 and 3.
    boundaries: [u64; 2],
    values: [f64; 3],
}

impl LrSchedule {
    pub fn new(cfg: &RunConfig) -> LrSchedule {
        let total: f64 = cfg.lr_phase_ratios.iter().sum();
        let b1 = (cfg.iterations as f64 * cfg.lr_phase_ratios[0] / total).floor() as u64;
        let b2 = (cfg.iterations as f64 * (cfg.lr_phase_ratios[0] + cfg.lr_phase_ratios[1])
            / total)
            .floor() as u64;
        LrSchedule {
            boundaries: [b1, b2],
            values: [cfg.lr_values[0], cfg.lr_values[1], cfg.lr_values[2]],
        }
    }

    /// Rate for a 0-based iteration index.
    pub fn rate(&self, iteration: u64) -> f64 {
        if iteration < self.boundaries[0] {
            self.values[0]
        } else if iteration < self.boundaries[1] {
            self.values[1]
        } else {
            self.values[2]
        }
    }
}

/// SGD with momentum: `v <- m*v + g + wd*w`, `w <- w - lr*v`.
///
/// Velocity is keyed by parameter name so the optimizer state survives
/// parameter re-collection. A parameter without a gradient this step
/// still decays. Non-finite gradients abort with the parameter name.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &RunConfig) -> Sgd {
        Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        iteration: u64,
    ) -> Result<()> {
        for (name, p) in params {
            let grad = p.take_grad();
            if let Some(g) = &grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: name.clone(), iteration });
                }
            }
            let mut w = p.to_vec();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; w.len()]);
            if v.len() != w.len() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer state for {name} has {} entries, parameter has {}",
                    v.len(),
                    w.len()
                )));
            }
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + g + self.weight_decay * w[i];
                w[i] -= lr * v[i];
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}
