use crate::error::{Result, TaqError};
use crate::linalg::SeededRng;
use crate::scalar::Scalar;

use super::backward::Grads;
use super::tasks::{sample_item, training_sequence, TaskKind};
use super::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub lr: f64,
    /// Sequences per step.
    pub batch: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Learning rate at the last step as a fraction of `lr`; decays linearly.
    pub lr_final_frac: f64,
    /// Steps of linear warmup from zero.
    pub warmup: usize,
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    /// Steps averaged into the reported initial and final running losses.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            steps: 3000,
            lr: 1e-3,
            batch: 8,
            clip: 1.0,
            lr_final_frac: 0.1,
            warmup: 200,
            seed: 0,
            tasks: TaskKind::ALL.to_vec(),
            window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0)
            || self.clip.is_nan()
            || self.clip <= 0.0
            || !(0.0..=1.0).contains(&self.lr_final_frac)
            || self.batch == 0
            || self.tasks.is_empty()
        {
            return Err(TaqError::InvalidConfig(format!(
                "bad training config: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss over the first `window` steps.
    pub initial_loss: f64,
    /// Mean loss over the last `window` steps.
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Trains `model` in place with minibatch SGD on freshly sampled items.
pub fn train_toy<T: Scalar>(model: &mut ToyModel<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.param_slices_mut()?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv = T::of(1.0 / cfg.batch as f64);
    let mut m1 = Grads::zeros_like(model);
    let mut m2 = Grads::zeros_like(model);
    for step in 0..cfg.steps {
        let mut total = Grads::zeros_like(model);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let item = sample_item(&cfg.tasks, model.cfg.vocab, &mut rng);
            let (seq, targets) = training_sequence(&item);
            loss += model.accumulate_grad(&seq, &targets, inv, &mut total)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(TaqError::TrainingDiverged { step });
        }
        losses.push(loss);
        let norm = total.norm().as_f64();
        if !norm.is_finite() {
            return Err(TaqError::TrainingDiverged { step });
        }
        let factor = if norm > cfg.clip {
            cfg.clip / norm
        } else {
            1.0
        };
        let progress = step as f64 / cfg.steps.max(2).saturating_sub(1) as f64;
        let warm = if step < cfg.warmup {
            (step + 1) as f64 / cfg.warmup as f64
        } else {
            1.0
        };
        let lr = warm * cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * progress);
        match cfg.optimizer {
            Optimizer::Sgd => {
                let step_size = T::of(-lr * factor);
                for (p, g) in model.param_slices_mut()?.into_iter().zip(&total.slices) {
                    for (x, &d) in p.iter_mut().zip(g) {
                        *x += step_size * d;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let (b1, b2, f) = (T::of(beta1), T::of(beta2), T::of(factor));
                let (c1, c2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
                let lr_t = T::of(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
                let eps = T::of(eps);
                let params = model.param_slices_mut()?;
                for (((p, g), a), v) in params
                    .into_iter()
                    .zip(&total.slices)
                    .zip(&mut m1.slices)
                    .zip(&mut m2.slices)
                {
                    for i in 0..p.len() {
                        let d = g[i] * f;
                        a[i] = b1 * a[i] + c1 * d;
                        v[i] = b2 * v[i] + c2 * d * d;
                        p[i] -= lr_t * a[i] / (v[i].sqrt() + eps);
                    }
                }
            }
        }
    }
    let w = cfg.window.clamp(1, cfg.steps.max(1));
    let mean = |s: &[f64]| {
        if s.is_empty() {
            f64::NAN
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    Ok(TrainReport {
        steps: cfg.steps,
        initial_loss: mean(&losses[..w.min(losses.len())]),
        final_loss: mean(&losses[losses.len().saturating_sub(w)..]),
        losses,
    })
}
