//! Adam with linear warmup and cosine decay.

use alloc::vec::Vec;

use rand::seq::index::sample;

use super::gradient::{accuracy, gradient, mean_loss, mse};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::model::{AttentionConfig, AttentionWeights, Dataset, Example, Task};
use crate::random::{seeded, seeded_stream};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub warmup_steps: usize,
    pub cosine_decay: bool,
}

impl Schedule {
    /// Multiplier on the base learning rate at `step` (0-based) of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || total <= self.warmup_steps {
            return 1.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub task: Task,
    pub seed: u64,
    pub adam: AdamParams,
    /// Record the full-data loss every this many steps (and at the end).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(task: Task, steps: usize) -> Self {
        Self {
            steps,
            batch_size: 256,
            learning_rate: 1e-3,
            schedule: Schedule {
                warmup_steps: steps / 20,
                cosine_decay: true,
            },
            task,
            seed: 0,
            adam: AdamParams::default(),
            log_every: (steps / 50).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(arg_err!("steps, batch size and log interval must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(arg_err!("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    /// `(step, mean loss over the whole dataset)`.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub steps: usize,
    pub adam: AdamParams,
    /// Filled in by callers that have a clock.
    pub wall_time_secs: Option<f64>,
}

impl TrainReport {
    /// Accuracy for classification, MSE for regression.
    pub fn metric(&self) -> (&'static str, f64) {
        match (self.accuracy, self.mse) {
            (Some(a), _) => ("accuracy", a),
            (None, Some(m)) => ("mse", m),
            _ => ("loss", self.final_loss),
        }
    }
}

fn evaluate(w: &AttentionWeights, cfg: &AttentionConfig, all: &[&Example], task: Task) -> Result<(f64, Option<f64>, Option<f64>)> {
    let loss = mean_loss(w, cfg, all, task)?;
    Ok(match task {
        Task::Classification { .. } => (loss, Some(accuracy(w, cfg, all)?), None),
        Task::Regression => (loss, None, Some(mse(w, cfg, all)?)),
    })
}

/// Train from a seeded random initialisation to memorize `data`.
pub fn train_memorize(data: &Dataset, cfg: &AttentionConfig, tcfg: &TrainConfig) -> Result<(AttentionWeights, TrainReport)> {
    let init = AttentionWeights::random(cfg, &mut seeded(tcfg.seed));
    train_from(init, data, cfg, tcfg)
}

/// Train starting from the given weights.
pub fn train_from(
    mut w: AttentionWeights,
    data: &Dataset,
    cfg: &AttentionConfig,
    tcfg: &TrainConfig,
) -> Result<(AttentionWeights, TrainReport)> {
    tcfg.validate()?;
    w.validate(cfg)?;
    let dims = data.dims();
    if dims.d != cfg.d || dims.d_out != cfg.d_out {
        return Err(dim_err!("dataset (d={}, d_out={}) does not fit the model", dims.d, dims.d_out));
    }
    let all: Vec<&Example> = data.examples().iter().collect();
    let mut batch_rng = seeded_stream(tcfg.seed, 1);
    let full = tcfg.batch_size >= all.len();

    let sizes: Vec<usize> = w.matrices().iter().map(|m| m.as_slice().len()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&s| alloc::vec![0.0; s]).collect();
    let mut m2 = m1.clone();
    let AdamParams { beta1, beta2, eps } = tcfg.adam;
    let (mut b1t, mut b2t) = (1.0, 1.0);

    let mut losses = Vec::new();
    let mut batch: Vec<&Example> = Vec::with_capacity(tcfg.batch_size.min(all.len()));
    for step in 0..tcfg.steps {
        let (loss, g) = if full {
            gradient(&w, cfg, &all, tcfg.task)?
        } else {
            batch.clear();
            batch.extend(sample(&mut batch_rng, all.len(), tcfg.batch_size).into_iter().map(|i| all[i]));
            gradient(&w, cfg, &batch, tcfg.task)?
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        b1t *= beta1;
        b2t *= beta2;
        let lr = tcfg.learning_rate * tcfg.schedule.factor(step, tcfg.steps);
        for (k, (p, gm)) in w.matrices_mut().into_iter().zip(g.matrices()).enumerate() {
            let (mk, vk) = (&mut m1[k], &mut m2[k]);
            for (i, (x, &gi)) in p.as_mut_slice().iter_mut().zip(gm.as_slice()).enumerate() {
                mk[i] = beta1 * mk[i] + (1.0 - beta1) * gi;
                vk[i] = beta2 * vk[i] + (1.0 - beta2) * gi * gi;
                let mhat = mk[i] / (1.0 - b1t);
                let vhat = vk[i] / (1.0 - b2t);
                *x -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        if (step + 1) % tcfg.log_every == 0 && step + 1 != tcfg.steps {
            let l = mean_loss(&w, cfg, &all, tcfg.task)?;
            if !l.is_finite() {
                return Err(Error::Diverged { step });
            }
            losses.push((step + 1, l));
        }
    }
    let (final_loss, acc, err) = evaluate(&w, cfg, &all, tcfg.task)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: tcfg.steps });
    }
    losses.push((tcfg.steps, final_loss));
    Ok((
        w,
        TrainReport {
            losses,
            final_loss,
            accuracy: acc,
            mse: err,
            steps: tcfg.steps,
            adam: tcfg.adam,
            wall_time_secs: None,
        },
    ))
}
