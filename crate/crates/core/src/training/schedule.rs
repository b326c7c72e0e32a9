use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::Iterations;

/// Warmup length, either as a fraction of all steps or absolute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Warmup {
    Ratio(f64),
    Steps(usize),
}

/// How long to train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Epochs(f64),
    Tokens(u64),
    Steps(usize),
}

/// Optimizer and learning-rate settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub m: usize,
    pub b: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup: Warmup,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_tokens: usize,
    pub total: Budget,
}

impl TrainSchedule {
    pub const PRESETS: [&'static str; 3] = ["small-110M", "small-1.1B", "large-1.1B"];

    /// Named recipes: `small-110M`, `small-1.1B`, `large-1.1B`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            m: 7,
            b: 2,
            max_lr: 6.75e-4,
            min_lr: 0.0,
            warmup: Warmup::Ratio(0.015),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_tokens: 32 * 1024,
            total: Budget::Epochs(2.0),
        };
        match name {
            "small-110M" => Ok(base),
            "small-1.1B" => Ok(Self {
                max_lr: 3e-4,
                batch_tokens: 256 * 1024,
                total: Budget::Epochs(1.0),
                ..base
            }),
            "large-1.1B" => Ok(Self {
                max_lr: 4e-4,
                min_lr: 4e-5,
                beta2: 0.95,
                warmup: Warmup::Steps(200),
                batch_tokens: 2 * 1024 * 1024,
                total: Budget::Tokens(100_000_000_000),
                ..base
            }),
            other => Err(Error::config(format!(
                "unknown schedule preset `{other}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Desk-scale schedule for a fixed number of steps.
    pub fn for_steps(steps: usize, max_lr: f64, batch_tokens: usize) -> Self {
        Self {
            max_lr,
            min_lr: max_lr * 0.1,
            warmup: Warmup::Steps((steps / 20).max(1)),
            batch_tokens,
            total: Budget::Steps(steps),
            ..Self::preset("small-110M").expect("known preset")
        }
    }

    pub fn iterations(&self) -> Iterations {
        Iterations::new(self.m, self.b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::config("b must be at least 1"));
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::config("need 0 <= min_lr <= max_lr"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("grad_clip and eps must be positive, weight_decay non-negative"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        if let Warmup::Ratio(r) = self.warmup {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config("warmup ratio must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Optimizer steps implied by the budget for a corpus of
    /// `corpus_tokens` tokens.
    pub fn total_steps(&self, corpus_tokens: u64) -> Result<usize> {
        let per_step = self.batch_tokens as f64;
        let steps = match self.total {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => (e * corpus_tokens as f64 / per_step).ceil() as usize,
            Budget::Tokens(t) => (t as f64 / per_step).ceil() as usize,
        };
        if steps == 0 {
            return Err(Error::config("training budget amounts to zero steps"));
        }
        let warmup = self.warmup_steps(steps);
        if warmup > steps {
            return Err(Error::config(format!("warmup ({warmup}) exceeds total steps ({steps})")));
        }
        Ok(steps)
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        match self.warmup {
            Warmup::Ratio(r) => (r * total_steps as f64).round() as usize,
            Warmup::Steps(s) => s,
        }
    }

    /// Linear warmup to `max_lr`, then cosine decay reaching `min_lr` on the
    /// final step.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup_steps(total_steps);
        if step < warmup {
            return self.max_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total_steps.saturating_sub(1 + warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
