//! Training regimes and the MIXER driver.
//!
//! Every regime reduces to the same shape of work: roll the decoder out under
//! some feed plan, produce a logit gradient per step, and hand those to
//! [`crate::model::backward`]. The regimes differ only in the plan and in how
//! the per-step gradients are formed.

mod driver;
mod log;
mod regimes;

pub use driver::{mean_metric, train, train_epoch, EpochRecord, EpochStats, RegimeKind, TrainOptions};
pub use log::{write_metric_log, MetricLogWriter, LOG_HEADER};
pub use regimes::{
    dad_grads, dad_plan, e2e_grads, e2e_plan, example_grads, mixer_grads, mixer_plan, reinforce_grads, xent_grads,
    xent_loss_grads, EpochRegime, ExampleGrads,
};

use crate::error::{Error, Result};
use crate::model::RolloutTrace;
use crate::numkern::dot;

/// Linear reward predictor `r̄ = w·h + b` read off decoder hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRegressor {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BaselineRegressor {
    pub fn zeros(hidden: usize) -> Self {
        BaselineRegressor {
            weights: vec![0.0; hidden],
            bias: 0.0,
        }
    }

    pub fn predict(&self, h: &[f64]) -> f64 {
        dot(&self.weights, h) + self.bias
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    /// Adds the gradient of `(w·h + b − r)²` to `acc` and returns the
    /// prediction.
    pub fn accumulate(&self, h: &[f64], reward: f64, acc: &mut BaselineGrad) -> f64 {
        let pred = self.predict(h);
        let err = pred - reward;
        if acc.weights.is_empty() {
            acc.weights = vec![0.0; self.weights.len()];
        }
        for (g, x) in acc.weights.iter_mut().zip(h) {
            *g += 2.0 * err * x;
        }
        acc.bias += 2.0 * err;
        acc.sq_err += err * err;
        acc.count += 1;
        pred
    }

    /// Gradient step with the mean of the accumulated per-step gradients.
    pub fn apply(&mut self, grad: &BaselineGrad, lr_b: f64) -> Result<()> {
        if grad.count == 0 {
            return Ok(());
        }
        let scale = lr_b / grad.count as f64;
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= scale * g;
        }
        self.bias -= scale * grad.bias;
        if !self.is_finite() {
            return Err(Error::NonFinite("baseline regressor diverged".into()));
        }
        Ok(())
    }
}

/// Summed squared-error gradients of the baseline over some number of steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineGrad {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub sq_err: f64,
    pub count: usize,
}

impl BaselineGrad {
    pub fn merge(&mut self, other: &BaselineGrad) {
        if self.weights.is_empty() {
            self.weights = vec![0.0; other.weights.len()];
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        self.bias += other.bias;
        self.sq_err += other.sq_err;
        self.count += other.count;
    }

    pub fn mse(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sq_err / self.count as f64)
    }
}

/// Predicts `r̄_t` from the hidden state after each step in `steps`, then
/// regresses the baseline toward `reward` on those states. Only the
/// regressor changes. Returns the predictions made before the update.
pub fn baseline_update(
    trace: &RolloutTrace,
    steps: std::ops::Range<usize>,
    reward: f64,
    regressor: &mut BaselineRegressor,
    lr_b: f64,
) -> Result<Vec<f64>> {
    if steps.end > trace.len() {
        return Err(Error::InvalidArgument(format!(
            "baseline steps {steps:?} outside a trace of {} steps",
            trace.len()
        )));
    }
    let mut acc = BaselineGrad::default();
    let preds = steps
        .map(|t| regressor.accumulate(&trace.steps[t].h, reward, &mut acc))
        .collect();
    regressor.apply(&acc, lr_b)?;
    Ok(preds)
}

/// Epoch budget and annealing parameters of every regime.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    /// Epochs of pure XENT before the first mixed phase.
    pub n_xent: usize,
    /// Epochs spent at each mixed value of `s`.
    pub n_xer: usize,
    /// Decrement of the teacher-forced prefix length between phases.
    pub delta: usize,
    /// Unroll length in decoder steps; targets are cropped to fit.
    pub t: usize,
    /// Epochs for the plain XENT, DAD and E2E regimes.
    pub epochs: usize,
    /// DAD ground-truth probability, decayed linearly from `dad_start` to
    /// `dad_end` over `epochs`.
    pub dad_start: f64,
    pub dad_end: f64,
    /// E2E feeds one more trailing step with the k-max mix every
    /// `e2e_every` epochs, starting from none.
    pub e2e_every: usize,
    pub k: usize,
    pub lr: f64,
    /// Learning rate for epochs that mix XENT with REINFORCE; `lr` when
    /// unset.
    pub lr_mixed: Option<f64>,
    pub lr_b: f64,
    pub max_norm: f64,
    pub batch: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            n_xent: 20,
            n_xer: 5,
            delta: 2,
            t: 15,
            epochs: 20,
            dad_start: 1.0,
            dad_end: 0.5,
            e2e_every: 5,
            k: 5,
            lr: 0.2,
            lr_mixed: None,
            lr_b: 0.1,
            max_norm: 10.0,
            batch: 32,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.delta < 1 {
            return bad("delta must be at least 1".into());
        }
        if self.n_xent < 1 || self.n_xer < 1 {
            return bad(format!(
                "n_xent and n_xer must be at least 1 (got {}, {})",
                self.n_xent, self.n_xer
            ));
        }
        if self.t < self.delta {
            return bad(format!(
                "unroll length t={} is shorter than delta={}",
                self.t, self.delta
            ));
        }
        if self.batch < 1 || self.e2e_every < 1 || self.k < 1 {
            return bad("batch, e2e_every and k must be at least 1".into());
        }
        let lr_mixed = self.lr_mixed.unwrap_or(self.lr);
        if !(self.lr > 0.0) || !(lr_mixed > 0.0) || !(self.lr_b > 0.0) || !(self.max_norm > 0.0) {
            return bad("lr, lr_mixed, lr_b and max_norm must be positive".into());
        }
        for p in [self.dad_start, self.dad_end] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("DAD probabilities must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// Teacher-forced prefix lengths visited by MIXER, in order.
    pub fn s_values(&self) -> Vec<usize> {
        s_values(self.t, self.delta)
    }

    pub fn dad_p_truth(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.dad_start;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.dad_start + (self.dad_end - self.dad_start) * frac
    }

    /// Learning rate of an epoch run under `regime`.
    pub fn lr_for(&self, regime: EpochRegime) -> f64 {
        match regime {
            EpochRegime::Mixer { s } if s < self.t => self.lr_mixed.unwrap_or(self.lr),
            _ => self.lr,
        }
    }

    pub fn e2e_mixed_steps(&self, epoch: usize) -> usize {
        epoch / self.e2e_every
    }

    /// Total MIXER epochs: `n_xent` at `s = t`, `n_xer` at every other `s`.
    pub fn mixer_epochs(&self) -> usize {
        let phases = self.s_values();
        phases
            .iter()
            .map(|&s| if s == self.t { self.n_xent } else { self.n_xer })
            .sum()
    }
}

/// `t, t−Δ, t−2Δ, …` while positive, then a closing `1` if the arithmetic
/// sequence skipped it.
pub fn s_values(t: usize, delta: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if t == 0 || delta == 0 {
        return out;
    }
    let mut s = t;
    loop {
        out.push(s);
        if s <= delta {
            break;
        }
        s -= delta;
    }
    if out.last() != Some(&1) {
        out.push(1);
    }
    out
}
