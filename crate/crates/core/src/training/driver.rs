//! Epoch loop: shuffling, parallel minibatches, SGD, and regime schedules.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::ExamplePair;
use crate::decoding::greedy_generate;
use crate::error::{Error, Result};
use crate::metrics::RewardMetric;
use crate::model::{GradAccumulator, ModelParams};
use crate::numkern::{derive_seed, seeded_rng, sgd_step};

use super::regimes::{example_grads, EpochRegime};
use super::{BaselineGrad, TrainingSchedule};

/// Seed path component reserved for the epoch shuffle; example streams use
/// the example index instead.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    Xent,
    Dad,
    E2e,
    Mixer,
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xent" => Ok(RegimeKind::Xent),
            "dad" => Ok(RegimeKind::Dad),
            "e2e" => Ok(RegimeKind::E2e),
            "mixer" => Ok(RegimeKind::Mixer),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (expected xent, dad, e2e or mixer)"
            ))),
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegimeKind::Xent => "xent",
            RegimeKind::Dad => "dad",
            RegimeKind::E2e => "e2e",
            RegimeKind::Mixer => "mixer",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub schedule: TrainingSchedule,
    pub reward: RewardMetric,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub batches: usize,
    /// Mean per-sequence cross-entropy over XENT-governed steps.
    pub train_loss: f64,
    pub reward_mean: Option<f64>,
    pub baseline_mse: Option<f64>,
    pub max_grad_norm: f64,
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across all phases.
    pub epoch: usize,
    pub phase: &'static str,
    /// MIXER's teacher-forced prefix length.
    pub s: Option<usize>,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub reward_mean: Option<f64>,
    pub baseline_mse: Option<f64>,
}

/// One shuffled pass over `data` in minibatches. `epoch` seeds both the
/// shuffle and the per-example random streams, so results do not depend on
/// thread scheduling or on what other regimes consumed.
pub fn train_epoch(
    params: &mut ModelParams,
    data: &[ExamplePair],
    regime: EpochRegime,
    opts: &TrainOptions,
    epoch: usize,
) -> Result<EpochStats> {
    let sched = &opts.schedule;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded_rng(derive_seed(opts.seed, &[epoch as u64, SHUFFLE_STREAM])));

    let mut stats = EpochStats {
        batches: 0,
        train_loss: 0.0,
        reward_mean: None,
        baseline_mse: None,
        max_grad_norm: 0.0,
    };
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    let mut epoch_baseline = BaselineGrad::default();

    for batch in order.chunks(sched.batch) {
        let snapshot = &*params;
        let results: Vec<Result<_>> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = seeded_rng(derive_seed(opts.seed, &[epoch as u64, i as u64]));
                example_grads(snapshot, &data[i], regime, sched.t, opts.reward, &mut rng)
            })
            .collect();

        let mut total = GradAccumulator::zeros_like(params);
        let mut bgrad = BaselineGrad::default();
        for r in results {
            let r = r?;
            if !r.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total.add_assign(&r.grads);
            stats.train_loss += r.loss;
            if let Some(rw) = r.reward {
                reward_sum += rw;
                reward_n += 1;
            }
            bgrad.merge(&r.baseline);
        }
        total.scale(1.0 / batch.len() as f64);
        let report = sgd_step(params, &mut total, sched.lr_for(regime), sched.max_norm)?;
        stats.max_grad_norm = stats.max_grad_norm.max(report.grad_norm);
        params.baseline.apply(&bgrad, sched.lr_b)?;
        epoch_baseline.merge(&bgrad);
        stats.batches += 1;
    }
    stats.train_loss /= data.len() as f64;
    if reward_n > 0 {
        stats.reward_mean = Some(reward_sum / reward_n as f64);
    }
    stats.baseline_mse = epoch_baseline.mse();
    Ok(stats)
}

/// Mean sentence-level `metric` of greedy outputs against the references.
pub fn mean_metric(params: &ModelParams, data: &[ExamplePair], metric: RewardMetric, max_len: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let scores = data
        .par_iter()
        .map(|ex| {
            let hyp = greedy_generate(params, &ex.source, max_len)?;
            Ok(metric.evaluate(hyp.output_words(), ex.target_words()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn crop_all(data: &[ExamplePair], t: usize, max_source: usize) -> Vec<ExamplePair> {
    // t decoder steps emit at most t - 1 words plus EOS
    data.iter()
        .map(|ex| ex.cropped(t.saturating_sub(1), max_source))
        .collect()
}

/// Runs a full regime. Training targets are cropped to the unroll length.
/// `on_epoch` sees each log row as soon as it is complete.
pub fn train(
    params: &mut ModelParams,
    train_data: &[ExamplePair],
    val_data: &[ExamplePair],
    kind: RegimeKind,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let sched = &opts.schedule;
    sched.validate()?;
    for ex in train_data.iter().chain(val_data) {
        ex.validate(params.vocab())?;
    }
    let data = crop_all(train_data, sched.t, params.config.max_source);

    let mut plan: Vec<(EpochRegime, &'static str, Option<usize>)> = Vec::new();
    match kind {
        RegimeKind::Xent => plan.extend((0..sched.epochs).map(|_| (EpochRegime::Xent, "xent", None))),
        RegimeKind::Dad => plan.extend((0..sched.epochs).map(|e| {
            (
                EpochRegime::Dad {
                    p_truth: sched.dad_p_truth(e),
                },
                "dad",
                None,
            )
        })),
        RegimeKind::E2e => plan.extend((0..sched.epochs).map(|e| {
            (
                EpochRegime::E2e {
                    k: sched.k,
                    mixed: sched.e2e_mixed_steps(e),
                },
                "e2e",
                None,
            )
        })),
        RegimeKind::Mixer => {
            for s in sched.s_values() {
                let (n, phase) = if s == sched.t {
                    (sched.n_xent, "xent")
                } else {
                    (sched.n_xer, "xent+reinforce")
                };
                plan.extend((0..n).map(|_| (EpochRegime::Mixer { s }, phase, Some(s))));
            }
        }
    }

    let mut records = Vec::with_capacity(plan.len());
    for (epoch, (regime, phase, s)) in plan.into_iter().enumerate() {
        let stats = train_epoch(params, &data, regime, opts, epoch)?;
        let val_metric = if val_data.is_empty() {
            None
        } else {
            Some(mean_metric(params, val_data, opts.reward, sched.t)?)
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase,
            s,
            train_loss: stats.train_loss,
            val_metric,
            reward_mean: stats.reward_mean,
            baseline_mse: stats.baseline_mse,
        };
        on_epoch(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
