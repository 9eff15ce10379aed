//! Per-example gradients for XENT, DAD, E2E and MIXER.

use std::ops::Range;

use rand::RngExt;

use crate::corpus::ExamplePair;
use crate::error::{Error, Result};
use crate::metrics::RewardMetric;
use crate::model::{backward, rollout, FeedMode, GradAccumulator, ModelParams, RolloutTrace};
use crate::numkern::Rng;

use super::BaselineGrad;

/// What one example contributes to a minibatch update.
#[derive(Debug, Clone)]
pub struct ExampleGrads {
    pub grads: GradAccumulator,
    /// Cross-entropy summed over the XENT-governed steps.
    pub loss: f64,
    pub trace: RolloutTrace,
    /// Sequence reward, for traces with REINFORCE steps.
    pub reward: Option<f64>,
    /// Squared-error gradient of the baseline on the REINFORCE steps.
    pub baseline: BaselineGrad,
}

/// Logit gradients `p_t − 1(target_t)` on `steps`, zero elsewhere, and the
/// cross-entropy `−Σ ln p_t[target_t]` over the same steps. `targets[t]` is
/// the word step `t` should emit.
pub fn xent_loss_grads(trace: &RolloutTrace, targets: &[usize], steps: Range<usize>) -> Result<(Vec<Vec<f64>>, f64)> {
    if steps.end > trace.len() || steps.end > targets.len() {
        return Err(Error::InvalidArgument(format!(
            "XENT steps {steps:?} exceed trace ({}) or targets ({})",
            trace.len(),
            targets.len()
        )));
    }
    let w = trace.steps.first().map_or(0, |s| s.probs.len());
    let mut dl = vec![vec![0.0; w]; trace.len()];
    let mut loss = 0.0;
    for t in steps {
        let target = targets[t];
        if target >= w {
            return Err(Error::WordOutOfRange { index: target, size: w });
        }
        let p = &trace.steps[t].probs;
        dl[t].copy_from_slice(p);
        dl[t][target] -= 1.0;
        loss -= p[target].ln();
    }
    Ok((dl, loss))
}

/// XENT over every step of a teacher-forced trace.
pub fn xent_grads(trace: &RolloutTrace, targets: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
    xent_loss_grads(trace, targets, 0..trace.len())
}

/// `(r − r̄_t)(p_t − 1(w_t))` at every step from `from` on, where `w_t` is
/// the word sampled at step `t` and `baselines[t]` its reward estimate.
/// Steps before `from` get zero gradient.
pub fn reinforce_grads(trace: &RolloutTrace, reward: f64, baselines: &[f64], from: usize) -> Result<Vec<Vec<f64>>> {
    if baselines.len() != trace.len() {
        return Err(Error::shape(
            "reinforce_grads",
            format!("{} baselines for {} steps", baselines.len(), trace.len()),
        ));
    }
    let w = trace.steps.first().map_or(0, |s| s.probs.len());
    let mut dl = vec![vec![0.0; w]; trace.len()];
    for t in from..trace.len() {
        let adv = reward - baselines[t];
        let p = &trace.steps[t].probs;
        for (d, pk) in dl[t].iter_mut().zip(p) {
            *d = adv * pk;
        }
        dl[t][trace.chosen[t]] -= adv;
    }
    Ok(dl)
}

fn next_words(ex: &ExamplePair) -> &[usize] {
    &ex.target[1..]
}

fn teacher_forced(params: &ModelParams, ex: &ExamplePair, plan: &[FeedMode], rng: &mut Rng) -> Result<ExampleGrads> {
    let trace = rollout(params, ex, plan, false, rng)?;
    let (dl, loss) = xent_grads(&trace, next_words(ex))?;
    let mut grads = GradAccumulator::zeros_like(params);
    backward(params, &trace, &dl, &mut grads)?;
    Ok(ExampleGrads {
        grads,
        loss,
        trace,
        reward: None,
        baseline: BaselineGrad::default(),
    })
}

fn check_example(ex: &ExamplePair) -> Result<()> {
    if ex.steps() == 0 {
        return Err(Error::InvalidArgument("target has no words to predict".into()));
    }
    Ok(())
}

/// Each step emits the reference word with probability `p_truth`, else its
/// own argmax; the emitted word is the next input.
pub fn dad_plan(steps: usize, p_truth: f64, rng: &mut Rng) -> Vec<FeedMode> {
    (0..steps)
        .map(|_| {
            if rng.random::<f64>() < p_truth {
                FeedMode::GroundTruth
            } else {
                FeedMode::Argmax
            }
        })
        .collect()
}

/// XENT against the reference at every step, with inputs drawn per
/// [`dad_plan`]. Chosen inputs are leaves of the graph.
pub fn dad_grads(params: &ModelParams, ex: &ExamplePair, p_truth: f64, rng: &mut Rng) -> Result<ExampleGrads> {
    if !(0.0..=1.0).contains(&p_truth) {
        return Err(Error::InvalidArgument(format!("p_truth {p_truth} outside [0, 1]")));
    }
    check_example(ex)?;
    let plan = dad_plan(ex.steps(), p_truth, rng);
    teacher_forced(params, ex, &plan, rng)
}

/// The last `mixed` inputs (never the initial BOS) are k-max mixes of the
/// previous step's distribution.
pub fn e2e_plan(steps: usize, k: usize, mixed: usize) -> Vec<FeedMode> {
    let mixed = mixed.min(steps.saturating_sub(1));
    (0..steps)
        .map(|t| {
            if t + 1 < steps && t + 1 >= steps - mixed {
                FeedMode::KMax(k)
            } else {
                FeedMode::GroundTruth
            }
        })
        .collect()
}

/// XENT against the reference with differentiable k-max inputs on the last
/// `mixed` steps.
pub fn e2e_grads(
    params: &ModelParams,
    ex: &ExamplePair,
    k: usize,
    mixed: usize,
    rng: &mut Rng,
) -> Result<ExampleGrads> {
    if k == 0 || k > params.vocab() {
        return Err(Error::InvalidArgument(format!(
            "k-max width {k} outside 1..={}",
            params.vocab()
        )));
    }
    check_example(ex)?;
    let plan = e2e_plan(ex.steps(), k, mixed);
    teacher_forced(params, ex, &plan, rng)
}

/// Teacher forcing for the first `s` steps, then sampling up to `t_max`
/// steps in total. A target that fits within `s` steps is pure teacher
/// forcing.
pub fn mixer_plan(ex: &ExamplePair, s: usize, t_max: usize) -> Vec<FeedMode> {
    if s >= ex.steps() {
        return vec![FeedMode::GroundTruth; ex.steps()];
    }
    (0..t_max.max(s + 1))
        .map(|t| if t < s { FeedMode::GroundTruth } else { FeedMode::Sample })
        .collect()
}

/// XENT on the first `s` steps and REINFORCE on the sampled remainder. The
/// reward scores the reference prefix followed by the sampled suffix
/// (through its first EOS) against the reference words; `r̄_t` comes from the
/// model's baseline regressor on the hidden state after step `t`.
pub fn mixer_grads(
    params: &ModelParams,
    ex: &ExamplePair,
    s: usize,
    t_max: usize,
    metric: RewardMetric,
    rng: &mut Rng,
) -> Result<ExampleGrads> {
    check_example(ex)?;
    if s == 0 {
        return Err(Error::InvalidArgument(
            "MIXER prefix length s must be at least 1".into(),
        ));
    }
    let plan = mixer_plan(ex, s, t_max);
    let mut trace = rollout(params, ex, &plan, true, rng)?;
    let xent_n = s.min(trace.len());
    let (mut dl, loss) = xent_loss_grads(&trace, next_words(ex), 0..xent_n)?;
    let mut baseline = BaselineGrad::default();
    let mut reward = None;
    if xent_n < trace.len() {
        let r = metric.reward(trace.generated_words(), ex.target_words());
        let mut baselines = vec![0.0; trace.len()];
        for (t, b) in baselines.iter_mut().enumerate().skip(xent_n) {
            *b = params.baseline.accumulate(&trace.steps[t].h, r, &mut baseline);
        }
        let rl = reinforce_grads(&trace, r, &baselines, xent_n)?;
        for (d, g) in dl.iter_mut().zip(rl).skip(xent_n) {
            *d = g;
        }
        trace.reward = Some(r);
        reward = Some(r);
    }
    let mut grads = GradAccumulator::zeros_like(params);
    backward(params, &trace, &dl, &mut grads)?;
    Ok(ExampleGrads {
        grads,
        loss,
        trace,
        reward,
        baseline,
    })
}

/// One epoch's concrete regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochRegime {
    Xent,
    Dad { p_truth: f64 },
    E2e { k: usize, mixed: usize },
    Mixer { s: usize },
}

pub fn example_grads(
    params: &ModelParams,
    ex: &ExamplePair,
    regime: EpochRegime,
    t_max: usize,
    metric: RewardMetric,
    rng: &mut Rng,
) -> Result<ExampleGrads> {
    match regime {
        EpochRegime::Xent => {
            check_example(ex)?;
            teacher_forced(params, ex, &vec![FeedMode::GroundTruth; ex.steps()], rng)
        }
        EpochRegime::Dad { p_truth } => dad_grads(params, ex, p_truth, rng),
        EpochRegime::E2e { k, mixed } => e2e_grads(params, ex, k, mixed, rng),
        EpochRegime::Mixer { s } => mixer_grads(params, ex, s, t_max, metric, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};
    use crate::model::{CellKind, ModelConfig};
    use crate::numkern::{seeded_rng, Mat, TensorSet};
    use proptest::prelude::*;

    fn model(seed: u64, vocab: usize) -> ModelParams {
        ModelParams::random(
            ModelConfig {
                cell: CellKind::Elman,
                vocab,
                hidden: 4,
                window: 3,
                max_source: 6,
            },
            0.4,
            &mut seeded_rng(seed),
        )
        .unwrap()
    }

    fn ex() -> ExamplePair {
        ExamplePair::new(vec![4, 5, 6], &[6, 5, 4])
    }

    fn bits(g: &GradAccumulator) -> Vec<u64> {
        g.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn uniform_model_loss() {
        // W=4, T=2 with a zero output layer: every step is uniform.
        let mut p = model(1, 4);
        p.m_o = Mat::zeros(4, 4);
        let e = ExamplePair::new(vec![3], &[3]);
        let g = example_grads(&p, &e, EpochRegime::Xent, 10, RewardMetric::Bleu, &mut seeded_rng(0)).unwrap();
        assert_eq!(g.trace.len(), 2);
        assert!((g.loss - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_model_has_zero_loss_and_gradient() {
        // Hand-build a trace whose distributions are exact one-hots.
        let p = model(2, 7);
        let e = ex();
        let mut tr = rollout(&p, &e, &[FeedMode::GroundTruth; 4], false, &mut seeded_rng(0)).unwrap();
        for (t, s) in tr.steps.iter_mut().enumerate() {
            s.probs = vec![0.0; 7];
            s.probs[e.target[t + 1]] = 1.0;
        }
        let (dl, loss) = xent_grads(&tr, &e.target[1..]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dl.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn xent_step_gradient_sums_to_zero() {
        let p = model(3, 7);
        let e = ex();
        let tr = rollout(&p, &e, &[FeedMode::GroundTruth; 4], false, &mut seeded_rng(0)).unwrap();
        let (dl, _) = xent_grads(&tr, &e.target[1..]).unwrap();
        for d in &dl {
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(xent_grads(&tr, &[1, 2, 99, 3]).is_err());
    }

    #[test]
    fn reinforce_zero_advantage_and_sign() {
        let p = model(4, 7);
        let e = ex();
        let tr = rollout(&p, &e, &[FeedMode::Sample; 4], false, &mut seeded_rng(5)).unwrap();
        let zero = reinforce_grads(&tr, 0.3, &[0.3; 4], 0).unwrap();
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
        let pos = reinforce_grads(&tr, 0.8, &[0.3; 4], 1).unwrap();
        assert!(pos[0].iter().all(|&v| v == 0.0));
        for t in 1..4 {
            // descent raises the sampled logit and lowers the rest
            assert!(pos[t][tr.chosen[t]] < 0.0);
            for (k, v) in pos[t].iter().enumerate() {
                if k != tr.chosen[t] {
                    assert!(*v > 0.0);
                }
            }
            assert!(pos[t].iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn dad_reductions() {
        let p = model(5, 7);
        let e = ex();
        let xent = example_grads(&p, &e, EpochRegime::Xent, 10, RewardMetric::Bleu, &mut seeded_rng(9)).unwrap();
        let dad = dad_grads(&p, &e, 1.0, &mut seeded_rng(9)).unwrap();
        assert_eq!(bits(&xent.grads), bits(&dad.grads));
        assert_eq!(xent.loss.to_bits(), dad.loss.to_bits());

        let all_model = dad_grads(&p, &e, 0.0, &mut seeded_rng(9)).unwrap();
        let inputs = all_model.trace.input_words();
        assert_eq!(inputs[0], Some(BOS));
        for t in 1..inputs.len() {
            let prev = &all_model.trace.steps[t - 1].probs;
            assert_eq!(inputs[t], Some(crate::numkern::argmax(prev)));
        }
    }

    #[test]
    fn dad_targets_stay_reference_words() {
        // Output layer forces word 3 everywhere, so model-fed inputs differ
        // from the reference; the loss must still score the reference.
        let mut p = model(6, 7);
        p.m_o.fill(0.0);
        for j in 0..4 {
            p.m_o[(3, j)] = 60.0;
        }
        let e = ex();
        let g = dad_grads(&p, &e, 0.5, &mut seeded_rng(1)).unwrap();
        let (_, want) = xent_grads(&g.trace, &e.target[1..]).unwrap();
        assert_eq!(g.loss, want);
        assert!(g.loss > 100.0);
    }

    #[test]
    fn e2e_zero_mixed_is_xent() {
        let p = model(7, 7);
        let e = ex();
        let xent = example_grads(&p, &e, EpochRegime::Xent, 10, RewardMetric::Bleu, &mut seeded_rng(2)).unwrap();
        let e2e = e2e_grads(&p, &e, 3, 0, &mut seeded_rng(2)).unwrap();
        assert_eq!(bits(&xent.grads), bits(&e2e.grads));
        assert!(e2e_grads(&p, &e, 8, 1, &mut seeded_rng(2)).is_err());
    }

    #[test]
    fn e2e_plan_mixes_trailing_inputs() {
        use FeedMode::*;
        assert_eq!(e2e_plan(4, 2, 0), vec![GroundTruth; 4]);
        assert_eq!(e2e_plan(4, 2, 1), vec![GroundTruth, GroundTruth, KMax(2), GroundTruth]);
        assert_eq!(e2e_plan(4, 2, 9), vec![KMax(2), KMax(2), KMax(2), GroundTruth]);
    }

    #[test]
    fn mixer_full_prefix_is_xent() {
        let p = model(8, 7);
        let e = ex();
        let xent = example_grads(&p, &e, EpochRegime::Xent, 10, RewardMetric::Bleu, &mut seeded_rng(3)).unwrap();
        let mix = mixer_grads(&p, &e, 10, 10, RewardMetric::Bleu, &mut seeded_rng(3)).unwrap();
        assert_eq!(bits(&xent.grads), bits(&mix.grads));
        assert!(mix.reward.is_none());
        assert_eq!(mix.baseline.count, 0);
    }

    #[test]
    fn mixer_reward_uses_reference_prefix() {
        let p = model(9, 7);
        let e = ex();
        let g = mixer_grads(&p, &e, 2, 8, RewardMetric::Bleu, &mut seeded_rng(4)).unwrap();
        assert_eq!(&g.trace.chosen[..2], &e.target[1..3]);
        assert_eq!(g.trace.input_words()[2], Some(e.target[2]));
        let generated = g.trace.generated_words();
        assert_eq!(&generated[..2], &e.target[1..3]);
        let want = RewardMetric::Bleu.reward(generated, e.target_words());
        assert_eq!(g.reward, Some(want));
        assert_eq!(g.baseline.count, g.trace.len() - 2);
        assert!(g.trace.len() <= 8);
        if g.trace.len() < 8 {
            assert_eq!(*g.trace.chosen.last().unwrap(), EOS);
        }
    }

    proptest! {
        #[test]
        fn reinforce_rows_sum_to_zero(seed in 0u64..500, r in -2.0f64..2.0, b in -2.0f64..2.0) {
            let p = model(seed, 7);
            let tr = rollout(&p, &ex(), &[FeedMode::Sample; 5], false, &mut seeded_rng(seed)).unwrap();
            let dl = reinforce_grads(&tr, r, &[b; 5], 0).unwrap();
            for d in &dl {
                prop_assert!(d.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
