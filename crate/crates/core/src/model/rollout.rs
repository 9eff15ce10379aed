//! Forward rollouts under a per-step feed plan, and backpropagation through
//! time over the recorded trace.

use crate::corpus::{ExamplePair, BOS, EOS};
use crate::error::{Error, Result};
use crate::numkern::{argmax, dot, sample_categorical, top_k, Mat, Rng};

use super::cell::{cell_backward, elman_step, lstm_step, LstmGates};
use super::encoder::{attention_backward, attentive_context, EncodedSource};
use super::{CellKind, GradAccumulator, ModelParams, H_INIT};

/// Renormalized top-k slice of a distribution, fed as a soft input word.
#[derive(Debug, Clone, PartialEq)]
pub struct KMaxMix {
    pub indices: Vec<usize>,
    /// Probabilities of `indices` divided by `mass`; they sum to one.
    pub weights: Vec<f64>,
    /// Total probability of the kept entries before renormalization.
    pub mass: f64,
}

impl KMaxMix {
    pub fn from_probs(probs: &[f64], k: usize) -> Result<Self> {
        if k == 0 || k > probs.len() {
            return Err(Error::InvalidArgument(format!(
                "k-max width {k} outside 1..={}",
                probs.len()
            )));
        }
        let indices = top_k(probs, k);
        let mass: f64 = indices.iter().map(|&i| probs[i]).sum();
        let weights = indices.iter().map(|&i| probs[i] / mass).collect();
        Ok(KMaxMix { indices, weights, mass })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    Word(usize),
    Mix(KMaxMix),
}

/// Everything one decoder step computed; the backward pass reads it back.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub input: StepInput,
    pub h_prev: Vec<f64>,
    /// Empty for Elman cells.
    pub cell_prev: Vec<f64>,
    pub attention: Vec<f64>,
    pub context: Vec<f64>,
    pub gates: Option<LstmGates>,
    pub h: Vec<f64>,
    /// Empty for Elman cells.
    pub cell: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// How the word emitted at a step is chosen; that word is also the next
/// step's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedMode {
    /// The reference word `target[t + 1]`.
    GroundTruth,
    Argmax,
    Sample,
    /// Soft input from the renormalized `k` most likely words.
    KMax(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub steps: Vec<StepState>,
    /// Word emitted at each step (the top word for k-max steps).
    pub chosen: Vec<usize>,
    pub modes: Vec<FeedMode>,
    pub encoded: EncodedSource,
    pub reward: Option<f64>,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Hard input word of each step, `None` for mixed inputs.
    pub fn input_words(&self) -> Vec<Option<usize>> {
        self.steps
            .iter()
            .map(|s| match s.input {
                StepInput::Word(w) => Some(w),
                StepInput::Mix(_) => None,
            })
            .collect()
    }

    /// Emitted words up to (not including) the first EOS.
    pub fn generated_words(&self) -> &[usize] {
        let end = self.chosen.iter().position(|&w| w == EOS).unwrap_or(self.chosen.len());
        &self.chosen[..end]
    }

    /// `Σ_t ln p_t[chosen_t]`.
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().zip(&self.chosen).map(|(s, &w)| s.probs[w].ln()).sum()
    }
}

/// Attention read followed by one cell step.
pub fn decoder_step(
    params: &ModelParams,
    input: &StepInput,
    h: &[f64],
    cell: &[f64],
    enc: &EncodedSource,
) -> Result<StepState> {
    let (attention, ctx) = attentive_context(h, enc)?;
    let mut step = match params.config.cell {
        CellKind::Elman => elman_step(params, input, h, &ctx)?,
        CellKind::Lstm => lstm_step(params, input, h, cell, &ctx)?,
    };
    step.attention = attention;
    Ok(step)
}

/// Initial hidden and cell state.
pub(crate) fn initial_state(params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let h = vec![H_INIT; params.hidden()];
    let cell = match params.config.cell {
        CellKind::Elman => Vec::new(),
        CellKind::Lstm => vec![0.0; params.hidden()],
    };
    (h, cell)
}

/// Runs the decoder from BOS for at most `plan.len()` steps. With
/// `stop_at_eos`, the rollout ends after the first step that emits EOS.
pub fn rollout(
    params: &ModelParams,
    example: &ExamplePair,
    plan: &[FeedMode],
    stop_at_eos: bool,
    rng: &mut Rng,
) -> Result<RolloutTrace> {
    if plan.is_empty() {
        return Err(Error::InvalidArgument("empty feed plan".into()));
    }
    let encoded = EncodedSource::new(params, &example.source)?;
    let (mut h, mut cell) = initial_state(params);
    let mut input = StepInput::Word(BOS);
    let mut steps = Vec::with_capacity(plan.len());
    let mut chosen = Vec::with_capacity(plan.len());
    let mut modes = Vec::with_capacity(plan.len());

    for (t, &mode) in plan.iter().enumerate() {
        let step = decoder_step(params, &input, &h, &cell, &encoded)?;
        let (word, next) = match mode {
            FeedMode::GroundTruth => {
                let w = *example.target.get(t + 1).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "ground-truth feed at step {t} runs past a target of length {}",
                        example.target.len()
                    ))
                })?;
                (w, StepInput::Word(w))
            }
            FeedMode::Argmax => {
                let w = argmax(&step.probs);
                (w, StepInput::Word(w))
            }
            FeedMode::Sample => {
                let w = sample_categorical(&step.probs, rng);
                (w, StepInput::Word(w))
            }
            FeedMode::KMax(k) => {
                let mix = KMaxMix::from_probs(&step.probs, k)?;
                (mix.indices[0], StepInput::Mix(mix))
            }
        };
        h.clone_from(&step.h);
        cell.clone_from(&step.cell);
        steps.push(step);
        chosen.push(word);
        modes.push(mode);
        if stop_at_eos && word == EOS {
            break;
        }
        input = next;
    }
    Ok(RolloutTrace {
        steps,
        chosen,
        modes,
        encoded,
        reward: None,
    })
}

/// Accumulates `dL/dθ` into `grads` given `dL/dlogits` for every step of
/// `trace`. Gradients flow through the recurrence, the attention reads and
/// the encoder, and through k-max mixed inputs into the previous step's
/// logits. Discrete inputs (ground truth, argmax, samples) are leaves.
pub fn backward(
    params: &ModelParams,
    trace: &RolloutTrace,
    dlogits: &[Vec<f64>],
    grads: &mut GradAccumulator,
) -> Result<()> {
    if dlogits.len() != trace.len() {
        return Err(Error::shape(
            "backward",
            format!("{} logit gradients for a trace of {} steps", dlogits.len(), trace.len()),
        ));
    }
    if grads.config != params.config {
        return Err(Error::shape("backward", "gradient buffers belong to another model"));
    }
    let w = params.vocab();
    if let Some(bad) = dlogits.iter().find(|d| d.len() != w) {
        return Err(Error::shape(
            "backward",
            format!("logit gradient of length {}, vocabulary is {w}", bad.len()),
        ));
    }
    let hid = params.hidden();
    let enc = &trace.encoded;
    let mut dlog = dlogits.to_vec();
    let mut dh_next = vec![0.0; hid];
    let mut dcell_next = vec![0.0; hid];
    let mut dz = Mat::zeros(enc.len(), hid);
    let mut dwords = Mat::zeros(enc.len(), hid);

    for t in (0..trace.len()).rev() {
        let step = &trace.steps[t];
        let mut dh = std::mem::take(&mut dh_next);
        let dl = &dlog[t];
        if dl.iter().any(|&v| v != 0.0) {
            grads.m_o.add_outer(dl, &step.h);
            params.m_o.matvec_t_acc(dl, &mut dh);
        }
        let cg = cell_backward(params, step, &dh, &dcell_next, grads);

        match &step.input {
            StepInput::Word(word) => {
                grads.cell.input_matrix_mut().add_to_col(*word, 1.0, &cg.dpre);
            }
            StepInput::Mix(mix) => {
                let input_m = params.cell.input_matrix();
                let dv: Vec<f64> = mix.indices.iter().map(|&i| input_m.col_dot(i, &cg.dpre)).collect();
                for (&i, &v) in mix.indices.iter().zip(&mix.weights) {
                    grads.cell.input_matrix_mut().add_to_col(i, v, &cg.dpre);
                }
                if t > 0 {
                    let probs = &trace.steps[t - 1].probs;
                    let mean = dot(&mix.weights, &dv);
                    // d/dp through renormalization, then through softmax
                    let dp: Vec<f64> = dv.iter().map(|d| (d - mean) / mix.mass).collect();
                    let p_dp: f64 = mix.indices.iter().zip(&dp).map(|(&i, d)| probs[i] * d).sum();
                    let prev = &mut dlog[t - 1];
                    for (k, pk) in probs.iter().enumerate() {
                        prev[k] -= pk * p_dp;
                    }
                    for (&i, d) in mix.indices.iter().zip(&dp) {
                        prev[i] += probs[i] * d;
                    }
                }
            }
        }

        let mut dh_prev = cg.dh_prev;
        attention_backward(
            &step.h_prev,
            &step.attention,
            &cg.dctx,
            enc,
            &mut dz,
            &mut dwords,
            &mut dh_prev,
        );
        dh_next = dh_prev;
        dcell_next = if cg.dcell_prev.is_empty() {
            vec![0.0; hid]
        } else {
            cg.dcell_prev
        };
    }
    enc.backward(&dz, &dwords, grads);
    Ok(())
}
