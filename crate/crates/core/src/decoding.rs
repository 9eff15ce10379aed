//! Greedy and beam-search generation.
//!
//! Scores are summed log-probabilities with no length normalization. Beam
//! search keeps the `k` best partial hypotheses per step, expands each by its
//! `k` most likely next words, and retires hypotheses that emit EOS into a
//! completed pool. Ties break toward the lexicographically smaller word
//! sequence, which makes `k = 1` reproduce greedy search exactly.

use std::cmp::Ordering;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{decoder_step, initial_state, EncodedSource, ModelParams, StepInput};
use crate::numkern::{argmax, top_k};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted words; ends with EOS when `finished`.
    pub words: Vec<usize>,
    pub logp: f64,
    pub h: Vec<f64>,
    /// LSTM cell state; empty for Elman.
    pub cell: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    /// Words without the terminating EOS.
    pub fn output_words(&self) -> &[usize] {
        match self.words.split_last() {
            Some((&last, rest)) if self.finished && last == EOS => rest,
            _ => &self.words,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Terminating word, or `None` to always decode exactly `max_len` steps.
    pub eos: Option<usize>,
}

impl DecodeOptions {
    pub fn new(max_len: usize) -> Self {
        DecodeOptions {
            max_len,
            eos: Some(EOS),
        }
    }
}

fn start(params: &ModelParams, source: &[usize], opts: DecodeOptions) -> Result<(EncodedSource, Hypothesis)> {
    if opts.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let enc = EncodedSource::new(params, source)?;
    let (h, cell) = initial_state(params);
    Ok((
        enc,
        Hypothesis {
            words: Vec::new(),
            logp: 0.0,
            h,
            cell,
            finished: false,
        },
    ))
}

fn last_input(hyp: &Hypothesis) -> StepInput {
    StepInput::Word(hyp.words.last().copied().unwrap_or(BOS))
}

pub fn greedy_generate(params: &ModelParams, source: &[usize], max_len: usize) -> Result<Hypothesis> {
    greedy_generate_with(params, source, DecodeOptions::new(max_len))
}

/// Left-to-right argmax decoding; ties go to the lowest word index.
pub fn greedy_generate_with(params: &ModelParams, source: &[usize], opts: DecodeOptions) -> Result<Hypothesis> {
    let (enc, mut hyp) = start(params, source, opts)?;
    for _ in 0..opts.max_len {
        let step = decoder_step(params, &last_input(&hyp), &hyp.h, &hyp.cell, &enc)?;
        let w = argmax(&step.probs);
        hyp.logp += step.probs[w].ln();
        hyp.words.push(w);
        hyp.h = step.h;
        hyp.cell = step.cell;
        if opts.eos == Some(w) {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Best-first order: higher score, then lexicographically smaller words.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logp.total_cmp(&a.logp).then_with(|| a.words.cmp(&b.words))
}

pub fn beam_generate(params: &ModelParams, source: &[usize], k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    beam_generate_with(params, source, k, DecodeOptions::new(max_len))
}

/// Beam search returning every surviving hypothesis best-first: the completed
/// pool together with whatever was still open when `max_len` was reached.
/// The first element is the decoder's answer.
pub fn beam_generate_with(
    params: &ModelParams,
    source: &[usize],
    k: usize,
    opts: DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    if k == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let (enc, root) = start(params, source, opts)?;
    let width = k.min(params.vocab());
    let mut active = vec![root];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..opts.max_len {
        let mut candidates = Vec::with_capacity(active.len() * width);
        for hyp in &active {
            let step = decoder_step(params, &last_input(hyp), &hyp.h, &hyp.cell, &enc)?;
            for w in top_k(&step.probs, width) {
                let mut words = hyp.words.clone();
                words.push(w);
                candidates.push(Hypothesis {
                    words,
                    logp: hyp.logp + step.probs[w].ln(),
                    h: step.h.clone(),
                    cell: step.cell.clone(),
                    finished: opts.eos == Some(w),
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(k);
        active.clear();
        for c in candidates {
            if c.finished {
                completed.push(c);
            } else {
                active.push(c);
            }
        }
        // Extending a hypothesis never raises its score, so nothing open can
        // overtake the best completed one.
        let best_done = completed.iter().map(|c| c.logp).fold(f64::NEG_INFINITY, f64::max);
        if active.iter().all(|a| a.logp <= best_done) {
            active.clear();
            break;
        }
    }
    completed.extend(active);
    completed.sort_by(rank);
    Ok(completed)
}

/// Log-probability of emitting `words` in order, by a fresh forward pass.
pub fn sequence_logp(params: &ModelParams, source: &[usize], words: &[usize]) -> Result<f64> {
    let enc = EncodedSource::new(params, source)?;
    let (mut h, mut cell) = initial_state(params);
    let mut input = StepInput::Word(BOS);
    let mut logp = 0.0;
    for &w in words {
        let step = decoder_step(params, &input, &h, &cell, &enc)?;
        let p = *step.probs.get(w).ok_or(Error::WordOutOfRange {
            index: w,
            size: params.vocab(),
        })?;
        logp += p.ln();
        h = step.h;
        cell = step.cell;
        input = StepInput::Word(w);
    }
    Ok(logp)
}
