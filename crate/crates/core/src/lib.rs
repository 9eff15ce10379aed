//! Sequence-level training for recurrent text generators.
//!
//! A conditional Elman or LSTM decoder with an attentive encoder, trained by
//! cross-entropy (XENT), Data As Demonstrator (DAD), end-to-end backprop
//! through k-max inputs (E2E), or MIXER, which anneals from XENT to
//! REINFORCE on a sentence-level BLEU or ROUGE-2 reward. Decoding is greedy
//! or beam search. [`gradcheck`] holds the finite-difference and exhaustive
//! enumeration oracles the gradients are tested against.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numkern;
pub mod training;

pub use error::{Error, Result};
