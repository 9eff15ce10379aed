//! The conditional recurrent generator.
//!
//! One decoder step, for hidden state `h` (all zeros at the start of every
//! sequence) and input word `w`:
//!
//! ```text
//! c      = attend(h, source)                  attentive encoder
//! h'     = cell(1(w), h, c)                   Elman: σ(M_i 1(w) + M_h h + M_c c)
//! logits = M_o h'
//! p      = softmax(logits)
//! ```
//!
//! The attention query is the pre-step hidden state; its context is consumed
//! by the same step. The encoder embedding dimension equals the hidden size
//! because attention scores are dot products `z_j · h`.

mod cell;
mod checkpoint;
mod encoder;
mod rollout;

pub(crate) use rollout::initial_state;

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

pub use cell::{elman_step, lstm_step, LstmGates};
pub use checkpoint::{checkpoint_string, load_checkpoint, parse_checkpoint, save_checkpoint, CKPT_HEADER};
pub use encoder::{attentive_context, EncodedSource};
pub use rollout::{backward, decoder_step, rollout, FeedMode, KMaxMix, RolloutTrace, StepInput, StepState};

use crate::error::{Error, Result};
use crate::numkern::{Mat, Rng, TensorSet};
use crate::training::BaselineRegressor;

/// Default half-width of the uniform initialization.
pub const INIT_SCALE: f64 = 0.05;

/// Value every entry of the first hidden state is set to.
pub const H_INIT: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Elman,
    Lstm,
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elman" => Ok(CellKind::Elman),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::InvalidArgument(format!(
                "unknown cell {other:?} (expected elman or lstm)"
            ))),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Elman => "elman",
            CellKind::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub cell: CellKind,
    /// Vocabulary size W (shared by source and target).
    pub vocab: usize,
    /// Hidden size H, also the encoder embedding size.
    pub hidden: usize,
    /// Odd width q of the encoder's local averaging window.
    pub window: usize,
    /// Number of learned position embeddings.
    pub max_source: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.hidden == 0 || self.max_source == 0 {
            return Err(Error::InvalidArgument(format!(
                "model needs vocab >= 2, hidden >= 1, max_source >= 1 (got {self:?})"
            )));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "encoder window must be odd, got {}",
                self.window
            )));
        }
        Ok(())
    }

    /// Row of the source embedding table used for boundary padding.
    pub fn pad_row(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellParams {
    Elman {
        /// H×W input embedding.
        m_i: Mat,
        /// H×H recurrent matrix.
        m_h: Mat,
        /// H×H context matrix.
        m_c: Mat,
    },
    /// Gate blocks stacked as rows `[input; forget; candidate; output]`.
    Lstm {
        w_x: Mat,
        w_h: Mat,
        w_c: Mat,
        /// 4H×1
        bias: Mat,
    },
}

impl CellParams {
    /// Matrix applied to the (one-hot or mixed) input word.
    pub fn input_matrix(&self) -> &Mat {
        match self {
            CellParams::Elman { m_i, .. } => m_i,
            CellParams::Lstm { w_x, .. } => w_x,
        }
    }

    pub(crate) fn input_matrix_mut(&mut self) -> &mut Mat {
        match self {
            CellParams::Elman { m_i, .. } => m_i,
            CellParams::Lstm { w_x, .. } => w_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub cell: CellParams,
    /// W×H output projection.
    pub m_o: Mat,
    /// (W+1)×H source word embeddings; the last row is the padding dummy.
    pub src_embed: Mat,
    /// max_source×H position embeddings.
    pub pos_embed: Mat,
    /// Reward predictor; trained separately and never by backprop.
    pub baseline: BaselineRegressor,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (w, h) = (config.vocab, config.hidden);
        let cell = match config.cell {
            CellKind::Elman => CellParams::Elman {
                m_i: Mat::zeros(h, w),
                m_h: Mat::zeros(h, h),
                m_c: Mat::zeros(h, h),
            },
            CellKind::Lstm => CellParams::Lstm {
                w_x: Mat::zeros(4 * h, w),
                w_h: Mat::zeros(4 * h, h),
                w_c: Mat::zeros(4 * h, h),
                bias: Mat::zeros(4 * h, 1),
            },
        };
        Ok(ModelParams {
            config,
            cell,
            m_o: Mat::zeros(w, h),
            src_embed: Mat::zeros(w + 1, h),
            pos_embed: Mat::zeros(config.max_source, h),
            baseline: BaselineRegressor::zeros(h),
        })
    }

    /// Every trainable tensor uniform in `(-scale, scale)`, baseline zeroed.
    pub fn random(config: ModelConfig, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (_, m) in p.tensors_mut() {
            *m = Mat::uniform(m.rows(), m.cols(), scale, rng);
        }
        Ok(p)
    }

    /// Default initialization, uniform(-0.05, 0.05).
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::random(config, INIT_SCALE, rng)
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite()) && self.baseline.is_finite()
    }
}

impl TensorSet for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        let mut v: Vec<(&'static str, &Mat)> = match &self.cell {
            CellParams::Elman { m_i, m_h, m_c } => {
                vec![("elman.m_i", m_i), ("elman.m_h", m_h), ("elman.m_c", m_c)]
            }
            CellParams::Lstm { w_x, w_h, w_c, bias } => vec![
                ("lstm.w_x", w_x),
                ("lstm.w_h", w_h),
                ("lstm.w_c", w_c),
                ("lstm.bias", bias),
            ],
        };
        v.push(("m_o", &self.m_o));
        v.push(("encoder.word", &self.src_embed));
        v.push(("encoder.position", &self.pos_embed));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut v: Vec<(&'static str, &mut Mat)> = match &mut self.cell {
            CellParams::Elman { m_i, m_h, m_c } => {
                vec![("elman.m_i", m_i), ("elman.m_h", m_h), ("elman.m_c", m_c)]
            }
            CellParams::Lstm { w_x, w_h, w_c, bias } => vec![
                ("lstm.w_x", w_x),
                ("lstm.w_h", w_h),
                ("lstm.w_c", w_c),
                ("lstm.bias", bias),
            ],
        };
        v.push(("m_o", &mut self.m_o));
        v.push(("encoder.word", &mut self.src_embed));
        v.push(("encoder.position", &mut self.pos_embed));
        v
    }
}

/// Gradient buffers shaped exactly like the trainable tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator(ModelParams);

impl GradAccumulator {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradAccumulator(ModelParams::zeros(params.config).expect("config already validated"))
    }

    pub fn zero(&mut self) {
        for (_, m) in self.0.tensors_mut() {
            m.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &GradAccumulator) {
        for ((_, a), (_, b)) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.0.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn into_inner(self) -> ModelParams {
        self.0
    }
}

impl Deref for GradAccumulator {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradAccumulator {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

impl TensorSet for GradAccumulator {
    fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        self.0.tensors_mut()
    }
}
