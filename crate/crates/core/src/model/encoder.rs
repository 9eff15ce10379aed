//! Attentive encoder.
//!
//! Each source position gets `a_i = word_i + pos_i`. The aggregate vector
//! `z_i` averages `a` over a centered window of odd width `q`, with the
//! sequence padded on both sides by a learned dummy embedding. Attention
//! scores `z_j · h` are normalized by softmax and the context is the
//! attention-weighted sum of the plain word embeddings `word_j`.

use crate::error::{Error, Result};
use crate::numkern::{axpy, dot, softmax, Mat};

use super::{GradAccumulator, ModelParams};

/// Per-sequence encoder state, computed once and reused at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub source: Vec<usize>,
    /// M×H aggregate embeddings.
    pub z: Mat,
    /// M×H word embeddings of the source words.
    pub words: Mat,
}

impl EncodedSource {
    pub fn new(params: &ModelParams, source: &[usize]) -> Result<Self> {
        let cfg = &params.config;
        if source.is_empty() {
            return Err(Error::InvalidArgument("empty source sentence".into()));
        }
        if source.len() > cfg.max_source {
            return Err(Error::InvalidArgument(format!(
                "source length {} exceeds the {} learned positions",
                source.len(),
                cfg.max_source
            )));
        }
        if let Some(&bad) = source.iter().find(|&&w| w >= cfg.vocab) {
            return Err(Error::WordOutOfRange {
                index: bad,
                size: cfg.vocab,
            });
        }
        let (m, h, q) = (source.len(), cfg.hidden, cfg.window);
        let half = q / 2;
        let pad = params.src_embed.row(cfg.pad_row());

        let mut words = Mat::zeros(m, h);
        for (i, &w) in source.iter().enumerate() {
            words.row_mut(i).copy_from_slice(params.src_embed.row(w));
        }
        let mut padded = Mat::zeros(m + 2 * half, h);
        for r in 0..padded.rows() {
            let row = padded.row_mut(r);
            if r < half || r >= half + m {
                row.copy_from_slice(pad);
            } else {
                let i = r - half;
                row.copy_from_slice(words.row(i));
                axpy(1.0, params.pos_embed.row(i), row);
            }
        }
        let mut z = Mat::zeros(m, h);
        let inv_q = 1.0 / q as f64;
        for i in 0..m {
            let zi = z.row_mut(i);
            for k in 0..q {
                axpy(inv_q, padded.row(i + k), zi);
            }
        }
        Ok(EncodedSource {
            source: source.to_vec(),
            z,
            words,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Propagates accumulated `dz` (M×H) and `dwords` (M×H) into the word,
    /// position and padding embeddings.
    pub(crate) fn backward(&self, dz: &Mat, dwords: &Mat, grads: &mut GradAccumulator) {
        let cfg = grads.config;
        let (m, q) = (self.len(), cfg.window);
        let half = q / 2;
        let inv_q = 1.0 / q as f64;
        let pad_row = cfg.pad_row();
        for i in 0..m {
            let dzi = dz.row(i);
            for k in 0..q {
                let r = i + k;
                if r < half || r >= half + m {
                    axpy(inv_q, dzi, grads.src_embed.row_mut(pad_row));
                } else {
                    let pos = r - half;
                    axpy(inv_q, dzi, grads.src_embed.row_mut(self.source[pos]));
                    axpy(inv_q, dzi, grads.pos_embed.row_mut(pos));
                }
            }
        }
        for (i, &w) in self.source.iter().enumerate() {
            axpy(1.0, dwords.row(i), grads.src_embed.row_mut(w));
        }
    }
}

/// Attention weights over source positions and the resulting context vector
/// for query `h`.
pub fn attentive_context(h: &[f64], enc: &EncodedSource) -> Result<(Vec<f64>, Vec<f64>)> {
    if enc.is_empty() {
        return Err(Error::InvalidArgument("empty source sentence".into()));
    }
    if h.len() != enc.z.cols() {
        return Err(Error::shape(
            "attentive_context",
            format!("hidden has {}, encoder dim is {}", h.len(), enc.z.cols()),
        ));
    }
    let scores: Vec<f64> = (0..enc.len()).map(|j| dot(enc.z.row(j), h)).collect();
    let alpha = softmax(&scores)?;
    let mut ctx = vec![0.0; h.len()];
    for (j, &a) in alpha.iter().enumerate() {
        axpy(a, enc.words.row(j), &mut ctx);
    }
    Ok((alpha, ctx))
}

/// Backward through one attention read: accumulates into `dz`, `dwords` and
/// `dh` given the context gradient `dctx`.
pub(crate) fn attention_backward(
    h: &[f64],
    alpha: &[f64],
    dctx: &[f64],
    enc: &EncodedSource,
    dz: &mut Mat,
    dwords: &mut Mat,
    dh: &mut [f64],
) {
    let dalpha: Vec<f64> = (0..enc.len()).map(|j| dot(enc.words.row(j), dctx)).collect();
    let mean = dot(alpha, &dalpha);
    for j in 0..enc.len() {
        axpy(alpha[j], dctx, dwords.row_mut(j));
        let de = alpha[j] * (dalpha[j] - mean);
        if de != 0.0 {
            axpy(de, h, dz.row_mut(j));
            axpy(de, enc.z.row(j), dh);
        }
    }
}
