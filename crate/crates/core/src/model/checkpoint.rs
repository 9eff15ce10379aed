//! Text checkpoints.
//!
//! ```text
//! #mixer-ckpt v1
//! elman.m_i 3 7
//! 1.2345678901234567e-2 ...
//! ```
//!
//! One block per tensor: a `name rows cols` line followed by a line of
//! row-major values. Values carry 17 significant digits, enough for every
//! f64 to parse back to the identical bit pattern.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkern::{Mat, TensorSet};
use crate::training::BaselineRegressor;

use super::{CellKind, ModelConfig, ModelParams};

pub const CKPT_HEADER: &str = "#mixer-ckpt v1";

fn push_block(out: &mut String, name: &str, m: &Mat) {
    let _ = writeln!(out, "{name} {} {}", m.rows(), m.cols());
    let mut first = true;
    for v in m.data() {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

pub fn checkpoint_string(params: &ModelParams) -> String {
    let mut out = String::new();
    out.push_str(CKPT_HEADER);
    out.push('\n');
    push_block(
        &mut out,
        "encoder.window",
        &Mat::from_vec(1, 1, vec![params.config.window as f64]).unwrap(),
    );
    for (name, m) in params.tensors() {
        push_block(&mut out, name, m);
    }
    let h = params.hidden();
    push_block(
        &mut out,
        "baseline.w",
        &Mat::from_vec(1, h, params.baseline.weights.clone()).unwrap(),
    );
    push_block(
        &mut out,
        "baseline.b",
        &Mat::from_vec(1, 1, vec![params.baseline.bias]).unwrap(),
    );
    out
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_string(params)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<ModelParams> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CKPT_HEADER => {}
        _ => return Err(perr(1, format!("missing header {CKPT_HEADER:?}"))),
    }
    let mut blocks: BTreeMap<String, Mat> = BTreeMap::new();
    while let Some((i, head)) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = head.split_whitespace().collect();
        let [name, rows, cols] = fields[..] else {
            return Err(perr(i + 1, format!("expected `name rows cols`, got {head:?}")));
        };
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| perr(i + 1, format!("bad dimension {s:?}: {e}")))
        };
        let (rows, cols) = (dim(rows)?, dim(cols)?);
        let (j, body) = lines
            .next()
            .ok_or_else(|| perr(i + 2, format!("tensor {name} has no values")))?;
        let data = body
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| perr(j + 1, format!("bad value {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if data.len() != rows * cols {
            return Err(perr(
                j + 1,
                format!("tensor {name} declares {rows}x{cols} but has {} values", data.len()),
            ));
        }
        let m = Mat::from_vec(rows, cols, data).map_err(|e| perr(j + 1, e.to_string()))?;
        if blocks.insert(name.to_string(), m).is_some() {
            return Err(perr(i + 1, format!("duplicate tensor {name}")));
        }
    }

    let missing = |name: &str| perr(0, format!("missing tensor {name}"));
    let cell = if blocks.contains_key("elman.m_i") {
        CellKind::Elman
    } else if blocks.contains_key("lstm.w_x") {
        CellKind::Lstm
    } else {
        return Err(missing("elman.m_i or lstm.w_x"));
    };
    let m_o = blocks.get("m_o").ok_or_else(|| missing("m_o"))?;
    let pos = blocks
        .get("encoder.position")
        .ok_or_else(|| missing("encoder.position"))?;
    let window = blocks
        .get("encoder.window")
        .ok_or_else(|| missing("encoder.window"))?
        .data()[0];
    if window < 1.0 || window.fract() != 0.0 {
        return Err(perr(
            0,
            format!("encoder.window must be a positive integer, got {window}"),
        ));
    }
    let config = ModelConfig {
        cell,
        vocab: m_o.rows(),
        hidden: m_o.cols(),
        window: window as usize,
        max_source: pos.rows(),
    };
    let mut params = ModelParams::zeros(config).map_err(|e| perr(0, e.to_string()))?;
    for (name, slot) in params.tensors_mut() {
        let m = blocks.remove(name).ok_or_else(|| missing(name))?;
        if m.shape() != slot.shape() {
            return Err(perr(
                0,
                format!("tensor {name} is {:?}, model expects {:?}", m.shape(), slot.shape()),
            ));
        }
        *slot = m;
    }
    let w = blocks.remove("baseline.w").ok_or_else(|| missing("baseline.w"))?;
    let b = blocks.remove("baseline.b").ok_or_else(|| missing("baseline.b"))?;
    if w.data().len() != config.hidden || b.data().len() != 1 {
        return Err(perr(0, "baseline tensors do not match the hidden size".into()));
    }
    params.baseline = BaselineRegressor {
        weights: w.data().to_vec(),
        bias: b.data()[0],
    };
    blocks.remove("encoder.window");
    if let Some(extra) = blocks.keys().next() {
        return Err(perr(0, format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}
