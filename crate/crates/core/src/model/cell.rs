//! Elman and LSTM decoder cells with their hand-derived backward passes.

use crate::error::{Error, Result};
use crate::numkern::{sigmoid_scalar, softmax, Mat};

use super::rollout::{StepInput, StepState};
use super::{CellParams, GradAccumulator, ModelParams};

/// Post-activation gate values of one LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGates {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output: Vec<f64>,
    /// tanh of the new cell state.
    pub cell_tanh: Vec<f64>,
}

fn check_input(params: &ModelParams, input: &StepInput) -> Result<()> {
    let size = params.vocab();
    let bad = match input {
        StepInput::Word(w) => (*w >= size).then_some(*w),
        StepInput::Mix(mix) => mix.indices.iter().copied().find(|&i| i >= size),
    };
    match bad {
        Some(index) => Err(Error::WordOutOfRange { index, size }),
        None => Ok(()),
    }
}

fn check_len(op: &'static str, what: &str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::shape(
            op,
            format!("{what} has length {}, expected {want}", v.len()),
        ));
    }
    Ok(())
}

/// `out += M x` for a one-hot or k-max mixed input.
fn apply_input(m: &Mat, input: &StepInput, out: &mut [f64]) {
    match input {
        StepInput::Word(w) => m.add_col_to(*w, 1.0, out),
        StepInput::Mix(mix) => {
            for (&i, &v) in mix.indices.iter().zip(&mix.weights) {
                m.add_col_to(i, v, out);
            }
        }
    }
}

fn output_layer(params: &ModelParams, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut logits = vec![0.0; params.vocab()];
    params.m_o.matvec_acc(h, &mut logits);
    let probs = softmax(&logits)?;
    Ok((logits, probs))
}

/// `h' = σ(M_i x + M_h h + M_c c)`, `logits = M_o h'`, `p = softmax(logits)`.
pub fn elman_step(params: &ModelParams, input: &StepInput, h: &[f64], ctx: &[f64]) -> Result<StepState> {
    let CellParams::Elman { m_i, m_h, m_c } = &params.cell else {
        return Err(Error::InvalidArgument("elman_step called on an LSTM model".into()));
    };
    let hid = params.hidden();
    check_input(params, input)?;
    check_len("elman_step", "hidden", h, hid)?;
    check_len("elman_step", "context", ctx, hid)?;

    let mut pre = vec![0.0; hid];
    apply_input(m_i, input, &mut pre);
    m_h.matvec_acc(h, &mut pre);
    m_c.matvec_acc(ctx, &mut pre);
    let h_new: Vec<f64> = pre.iter().map(|&v| sigmoid_scalar(v)).collect();
    let (logits, probs) = output_layer(params, &h_new)?;
    Ok(StepState {
        input: input.clone(),
        h_prev: h.to_vec(),
        cell_prev: Vec::new(),
        attention: Vec::new(),
        context: ctx.to_vec(),
        gates: None,
        h: h_new,
        cell: Vec::new(),
        logits,
        probs,
    })
}

/// Standard LSTM with the context entering every gate through its own block
/// of `w_c`.
pub fn lstm_step(params: &ModelParams, input: &StepInput, h: &[f64], cell: &[f64], ctx: &[f64]) -> Result<StepState> {
    let CellParams::Lstm { w_x, w_h, w_c, bias } = &params.cell else {
        return Err(Error::InvalidArgument("lstm_step called on an Elman model".into()));
    };
    let hid = params.hidden();
    check_input(params, input)?;
    check_len("lstm_step", "hidden", h, hid)?;
    check_len("lstm_step", "cell", cell, hid)?;
    check_len("lstm_step", "context", ctx, hid)?;

    let mut pre = bias.data().to_vec();
    apply_input(w_x, input, &mut pre);
    w_h.matvec_acc(h, &mut pre);
    w_c.matvec_acc(ctx, &mut pre);

    let gate =
        |k: usize, f: fn(f64) -> f64| -> Vec<f64> { pre[k * hid..(k + 1) * hid].iter().map(|&v| f(v)).collect() };
    let input_gate = gate(0, sigmoid_scalar);
    let forget = gate(1, sigmoid_scalar);
    let candidate = gate(2, f64::tanh);
    let output = gate(3, sigmoid_scalar);

    let cell_new: Vec<f64> = (0..hid)
        .map(|j| forget[j] * cell[j] + input_gate[j] * candidate[j])
        .collect();
    let cell_tanh: Vec<f64> = cell_new.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..hid).map(|j| output[j] * cell_tanh[j]).collect();
    let (logits, probs) = output_layer(params, &h_new)?;
    Ok(StepState {
        input: input.clone(),
        h_prev: h.to_vec(),
        cell_prev: cell.to_vec(),
        attention: Vec::new(),
        context: ctx.to_vec(),
        gates: Some(LstmGates {
            input: input_gate,
            forget,
            candidate,
            output,
            cell_tanh,
        }),
        h: h_new,
        cell: cell_new,
        logits,
        probs,
    })
}

pub(crate) struct CellGrads {
    /// Gradient w.r.t. the cell pre-activation (H for Elman, 4H for LSTM).
    pub dpre: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dcell_prev: Vec<f64>,
    pub dctx: Vec<f64>,
}

/// Backward through one cell given `dh` (w.r.t. the new hidden state) and
/// `dcell` (w.r.t. the new LSTM cell state; ignored for Elman). Accumulates
/// weight gradients except those of the input matrix, which the caller
/// handles because they depend on the input kind.
pub(crate) fn cell_backward(
    params: &ModelParams,
    step: &StepState,
    dh: &[f64],
    dcell: &[f64],
    grads: &mut GradAccumulator,
) -> CellGrads {
    let hid = params.hidden();
    match (&params.cell, &mut grads.cell) {
        (CellParams::Elman { m_h, m_c, .. }, CellParams::Elman { m_h: g_h, m_c: g_c, .. }) => {
            let dpre: Vec<f64> = (0..hid).map(|j| dh[j] * step.h[j] * (1.0 - step.h[j])).collect();
            g_h.add_outer(&dpre, &step.h_prev);
            g_c.add_outer(&dpre, &step.context);
            CellGrads {
                dh_prev: m_h.matvec_t(&dpre),
                dctx: m_c.matvec_t(&dpre),
                dcell_prev: Vec::new(),
                dpre,
            }
        }
        (
            CellParams::Lstm { w_h, w_c, .. },
            CellParams::Lstm {
                w_h: g_h,
                w_c: g_c,
                bias: g_b,
                ..
            },
        ) => {
            let g = step.gates.as_ref().expect("LSTM step records its gates");
            let mut dpre = vec![0.0; 4 * hid];
            let mut dcell_prev = vec![0.0; hid];
            for j in 0..hid {
                let d_out = dh[j] * g.cell_tanh[j];
                let ds = dh[j] * g.output[j] * (1.0 - g.cell_tanh[j] * g.cell_tanh[j]) + dcell[j];
                let d_in = ds * g.candidate[j];
                let d_forget = ds * step.cell_prev[j];
                let d_cand = ds * g.input[j];
                dcell_prev[j] = ds * g.forget[j];
                dpre[j] = d_in * g.input[j] * (1.0 - g.input[j]);
                dpre[hid + j] = d_forget * g.forget[j] * (1.0 - g.forget[j]);
                dpre[2 * hid + j] = d_cand * (1.0 - g.candidate[j] * g.candidate[j]);
                dpre[3 * hid + j] = d_out * g.output[j] * (1.0 - g.output[j]);
            }
            g_h.add_outer(&dpre, &step.h_prev);
            g_c.add_outer(&dpre, &step.context);
            g_b.data_mut().iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
            CellGrads {
                dh_prev: w_h.matvec_t(&dpre),
                dctx: w_c.matvec_t(&dpre),
                dcell_prev,
                dpre,
            }
        }
        _ => unreachable!("gradient buffers mirror the parameter cell kind"),
    }
}
