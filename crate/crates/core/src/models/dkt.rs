//! LSTM knowledge tracing: plain, mask-label, autoregressive and fused inputs.

use super::{label_rows, Dropout, Forward, Init, Model, ModelConfig, ModelKind};
use crate::autodiff::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::expansion::{ExpandedSequence, InputLabel};
use crate::scalar::Scalar;

pub(crate) struct DktParams {
    /// `4h x (d + h)`, gate order input, forget, cell, output.
    pub lstm_w: ParamId,
    pub lstm_b: ParamId,
    /// `|C| x h`
    pub out_w: ParamId,
    /// `|C| x 1`
    pub out_b: ParamId,
}

impl DktParams {
    pub fn register<T: Scalar>(params: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig, num_kcs: usize) -> Self {
        let (d, h) = (cfg.d, cfg.hidden);
        DktParams {
            lstm_w: params.insert("lstm.weight", init.uniform(4 * h, d + h)),
            lstm_b: params.insert("lstm.bias", init.uniform(1, 4 * h)),
            out_w: params.insert("output.weight", init.uniform(num_kcs, h)),
            out_b: params.insert("output.bias", init.uniform(num_kcs, 1)),
        }
    }
}

struct Cell {
    h: Var,
    c: Var,
}

fn lstm_step<T: Scalar>(tape: &mut Tape<'_, T>, p: &DktParams, hidden: usize, x: Var, state: &Cell) -> Cell {
    let w = tape.param(p.lstm_w);
    let b = tape.param(p.lstm_b);
    let xh = tape.concat_cols(x, state.h);
    let gates = tape.matmul_bt(xh, w);
    let gates = tape.add_row(gates, b);
    let i = tape.slice_cols(gates, 0, hidden);
    let f = tape.slice_cols(gates, hidden, hidden);
    let g = tape.slice_cols(gates, 2 * hidden, hidden);
    let o = tape.slice_cols(gates, 3 * hidden, hidden);
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let keep = tape.mul(f, state.c);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    Cell { h, c }
}

fn initial_state<T: Scalar>(tape: &mut Tape<'_, T>, hidden: usize) -> Cell {
    Cell { h: tape.zeros(1, hidden), c: tape.zeros(1, hidden) }
}

/// `sigmoid(W[kc] . h + b[kc])`, a `1 x 1` node.
fn predict_kc<T: Scalar>(tape: &mut Tape<'_, T>, p: &DktParams, h: Var, kc: usize) -> Var {
    let w = tape.param(p.out_w);
    let b = tape.param(p.out_b);
    let wr = tape.gather_rows(w, vec![kc]);
    let br = tape.gather_rows(b, vec![kc]);
    let z = tape.row_dot(h, wr);
    let z = tape.add(z, br);
    tape.sigmoid(z)
}

fn pair_embedding<T: Scalar>(tape: &mut Tape<'_, T>, model: &Model<T>, kc: usize, label_row: usize) -> Var {
    let e = tape.param(model.layout.kc_emb);
    let g = tape.param(model.layout.resp_emb);
    let er = tape.gather_rows(e, vec![kc]);
    let gr = tape.gather_rows(g, vec![label_row]);
    tape.add(er, gr)
}

/// `e_c + p g_1 + (1 - p) g_0` for a `1 x 1` probability node `p`.
fn blended_embedding<T: Scalar>(tape: &mut Tape<'_, T>, model: &Model<T>, kc: usize, p: Var) -> Var {
    let e = tape.param(model.layout.kc_emb);
    let g = tape.param(model.layout.resp_emb);
    let er = tape.gather_rows(e, vec![kc]);
    let g1 = tape.gather_rows(g, vec![1]);
    let g0 = tape.gather_rows(g, vec![0]);
    let q = tape.affine(p, -T::one(), T::one());
    let a = tape.scale_by(g1, p);
    let b = tape.scale_by(g0, q);
    let x = tape.add(er, a);
    tape.add(x, b)
}

pub(crate) fn forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    window: &ExpandedSequence,
    n: usize,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Forward> {
    let p = model.layout.dkt.as_ref().expect("dkt parameters");
    let hidden = model.config.hidden;
    let kind = model.kind();
    let rows = if kind == ModelKind::DktAd { Vec::new() } else { label_rows(kind, window, n)? };
    let mut state = initial_state(tape, hidden);
    let mut probs = Vec::with_capacity(n);
    for (t, step) in window.steps[..n].iter().enumerate() {
        // state holds inputs of steps < t only
        let h = Dropout::apply(&mut dropout, tape, state.h);
        let prob = predict_kc(tape, p, h, step.kc);
        probs.push(prob);
        if t + 1 == n {
            break;
        }
        let x = match kind {
            ModelKind::DktAd if !step.is_last_in_group() => blended_embedding(tape, model, step.kc, prob),
            ModelKind::DktAd => match step.input_label {
                InputLabel::Mask => return Err(Error::Contract(format!("dkt-ad needs the response at step {t}"))),
                l => pair_embedding(tape, model, step.kc, l.index()),
            },
            _ => pair_embedding(tape, model, step.kc, rows[t]),
        };
        state = lstm_step(tape, p, hidden, x, &state);
    }
    let steps = tape.stack_rows(probs);
    Ok(Forward { steps, questions: None })
}

/// One averaged input per question occurrence; each KC of an occurrence is
/// scored from the state before it, and the question score is their mean.
pub(crate) fn forward_fuse<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    window: &ExpandedSequence,
    n: usize,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Forward> {
    let p = model.layout.dkt.as_ref().expect("dkt parameters");
    let hidden = model.config.hidden;
    let groups = window.groups();
    let mut state = initial_state(tape, hidden);
    let mut step_probs = Vec::with_capacity(n);
    let mut question_probs = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let h = Dropout::apply(&mut dropout, tape, state.h);
        let members: Vec<Var> = window.steps[g.range()].iter().map(|s| predict_kc(tape, p, h, s.kc)).collect();
        step_probs.extend(members.iter().copied());
        let stacked = tape.stack_rows(members);
        question_probs.push(tape.mean_rows(stacked));
        if gi + 1 == groups.len() {
            break;
        }
        let last = &window.steps[g.start + g.len - 1];
        let label = match last.input_label {
            InputLabel::Mask => {
                return Err(Error::Contract(format!("dkt-fuse needs the response of occurrence {}", g.occurrence)))
            }
            l => l.index(),
        };
        let pairs: Vec<Var> = window.steps[g.range()].iter().map(|s| pair_embedding(tape, model, s.kc, label)).collect();
        let stacked = tape.stack_rows(pairs);
        let x = tape.mean_rows(stacked);
        state = lstm_step(tape, p, hidden, x, &state);
    }
    let steps = tape.stack_rows(step_probs);
    let questions = tape.stack_rows(question_probs);
    Ok(Forward { steps, questions: Some(questions) })
}

/// Full sigmoid output `y_t` over every KC, for each valid step.
pub(crate) fn output_vectors<T: Scalar>(model: &Model<T>, window: &ExpandedSequence) -> Result<Vec<Vec<T>>> {
    let p = model
        .layout
        .dkt
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{} has no KC-wide output layer", model.kind())))?;
    if model.kind() == ModelKind::DktFuse {
        return Err(Error::Contract("dkt-fuse scores question groups, not single steps".into()));
    }
    let n = window.valid_len();
    model.check_window(window, n)?;
    let mut tape = Tape::new(&model.params);
    let hidden = model.config.hidden;
    let kind = model.kind();
    let rows = if kind == ModelKind::DktAd { Vec::new() } else { label_rows(kind, window, n)? };
    let mut state = initial_state(&mut tape, hidden);
    let w = model.params.get(p.out_w);
    let b = model.params.get(p.out_b);
    let mut out = Vec::with_capacity(n);
    for (t, step) in window.steps[..n].iter().enumerate() {
        let h = tape.value(state.h).to_vec();
        let y: Vec<T> = (0..model.num_kcs)
            .map(|c| sigmoid(w.row(c).iter().zip(&h).fold(b.data[c], |s, (&a, &x)| s + a * x)))
            .collect();
        let prob = tape.constant(1, 1, vec![y[step.kc]]);
        out.push(y);
        if t + 1 == n {
            break;
        }
        let x = match kind {
            ModelKind::DktAd if !step.is_last_in_group() => blended_embedding(&mut tape, model, step.kc, prob),
            ModelKind::DktAd => pair_embedding(&mut tape, model, step.kc, step.input_label.index()),
            _ => pair_embedding(&mut tape, model, step.kc, rows[t]),
        };
        state = lstm_step(&mut tape, p, hidden, x, &state);
    }
    Ok(out)
}
