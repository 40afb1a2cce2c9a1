//! Attention knowledge tracing with Rasch embeddings.
//!
//! Three attention stages: a question encoder and a knowledge encoder (both
//! self-attention under the lower-triangular mask) and a knowledge retriever
//! whose queries and keys come from encoded questions and whose values come
//! from encoded responses, under the response-stream mask. Attention scores
//! decay monotonically with distance through a learned per-head rate.

use super::masks::{akt_masks, qm_mask, BinaryMatrix};
use super::{label_rows, Dropout, Forward, Init, Model, ModelConfig, ModelKind};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::expansion::{ExpandedSequence, InputLabel};
use crate::scalar::Scalar;

pub(crate) struct AttnBlock {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    /// Per-head decay rate before softplus, `heads x 1`.
    decay: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl AttnBlock {
    fn register<T: Scalar>(params: &mut ParamStore<T>, init: &mut Init, prefix: &str, d: usize, hidden: usize, heads: usize) -> Self {
        let mut add = |name: &str, t| params.insert(format!("{prefix}.{name}"), t);
        AttnBlock {
            wq: add("query.weight", init.uniform(hidden, d)),
            bq: add("query.bias", super::fill(1, hidden, 0.0)),
            wk: add("key.weight", init.uniform(hidden, d)),
            bk: add("key.bias", super::fill(1, hidden, 0.0)),
            wv: add("value.weight", init.uniform(hidden, d)),
            bv: add("value.bias", super::fill(1, hidden, 0.0)),
            wo: add("out.weight", init.uniform(d, hidden)),
            bo: add("out.bias", super::fill(1, d, 0.0)),
            decay: add("decay", super::fill(heads, 1, -3.0)),
            ln1_gain: add("norm1.gain", super::fill(1, d, 1.0)),
            ln1_bias: add("norm1.bias", super::fill(1, d, 0.0)),
            ff1_w: add("ff1.weight", init.uniform(hidden, d)),
            ff1_b: add("ff1.bias", super::fill(1, hidden, 0.0)),
            ff2_w: add("ff2.weight", init.uniform(d, hidden)),
            ff2_b: add("ff2.bias", super::fill(1, d, 0.0)),
            ln2_gain: add("norm2.gain", super::fill(1, d, 1.0)),
            ln2_bias: add("norm2.bias", super::fill(1, d, 0.0)),
        }
    }
}

pub(crate) struct AktParams {
    /// Question difficulty `mu_q`, `|Q| x 1`, initialised to zero.
    pub mu: ParamId,
    /// Variation vectors `d_c`, `|C| x d`.
    pub var_d: ParamId,
    /// Variation vectors `f_(c, label)`, row `c * labels + label`.
    pub var_f: ParamId,
    question_encoder: Vec<AttnBlock>,
    knowledge_encoder: Vec<AttnBlock>,
    retriever: AttnBlock,
    head1_w: ParamId,
    head1_b: ParamId,
    head2_w: ParamId,
    head2_b: ParamId,
}

impl AktParams {
    pub fn register<T: Scalar>(
        params: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &ModelConfig,
        num_questions: usize,
        num_kcs: usize,
    ) -> Self {
        let (d, h, heads) = (cfg.d, cfg.hidden, cfg.attention_heads);
        let labels = cfg.kind.response_labels();
        let mu = params.insert("rasch.difficulty", super::fill(num_questions, 1, 0.0));
        let var_d = params.insert("rasch.question_variation", init.uniform(num_kcs, d));
        let var_f = params.insert("rasch.response_variation", init.uniform(num_kcs * labels, d));
        let question_encoder =
            (0..cfg.attention_blocks).map(|b| AttnBlock::register(params, init, &format!("question_encoder.{b}"), d, h, heads)).collect();
        let knowledge_encoder =
            (0..cfg.attention_blocks).map(|b| AttnBlock::register(params, init, &format!("knowledge_encoder.{b}"), d, h, heads)).collect();
        let retriever = AttnBlock::register(params, init, "retriever", d, h, heads);
        AktParams {
            mu,
            var_d,
            var_f,
            question_encoder,
            knowledge_encoder,
            retriever,
            head1_w: params.insert("head.hidden.weight", init.uniform(h, 2 * d)),
            head1_b: params.insert("head.hidden.bias", super::fill(1, h, 0.0)),
            head2_w: params.insert("head.out.weight", init.uniform(1, h)),
            head2_b: params.insert("head.out.bias", super::fill(1, 1, 0.0)),
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let (w, b) = (tape.param(w), tape.param(b));
    let y = tape.matmul_bt(x, w);
    tape.add_row(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let (g, b) = (tape.param(gain), tape.param(bias));
    let y = tape.layer_norm_rows(x);
    let y = tape.mul_row(y, g);
    tape.add_row(y, b)
}

struct Ctx<'a, 'r> {
    heads: usize,
    hidden: usize,
    /// `-|i - j|`, row major `n x n`.
    neg_distance: &'a [f64],
    dropout: Option<Dropout<'r>>,
}

fn attention<T: Scalar>(tape: &mut Tape<'_, T>, blk: &AttnBlock, ctx: &mut Ctx<'_, '_>, q_in: Var, k_in: Var, v_in: Var, mask: &BinaryMatrix) -> Var {
    let n = mask.size();
    let q = linear(tape, q_in, blk.wq, blk.bq);
    let k = linear(tape, k_in, blk.wk, blk.bk);
    let v = linear(tape, v_in, blk.wv, blk.bv);
    let dk = ctx.hidden / ctx.heads;
    let scale = T::one() / T::from_usize(dk).expect("head width").sqrt();
    let decay = tape.param(blk.decay);
    let dist = tape.constant(n, n, ctx.neg_distance.iter().map(|&x| T::lit(x)).collect());
    let mut outs = Vec::with_capacity(ctx.heads);
    for h in 0..ctx.heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let vh = tape.slice_cols(v, h * dk, dk);
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let rate = tape.gather_rows(decay, vec![h]);
        let rate = tape.softplus(rate);
        let penalty = tape.scale_by(dist, rate);
        let scores = tape.add(scores, penalty);
        let weights = tape.masked_softmax_rows(scores, mask.as_slice());
        outs.push(tape.matmul(weights, vh));
    }
    let mut joined = outs[0];
    for &o in &outs[1..] {
        joined = tape.concat_cols(joined, o);
    }
    linear(tape, joined, blk.wo, blk.bo)
}

fn block<T: Scalar>(tape: &mut Tape<'_, T>, blk: &AttnBlock, ctx: &mut Ctx<'_, '_>, q_in: Var, k_in: Var, v_in: Var, mask: &BinaryMatrix) -> Var {
    let a = attention(tape, blk, ctx, q_in, k_in, v_in, mask);
    let a = Dropout::apply(&mut ctx.dropout, tape, a);
    let z = tape.add(q_in, a);
    let z = norm(tape, z, blk.ln1_gain, blk.ln1_bias);
    let f = linear(tape, z, blk.ff1_w, blk.ff1_b);
    let f = tape.relu(f);
    let f = Dropout::apply(&mut ctx.dropout, tape, f);
    let f = linear(tape, f, blk.ff2_w, blk.ff2_b);
    let out = tape.add(z, f);
    norm(tape, out, blk.ln2_gain, blk.ln2_bias)
}

pub(crate) fn forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    window: &ExpandedSequence,
    n: usize,
    dropout: Option<Dropout<'_>>,
) -> Result<Forward> {
    let p = model.layout.akt.as_ref().expect("akt parameters");
    let kind = model.kind();
    let steps = &window.steps[..n];
    let kcs: Vec<usize> = steps.iter().map(|s| s.kc).collect();
    let questions: Vec<usize> = steps.iter().map(|s| s.question).collect();
    let labels = label_rows(kind, window, n)?;
    let label_count = kind.response_labels();

    let e = tape.param(model.layout.kc_emb);
    let e = tape.gather_rows(e, kcs.clone());
    let mu = tape.param(p.mu);
    let mu = tape.gather_rows(mu, questions);
    let dv = tape.param(p.var_d);
    let dv = tape.gather_rows(dv, kcs.clone());
    let shift = tape.mul_col(dv, mu);
    let x = tape.add(e, shift);

    let g = tape.param(model.layout.resp_emb);
    let g = tape.gather_rows(g, labels.clone());
    let f = tape.param(p.var_f);
    let f = tape.gather_rows(f, kcs.iter().zip(&labels).map(|(&c, &l)| c * label_count + l).collect());
    let fshift = tape.mul_col(f, mu);
    let y = tape.add(e, g);
    let mut y = tape.add(y, fshift);
    // plain models may carry a mask label only where no one reads the
    // response value; those rows become zero
    let hidden_rows: Vec<bool> = steps.iter().map(|s| s.input_label == InputLabel::Mask && !kind.uses_mask_label()).collect();
    if hidden_rows.iter().any(|&h| h) {
        let keep = tape.constant(n, 1, hidden_rows.iter().map(|&h| if h { T::zero() } else { T::one() }).collect());
        y = tape.mul_col(y, keep);
    }

    let (lower, strict) = akt_masks(n);
    let response_mask = match kind {
        ModelKind::AktQm => qm_mask(&steps.iter().map(|s| s.occurrence).collect::<Vec<_>>()),
        _ => strict,
    };
    let neg_distance: Vec<f64> = (0..n * n).map(|k| -((k / n) as f64 - (k % n) as f64).abs()).collect();
    let mut ctx = Ctx { heads: model.config.attention_heads, hidden: model.config.hidden, neg_distance: &neg_distance, dropout };

    let mut xq = x;
    for blk in &p.question_encoder {
        xq = block(tape, blk, &mut ctx, xq, xq, xq, &lower);
    }
    let mut yk = y;
    for blk in &p.knowledge_encoder {
        yk = block(tape, blk, &mut ctx, yk, yk, yk, &lower);
    }
    let h = block(tape, &p.retriever, &mut ctx, xq, xq, yk, &response_mask);

    let z = tape.concat_cols(h, x);
    let z = linear(tape, z, p.head1_w, p.head1_b);
    let z = tape.relu(z);
    let z = Dropout::apply(&mut ctx.dropout, tape, z);
    let z = linear(tape, z, p.head2_w, p.head2_b);
    let steps = tape.sigmoid(z);
    Ok(Forward { steps, questions: None })
}
