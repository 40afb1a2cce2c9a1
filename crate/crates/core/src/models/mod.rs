//! The seven sequence models.
//!
//! | kind       | input labels | leak free | notes                                        |
//! |------------|--------------|-----------|----------------------------------------------|
//! | `dkt`      | ground truth | no        | LSTM over KC-response embeddings             |
//! | `dkt-ml`   | mask last    | yes       | adds `g_MASK`                                |
//! | `dkt-ad`   | ground truth | yes       | siblings fed the model's own prediction      |
//! | `dkt-fuse` | ground truth | yes       | one averaged input per question              |
//! | `akt`      | ground truth | no        | Rasch embeddings, monotonic attention        |
//! | `akt-ml`   | mask last    | yes       | adds `g_MASK` and `f_(c, MASK)`              |
//! | `akt-qm`   | ground truth | yes       | response stream masked by question occurrence |

mod akt;
mod checkpoint;
mod dkt;
mod loss;
mod masks;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::expansion::{ExpandedSequence, InputLabel, LabelPolicy};
use crate::scalar::Scalar;

pub use checkpoint::Checkpoint;
pub use loss::loss;
pub use masks::{akt_masks, qm_mask, BinaryMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "dkt")]
    Dkt,
    #[serde(rename = "dkt-ml")]
    DktMl,
    #[serde(rename = "dkt-ad")]
    DktAd,
    #[serde(rename = "dkt-fuse")]
    DktFuse,
    #[serde(rename = "akt")]
    Akt,
    #[serde(rename = "akt-ml")]
    AktMl,
    #[serde(rename = "akt-qm")]
    AktQm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Dkt,
    Akt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Dkt,
        ModelKind::DktMl,
        ModelKind::DktAd,
        ModelKind::DktFuse,
        ModelKind::Akt,
        ModelKind::AktMl,
        ModelKind::AktQm,
    ];

    pub const LEAK_FREE: [ModelKind; 5] =
        [ModelKind::DktMl, ModelKind::DktAd, ModelKind::DktFuse, ModelKind::AktMl, ModelKind::AktQm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dkt => "dkt",
            ModelKind::DktMl => "dkt-ml",
            ModelKind::DktAd => "dkt-ad",
            ModelKind::DktFuse => "dkt-fuse",
            ModelKind::Akt => "akt",
            ModelKind::AktMl => "akt-ml",
            ModelKind::AktQm => "akt-qm",
        }
    }

    pub fn family(self) -> Family {
        match self {
            ModelKind::Dkt | ModelKind::DktMl | ModelKind::DktAd | ModelKind::DktFuse => Family::Dkt,
            ModelKind::Akt | ModelKind::AktMl | ModelKind::AktQm => Family::Akt,
        }
    }

    pub fn label_policy(self) -> LabelPolicy {
        if self.uses_mask_label() {
            LabelPolicy::MaskLast
        } else {
            LabelPolicy::GroundTruth
        }
    }

    pub fn uses_mask_label(self) -> bool {
        matches!(self, ModelKind::DktMl | ModelKind::AktMl)
    }

    /// No prediction for a question occurrence can depend on its own response.
    pub fn is_leak_free(self) -> bool {
        !matches!(self, ModelKind::Dkt | ModelKind::Akt)
    }

    /// Whether the model reads the KC-expanded sequence step by step.
    pub fn expands(self) -> bool {
        self != ModelKind::DktFuse
    }

    pub fn default_batch_size(self) -> usize {
        match self.family() {
            Family::Dkt => 128,
            Family::Akt => 24,
        }
    }

    fn response_labels(self) -> usize {
        if self.uses_mask_label() {
            3
        } else {
            2
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding dimension.
    pub d: usize,
    /// LSTM state width, or attention / feed-forward width.
    pub hidden: usize,
    pub attention_blocks: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig { kind, d: 64, hidden: 64, attention_blocks: 2, attention_heads: 4, dropout: 0.2, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.kind.family() == Family::Akt {
            if self.attention_blocks == 0 || self.attention_heads == 0 {
                return Err(Error::Config("attention blocks and heads must be positive".into()));
            }
            if !self.hidden.is_multiple_of(self.attention_heads) {
                return Err(Error::Config(format!(
                    "{} heads do not divide hidden width {}",
                    self.attention_heads, self.hidden
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Where a step's probability sits, for traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub student: usize,
    pub occurrence: usize,
    pub question: usize,
    pub kc: usize,
    pub group_index: usize,
    pub group_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPrediction<T> {
    pub probability: T,
    pub target: bool,
    pub alignment: Alignment,
}

pub(crate) struct Layout {
    pub kc_emb: ParamId,
    pub resp_emb: ParamId,
    pub dkt: Option<dkt::DktParams>,
    pub akt: Option<akt::AktParams>,
}

/// Graph outputs of one forward pass.
pub(crate) struct Forward {
    /// `n x 1` probabilities, one per valid step.
    pub steps: Var,
    /// `g x 1` question-level probabilities, for models trained on them.
    pub questions: Option<Var>,
}

/// Per-pass dropout source; `None` means inference.
pub(crate) struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(this: &mut Option<Dropout<'_>>, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let Some(d) = this.as_mut() else { return x };
        if d.rate <= 0.0 {
            return x;
        }
        let (m, n) = tape.shape(x);
        let keep = T::lit(1.0 / (1.0 - d.rate));
        let mask = (0..m * n).map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep }).collect();
        let mask = tape.constant(m, n, mask);
        tape.mul(x, mask)
    }
}

/// A knowledge tracing model over the scalar type `T`.
pub struct Model<T> {
    config: ModelConfig,
    num_questions: usize,
    num_kcs: usize,
    params: ParamStore<T>,
    layout: Layout,
    forward_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model::from_params(self.config.clone(), self.num_questions, self.num_kcs, self.params.clone())
            .expect("cloned parameters keep their layout")
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("num_questions", &self.num_questions)
            .field("num_kcs", &self.num_kcs)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    scale: f64,
}

impl Init {
    pub fn uniform<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let s = self.scale;
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::lit(self.rng.random_range(-s..s))).collect())
    }
}

pub(crate) fn fill<T: Scalar>(rows: usize, cols: usize, v: f64) -> Tensor<T> {
    Tensor::from_vec(rows, cols, vec![T::lit(v); rows * cols])
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn uniformly in `±1/sqrt(d)` from `config.seed`.
    pub fn new(config: ModelConfig, num_questions: usize, num_kcs: usize) -> Result<Self> {
        config.validate()?;
        if num_kcs == 0 || num_questions == 0 {
            return Err(Error::Config("model needs at least one question and one KC".into()));
        }
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed), scale: 1.0 / (config.d as f64).sqrt() };
        let mut params = ParamStore::new();
        let d = config.d;
        let kc_emb = params.insert("embedding.kc", init.uniform(num_kcs, d));
        let resp_emb = params.insert("embedding.response", init.uniform(config.kind.response_labels(), d));
        let mut layout = Layout { kc_emb, resp_emb, dkt: None, akt: None };
        match config.kind.family() {
            Family::Dkt => layout.dkt = Some(dkt::DktParams::register(&mut params, &mut init, &config, num_kcs)),
            Family::Akt => {
                layout.akt = Some(akt::AktParams::register(&mut params, &mut init, &config, num_questions, num_kcs))
            }
        }
        Ok(Model { config, num_questions, num_kcs, params, layout, forward_calls: AtomicUsize::new(0) })
    }

    /// Rebuild around an existing parameter store, checking names and shapes.
    pub fn from_params(config: ModelConfig, num_questions: usize, num_kcs: usize, params: ParamStore<T>) -> Result<Self> {
        let mut model = Model::new(config, num_questions, num_kcs)?;
        if model.params.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, name, fresh), (_, other_name, t)) in model.params.iter().zip(params.iter()) {
            if name != other_name || fresh.rows != t.rows || fresh.cols != t.cols {
                return Err(Error::Validation(format!(
                    "parameter {other_name} [{}x{}] does not match {name} [{}x{}]",
                    t.rows, t.cols, fresh.rows, fresh.cols
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn num_kcs(&self) -> usize {
        self.num_kcs
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of forward passes run since construction or the last reset.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    /// `e_c + g_label`.
    pub fn embed_kc_response(&self, kc: usize, label: InputLabel) -> Result<Vec<T>> {
        if label == InputLabel::Mask && !self.kind().uses_mask_label() {
            return Err(Error::Contract(format!("{} has no mask label embedding", self.kind())));
        }
        self.check_kc(kc)?;
        let e = self.params.get(self.layout.kc_emb).row(kc);
        let g = self.params.get(self.layout.resp_emb).row(label.index());
        Ok(e.iter().zip(g).map(|(&a, &b)| a + b).collect())
    }

    /// Rasch-style (query, value) embeddings for the AKT family:
    /// `e_c + mu_q d_c` and `e_c + g_label + mu_q f_(c,label)`.
    pub fn rasch_embed(&self, question: usize, kc: usize, label: Option<InputLabel>) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let akt = self
            .layout
            .akt
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} has no Rasch embeddings", self.kind())))?;
        self.check_kc(kc)?;
        if question >= self.num_questions {
            return Err(Error::Contract(format!("question {question} out of range")));
        }
        let mu = self.params.get(akt.mu).data[question];
        let e = self.params.get(self.layout.kc_emb).row(kc);
        let dv = self.params.get(akt.var_d).row(kc);
        let query = e.iter().zip(dv).map(|(&a, &b)| a + mu * b).collect();
        let value = match label {
            None => None,
            Some(label) => {
                let pair = self.embed_kc_response(kc, label)?;
                let f = self.params.get(akt.var_f).row(kc * self.kind().response_labels() + label.index());
                Some(pair.iter().zip(f).map(|(&a, &b)| a + mu * b).collect())
            }
        };
        Ok((query, value))
    }

    fn check_kc(&self, kc: usize) -> Result<()> {
        if kc >= self.num_kcs {
            return Err(Error::Contract(format!("KC {kc} out of range for {} KCs", self.num_kcs)));
        }
        Ok(())
    }

    fn check_window(&self, window: &ExpandedSequence, n: usize) -> Result<()> {
        for s in &window.steps[..n] {
            if s.kc >= self.num_kcs || s.question >= self.num_questions {
                return Err(Error::Contract(format!("step ({}, {}) is outside the model's id range", s.question, s.kc)));
            }
        }
        Ok(())
    }

    pub(crate) fn build(&self, tape: &mut Tape<'_, T>, window: &ExpandedSequence, dropout: Option<Dropout<'_>>) -> Result<Forward> {
        let n = window.valid_len();
        self.check_window(window, n)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        match self.kind() {
            ModelKind::DktFuse => dkt::forward_fuse(self, tape, window, n, dropout),
            ModelKind::Dkt | ModelKind::DktMl | ModelKind::DktAd => dkt::forward(self, tape, window, n, dropout),
            ModelKind::Akt | ModelKind::AktMl | ModelKind::AktQm => akt::forward(self, tape, window, n, dropout),
        }
    }

    /// Probability of a correct response at every non-pad step, in one pass.
    pub fn predict(&self, window: &ExpandedSequence) -> Result<Vec<T>> {
        if window.valid_len() == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let out = self.build(&mut tape, window, None)?;
        Ok(tape.value(out.steps).to_vec())
    }

    /// Predictions with alignment and targets.
    pub fn predict_steps(&self, window: &ExpandedSequence) -> Result<Vec<StepPrediction<T>>> {
        let probs = self.predict(window)?;
        Ok(probs
            .into_iter()
            .zip(&window.steps)
            .map(|(p, s)| StepPrediction {
                probability: p,
                target: s.target,
                alignment: Alignment {
                    student: window.student,
                    occurrence: s.occurrence,
                    question: s.question,
                    kc: s.kc,
                    group_index: s.group_index,
                    group_size: s.group_size,
                },
            })
            .collect())
    }

    /// Full `|C|`-wide output vector before each step (DKT family only).
    pub fn output_vectors(&self, window: &ExpandedSequence) -> Result<Vec<Vec<T>>> {
        dkt::output_vectors(self, window)
    }

    /// Summed BCE over the window, the number of loss terms, and gradients of the sum.
    pub fn loss_and_grads(&self, window: &ExpandedSequence, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(T, usize, Grads<T>)> {
        if window.valid_len() == 0 {
            return Err(Error::EmptyInput("window has no valid steps".into()));
        }
        let mut tape = Tape::new(&self.params);
        let dropout = dropout_rng.map(|rng| Dropout { rate: self.config.dropout, rng });
        let out = self.build(&mut tape, window, dropout)?;
        let (probs, targets): (Var, Vec<T>) = match out.questions {
            Some(q) => (q, window.groups().iter().map(|g| target_of(window.steps[g.start].target)).collect()),
            None => (out.steps, window.steps[..window.valid_len()].iter().map(|s| target_of(s.target)).collect()),
        };
        let count = targets.len();
        let total = tape.bce(probs, targets, vec![T::one(); count]);
        let value = tape.scalar(total);
        let grads = tape.backward(total);
        Ok((value, count, grads))
    }
}

fn target_of<T: Scalar>(t: bool) -> T {
    if t {
        T::one()
    } else {
        T::zero()
    }
}

/// Shared embedding-row lookups used by both families.
pub(crate) fn label_rows(kind: ModelKind, window: &ExpandedSequence, n: usize) -> Result<Vec<usize>> {
    window.steps[..n]
        .iter()
        .enumerate()
        .map(|(i, s)| match s.input_label {
            InputLabel::Mask if kind.uses_mask_label() => Ok(2),
            // placeholder row, zeroed downstream
            InputLabel::Mask if i + 1 == n || kind == ModelKind::AktQm => Ok(0),
            InputLabel::Mask => Err(Error::Contract(format!("{kind} cannot consume a mask label at step {i}"))),
            l => Ok(l.index()),
        })
        .collect()
}
