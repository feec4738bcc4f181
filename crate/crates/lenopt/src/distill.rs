//! Two-stage distillation and the pipeline runner.
//!
//! A pipeline is a chain of steps in the notation "(1) ID,20,F -> (2)
//! PD,10,T": method, epoch count, LengthDrop flag. ID matches teacher hidden
//! states (through a learned projection) and attention matrices; PD matches
//! temperature-scaled output distributions; FT trains on gold spans and is
//! legal only inside a teacher pipeline. Steps with the LengthDrop flag add
//! sandwich passes: randomly length- and layer-reduced sub-models that mimic
//! the same update's full-length logits.

use crate::encoder::{
    sample_layer_mask, sample_length_config, EncoderError, EncoderModel, ForwardTrace,
    LengthConfig, TapedTrace,
};
use crate::eval::{evaluate_model, EvalError, SpanExample, SpanTask};
use crate::tensor::{Tape, Tensor, TensorError, Val};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum DistillError {
    Parse { offset: usize, what: String },
    BadParameter { what: &'static str, value: f64 },
    UnknownVariant { name: String },
    FtInStudentPipeline,
    TeacherPipelineNotFt,
    TeacherTraceNotFull { layer: usize },
    HeadCountMismatch { student: usize, teacher: usize },
    MissingAttention { layer: usize },
    BadLayerMap { entry: (usize, usize), student_layers: usize, teacher_layers: usize },
    NumericFailure { step_index: usize, epoch: usize },
    Encoder(EncoderError),
    Tensor(TensorError),
    Eval(EvalError),
}

impl fmt::Display for DistillError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistillError::Parse { offset, what } => {
                write!(f, "pipeline parse error at offset {offset}: {what}")
            }
            DistillError::BadParameter { what, value } => {
                write!(f, "bad parameter {what}: {value}")
            }
            DistillError::UnknownVariant { name } => write!(f, "unknown variant {name:?}"),
            DistillError::FtInStudentPipeline => {
                write!(f, "FT step in a student pipeline: students learn only via distillation")
            }
            DistillError::TeacherPipelineNotFt => {
                write!(f, "teacher pipelines may contain only FT steps")
            }
            DistillError::TeacherTraceNotFull { layer } => {
                write!(f, "teacher trace is length-reduced at layer {layer}; ID needs a full teacher pass")
            }
            DistillError::HeadCountMismatch { student, teacher } => {
                write!(f, "attention head counts differ: student {student}, teacher {teacher}")
            }
            DistillError::MissingAttention { layer } => {
                write!(f, "student layer {layer} has no attention record (skipped layer?)")
            }
            DistillError::BadLayerMap { entry, student_layers, teacher_layers } => {
                write!(
                    f,
                    "layer map entry {:?} out of range for student {} / teacher {} layers",
                    entry, student_layers, teacher_layers
                )
            }
            DistillError::NumericFailure { step_index, epoch } => {
                write!(f, "non-finite loss at step {step_index}, epoch {epoch}")
            }
            DistillError::Encoder(e) => write!(f, "{e}"),
            DistillError::Tensor(e) => write!(f, "{e}"),
            DistillError::Eval(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DistillError {}

impl From<EncoderError> for DistillError {
    fn from(e: EncoderError) -> Self {
        DistillError::Encoder(e)
    }
}

impl From<TensorError> for DistillError {
    fn from(e: TensorError) -> Self {
        DistillError::Tensor(e)
    }
}

impl From<EvalError> for DistillError {
    fn from(e: EvalError) -> Self {
        DistillError::Eval(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Id,
    Pd,
    Ft,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Id => "ID",
            Method::Pd => "PD",
            Method::Ft => "FT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStep {
    pub method: Method,
    pub epochs: usize,
    pub length_drop: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub steps: Vec<PipelineStep>,
    pub teacher_pipeline: Option<Box<PipelineSpec>>,
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| format!("{},{},{}", s.method, s.epochs, if s.length_drop { "T" } else { "F" }))
            .collect();
        write!(f, "{}", parts.join(" -> "))
    }
}

impl PipelineSpec {
    /// Scales every step (teacher pipeline included) down to at most `cap`
    /// epochs; the full-scale counts stay the documented defaults.
    pub fn with_epochs_capped(mut self, cap: usize) -> PipelineSpec {
        let cap = cap.max(1);
        for s in &mut self.steps {
            s.epochs = s.epochs.min(cap);
        }
        self.teacher_pipeline = self.teacher_pipeline.map(|t| Box::new(t.with_epochs_capped(cap)));
        self
    }
}

/// Parses "(1) ID,20,F -> (2) PD,10,T". Step-number prefixes are optional,
/// whitespace is free, the arrow may be "->" or "→", and T/F are
/// case-insensitive. Errors carry the character offset into `text`.
pub fn parse_pipeline(text: &str) -> Result<PipelineSpec, DistillError> {
    let chars: Vec<char> = text.chars().collect();
    let mut segments: Vec<(usize, String)> = Vec::new();
    let mut seg_start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if chars[i] == '→' {
            segments.push((seg_start, chars[seg_start..i].iter().collect()));
            i += 1;
            seg_start = i;
        } else if chars[i] == '-' && chars.get(i + 1) == Some(&'>') {
            segments.push((seg_start, chars[seg_start..i].iter().collect()));
            i += 2;
            seg_start = i;
        } else {
            i += 1;
        }
    }
    segments.push((seg_start, chars[seg_start..].iter().collect()));

    let mut steps = Vec::with_capacity(segments.len());
    for (off, seg) in &segments {
        steps.push(parse_step(*off, seg)?);
    }
    Ok(PipelineSpec { steps, teacher_pipeline: None })
}

fn parse_step(seg_off: usize, seg: &str) -> Result<PipelineStep, DistillError> {
    // errors report character offsets into the whole pipeline string
    let err = |sub: &str, what: String| {
        let byte = sub.as_ptr() as usize - seg.as_ptr() as usize;
        DistillError::Parse { offset: seg_off + seg[..byte].chars().count(), what }
    };
    let mut body = seg.trim();
    if body.is_empty() {
        return Err(err(seg, "empty step (dangling arrow?)".into()));
    }
    if let Some(rest) = body.strip_prefix('(') {
        match rest.find(')') {
            Some(close) => {
                let inside = &rest[..close];
                if inside.is_empty() || !inside.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(err(inside, format!("step number must be an integer, got {inside:?}")));
                }
                body = rest[close + 1..].trim_start();
            }
            None => return Err(err(body, "unclosed step-number parenthesis".into())),
        }
    }
    let fields: Vec<&str> = body.split(',').collect();
    if fields.len() != 3 {
        return Err(err(body, format!("expected METHOD,EPOCHS,FLAG, got {body:?}")));
    }
    let m = fields[0].trim();
    let method = match m.to_ascii_uppercase().as_str() {
        "ID" => Method::Id,
        "PD" => Method::Pd,
        "FT" => Method::Ft,
        other => return Err(err(m, format!("unknown method {other:?} (expected ID, PD or FT)"))),
    };
    let e = fields[1].trim();
    let epochs: usize = e
        .parse()
        .map_err(|_| err(e, format!("epochs must be a positive integer, got {e:?}")))?;
    if epochs == 0 {
        return Err(err(e, "epochs must be at least 1".into()));
    }
    let fl = fields[2].trim();
    let length_drop = match fl.to_ascii_uppercase().as_str() {
        "T" | "TRUE" => true,
        "F" | "FALSE" => false,
        other => return Err(err(fl, format!("LengthDrop flag must be T or F, got {other:?}"))),
    };
    Ok(PipelineStep { method, epochs, length_drop })
}

/// The five training procedures worth comparing against each other, by name.
/// Epoch counts are the full-scale defaults; cap them for desk-scale runs.
pub fn variant(name: &str) -> Result<PipelineSpec, DistillError> {
    match name {
        "naive" => parse_pipeline("(1) ID,20,F -> (2) PD,10,F -> PD,10,T"),
        "v1" => parse_pipeline("(1) ID,20,F -> (2) PD,20,T"),
        "v2" => parse_pipeline("(1) ID,10,F -> (2) PD,3,F -> (3) PD,10,T"),
        "v3" => parse_pipeline("(1) ID,20,T -> (2) PD,10,T"),
        "v4" => {
            let mut spec = parse_pipeline("(1) ID,20,F -> (2) PD,10,F")?;
            spec.teacher_pipeline = Some(Box::new(parse_pipeline("(1) FT,2,F -> (2) FT,5,T")?));
            Ok(spec)
        }
        other => Err(DistillError::UnknownVariant { name: other.to_string() }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Learning rates per step kind; the full-scale defaults follow the
    /// source setup (ID 5e-5, PD 3e-5, PD with LengthDrop 2e-5).
    pub lr_id: f64,
    pub lr_pd: f64,
    pub lr_pd_ld: f64,
    pub lr_ft: f64,
    pub batch_size: usize,
    pub p_length_drop: f64,
    pub p_layer_drop: f64,
    pub num_sandwiches: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_id: 5e-5,
            lr_pd: 3e-5,
            lr_pd_ld: 2e-5,
            lr_ft: 5e-5,
            batch_size: 16,
            p_length_drop: 0.2,
            p_layer_drop: 0.2,
            num_sandwiches: 2,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        for (what, p) in [("p_length_drop", self.p_length_drop), ("p_layer_drop", self.p_layer_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DistillError::BadParameter { what, value: p });
            }
        }
        if !(self.temperature > 0.0) {
            return Err(DistillError::BadParameter { what: "temperature", value: self.temperature });
        }
        if self.batch_size == 0 {
            return Err(DistillError::BadParameter { what: "batch_size", value: 0.0 });
        }
        for (what, lr) in [
            ("lr_id", self.lr_id),
            ("lr_pd", self.lr_pd),
            ("lr_pd_ld", self.lr_pd_ld),
            ("lr_ft", self.lr_ft),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(DistillError::BadParameter { what, value: lr });
            }
        }
        Ok(())
    }

    fn lr_for(&self, step: &PipelineStep) -> f64 {
        match (step.method, step.length_drop) {
            (Method::Id, _) => self.lr_id,
            (Method::Pd, false) => self.lr_pd,
            (Method::Pd, true) => self.lr_pd_ld,
            (Method::Ft, _) => self.lr_ft,
        }
    }
}

/// Uniform strided layer correspondence: student layer i reads teacher layer
/// (i+1)·T/S - 1, so a 4-layer student against a 6-layer teacher maps to
/// teacher layers [0, 2, 3, 5].
pub fn layer_map_uniform(student_layers: usize, teacher_layers: usize) -> Vec<(usize, usize)> {
    assert!(student_layers >= 1 && teacher_layers >= student_layers);
    (0..student_layers).map(|i| (i, (i + 1) * teacher_layers / student_layers - 1)).collect()
}

fn transpose_plain(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c * rows + r] = t.data()[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], data).expect("transpose")
}

fn gather_rows_plain(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows.len(), cols], data).expect("gathered rows")
}

/// Sub-matrix of one attention head at the given positions (rows and cols).
fn gather_attn_head(attn: &Tensor, head: usize, pos: &[usize]) -> Tensor {
    let n = attn.shape()[1];
    let k = pos.len();
    let base = head * n * n;
    let mut data = Vec::with_capacity(k * k);
    for &i in pos {
        for &j in pos {
            data.push(attn.data()[base + i * n + j]);
        }
    }
    Tensor::new(vec![k, k], data).expect("gathered attention")
}

fn acc(tape: &Tape, acc: Option<Val>, v: Val) -> Result<Val, TensorError> {
    match acc {
        Some(a) => tape.add(a, v),
        None => Ok(v),
    }
}

/// Intermediate-layer loss: for every mapped (student, teacher) layer pair,
/// the MSE between projected student hidden states and the teacher's (taken
/// at the student's kept positions) plus the MSE between the corresponding
/// attention sub-matrices; summed over pairs.
pub fn id_loss(
    tape: &Tape,
    student: &TapedTrace,
    teacher: &ForwardTrace,
    layer_map: &[(usize, usize)],
    projection: Val,
) -> Result<Val, DistillError> {
    let mut total: Option<Val> = None;
    for &(s, t) in layer_map {
        if s >= student.hidden.len() || t >= teacher.hidden.len() {
            return Err(DistillError::BadLayerMap {
                entry: (s, t),
                student_layers: student.hidden.len(),
                teacher_layers: teacher.hidden.len(),
            });
        }
        if teacher.kept[t].iter().enumerate().any(|(i, &p)| i != p) {
            return Err(DistillError::TeacherTraceNotFull { layer: t });
        }

        let proj = tape.matmul(student.hidden[s], projection)?;
        let target = gather_rows_plain(&teacher.hidden[t], &student.kept[s]);
        let tv = tape.constant(&target);
        let diff = tape.sub(proj, tv)?;
        let sq = tape.mul(diff, diff)?;
        total = Some(acc(tape, total, tape.mean_all(sq))?);

        let s_attn = student.attn[s].as_ref().ok_or(DistillError::MissingAttention { layer: s })?;
        let t_heads = teacher.attn[t].shape()[0];
        if s_attn.len() != t_heads {
            return Err(DistillError::HeadCountMismatch { student: s_attn.len(), teacher: t_heads });
        }
        let pos = &student.attn_kept[s];
        let mut attn_sq: Option<Val> = None;
        for (h, &sa) in s_attn.iter().enumerate() {
            let ta = gather_attn_head(&teacher.attn[t], h, pos);
            let tv = tape.constant(&ta);
            let d = tape.sub(sa, tv)?;
            attn_sq = Some(acc(tape, attn_sq, tape.sum_all(tape.mul(d, d)?))?);
        }
        let count = (t_heads * pos.len() * pos.len()) as f64;
        total = Some(acc(tape, total, tape.scale(attn_sq.expect("at least one head"), 1.0 / count))?);
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(&Tensor::scalar(0.0))),
    }
}

/// Prediction-layer loss: soft cross-entropy between temperature-scaled
/// teacher and student distributions, averaged over rows.
pub fn pd_loss(
    tape: &Tape,
    student_logits: Val,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Val, DistillError> {
    let s_shape = tape.shape(student_logits);
    if s_shape != teacher_logits.shape() {
        return Err(DistillError::Tensor(TensorError::DimMismatch {
            op: "pd_loss",
            lhs: s_shape,
            rhs: teacher_logits.shape().to_vec(),
        }));
    }
    let t = tape.constant(teacher_logits);
    let tp = tape.softmax_rows(t, temperature)?;
    let lp = tape.log_softmax_rows(student_logits, temperature)?;
    let prod = tape.mul(tp, lp)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0 / teacher_logits.rows() as f64))
}

/// Average row entropy of the temperature-scaled softmax; the constant that
/// turns pd_loss into a KL divergence.
pub fn teacher_entropy(logits: &Tensor, temperature: f64) -> f64 {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut z = 0.0;
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| {
                let e = (v / temperature - mx).exp();
                z += e;
                e
            })
            .collect();
        for e in exps {
            let p = e / z;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows as f64
}

/// Sandwich objective: KL(full ‖ sub) = pd_loss - entropy(full). Exactly
/// zero when the sub-model reproduces the full-pass logits, which makes the
/// no-drop invariant testable; the entropy term is constant so gradients
/// match plain pd_loss.
pub fn sandwich_kl(
    tape: &Tape,
    sub_logits: Val,
    full_logits: &Tensor,
    temperature: f64,
) -> Result<Val, DistillError> {
    let ce = pd_loss(tape, sub_logits, full_logits, temperature)?;
    let h = tape.constant(&Tensor::scalar(teacher_entropy(full_logits, temperature)));
    Ok(tape.sub(ce, h)?)
}

/// Hard-label span loss: mean of the start and end cross-entropies over
/// positions. Teacher-pipeline only.
pub fn ft_loss(tape: &Tape, logits: Val, start: usize, end: usize) -> Result<Val, DistillError> {
    let n = tape.shape(logits)[0];
    let pick = |col: usize, gold: usize| -> Result<Val, DistillError> {
        let c = tape.slice_cols(logits, col, 1)?;
        let row = tape.transpose(c)?;
        let lsm = tape.log_softmax_rows(row, 1.0)?;
        let mut hot = vec![0.0; n];
        hot[gold] = 1.0;
        let oh = tape.constant(&Tensor::new(vec![1, n], hot).expect("one-hot"));
        Ok(tape.sum_all(tape.mul(lsm, oh)?))
    };
    let s = pick(0, start)?;
    let e = pick(1, end)?;
    Ok(tape.scale(tape.add(s, e)?, -0.5))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch within its step.
    pub epoch: usize,
    /// 1-based step position in the overall run; a teacher pipeline's steps
    /// come first.
    pub step_index: usize,
    pub loss_total: f64,
    pub loss_id: f64,
    pub loss_pd: f64,
    pub loss_sandwich: f64,
    pub dev_f1: f64,
}

pub struct PipelineRun {
    pub student: EncoderModel,
    pub teacher: EncoderModel,
    pub metrics: Vec<MetricsRow>,
    /// Model snapshots at step boundaries, labeled "step1", "step2", ...
    /// (teacher steps "teacher_step1", ...).
    pub checkpoints: Vec<(String, EncoderModel)>,
}

struct BatchLosses {
    total: f64,
    objective: f64,
    sandwich: f64,
}

/// One gradient-descent update on `trainee` from one mini-batch.
///
/// The update always includes the full-length pass against the step
/// objective; LengthDrop steps add `num_sandwiches` passes per example under
/// freshly sampled length configs and layer masks, each mimicking the full
/// pass's (detached) logits.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    trainee: &mut EncoderModel,
    teacher: Option<&EncoderModel>,
    projection: Option<&mut Tensor>,
    layer_map: &[(usize, usize)],
    batch: &[SpanExample],
    step: &PipelineStep,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses, DistillError> {
    let tape = Tape::new();
    let pv = trainee.register(&tape, true);
    let proj_val = projection.as_deref().map(|p| tape.leaf(p.clone().with_grad()));
    let num_layers = trainee.arch().num_layers;

    let mut obj_acc: Option<Val> = None;
    let mut sand_acc: Option<Val> = None;
    for ex in batch {
        let strace = trainee.forward_on_tape(&tape, &pv, &ex.tokens, None, None)?;
        let obj = match step.method {
            Method::Id => {
                let ttrace = teacher.expect("ID step has a teacher").forward_full(&ex.tokens)?;
                id_loss(&tape, &strace, &ttrace, layer_map, proj_val.expect("ID projection"))?
            }
            Method::Pd => {
                let ttrace = teacher.expect("PD step has a teacher").forward_full(&ex.tokens)?;
                // rows are the start and end heads, so the matched
                // distributions range over positions, as decoding does
                let st = tape.transpose(strace.logits)?;
                pd_loss(&tape, st, &transpose_plain(&ttrace.logits), cfg.temperature)?
            }
            Method::Ft => ft_loss(&tape, strace.logits, ex.start, ex.end)?,
        };
        obj_acc = Some(acc(&tape, obj_acc, obj)?);

        if step.length_drop && cfg.num_sandwiches > 0 {
            let full_logits = transpose_plain(&tape.value(strace.logits)); // detached mimicry target
            for _ in 0..cfg.num_sandwiches {
                let config =
                    sample_length_config(ex.tokens.len(), num_layers, cfg.p_length_drop, rng)?;
                let mask = sample_layer_mask(num_layers, cfg.p_layer_drop, rng)?;
                let sub =
                    trainee.forward_on_tape(&tape, &pv, &ex.tokens, Some(&config), Some(&mask))?;
                let sub_t = tape.transpose(sub.logits)?;
                let kl = sandwich_kl(&tape, sub_t, &full_logits, cfg.temperature)?;
                sand_acc = Some(acc(&tape, sand_acc, kl)?);
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    let objective = tape.scale(obj_acc.expect("non-empty batch"), inv);
    let (total, sandwich_val) = match sand_acc {
        Some(s) => {
            let sv = tape.scale(s, inv);
            (tape.add(objective, sv)?, Some(sv))
        }
        None => (objective, None),
    };

    let losses = BatchLosses {
        total: tape.item(total),
        objective: tape.item(objective),
        sandwich: sandwich_val.map_or(0.0, |v| tape.item(v)),
    };
    if !losses.total.is_finite() {
        // caller attaches step/epoch context
        return Err(DistillError::NumericFailure { step_index: 0, epoch: 0 });
    }

    let grads = tape.backward(total)?;
    let lr = cfg.lr_for(step);
    trainee.apply_gradients(&pv, &grads, lr);
    if let (Some(p), Some(pvv)) = (projection, proj_val) {
        if let Some(g) = grads.get(pvv) {
            for (pd, gd) in p.data_mut().iter_mut().zip(g.data()) {
                *pd -= lr * gd;
            }
        }
    }
    Ok(losses)
}

/// Splits off the last fifth (at least one example) as the dev set.
fn split_dev(task: &SpanTask) -> (SpanTask, SpanTask) {
    let n = task.examples.len();
    let dev_n = (n / 5).max(1).min(n.saturating_sub(1)).max(1);
    let cut = n - dev_n;
    let train = SpanTask {
        examples: task.examples[..cut.max(1)].to_vec(),
        vocab: task.vocab,
        seq_len: task.seq_len,
        seed: task.seed,
    };
    let dev = SpanTask {
        examples: task.examples[cut..].to_vec(),
        vocab: task.vocab,
        seq_len: task.seq_len,
        seed: task.seed,
    };
    (train, dev)
}

fn run_steps(
    trainee: &mut EncoderModel,
    teacher: Option<&EncoderModel>,
    steps: &[PipelineStep],
    train: &SpanTask,
    dev: &SpanTask,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    step_index_base: usize,
    checkpoint_prefix: &str,
    metrics: &mut Vec<MetricsRow>,
    checkpoints: &mut Vec<(String, EncoderModel)>,
) -> Result<(), DistillError> {
    let needs_projection = steps.iter().any(|s| s.method == Method::Id);
    let mut projection = if needs_projection {
        let t = teacher.expect("ID step has a teacher");
        let (hs, ht) = (trainee.arch().hidden, t.arch().hidden);
        Some(if hs == ht {
            let mut eye = Tensor::zeros(&[hs, ht]);
            for i in 0..hs {
                eye.data_mut()[i * ht + i] = 1.0;
            }
            eye
        } else {
            let bound = (6.0 / (hs + ht) as f64).sqrt();
            Tensor::uniform(&[hs, ht], bound, rng)
        })
    } else {
        None
    };
    let layer_map = teacher
        .map(|t| layer_map_uniform(trainee.arch().num_layers, t.arch().num_layers))
        .unwrap_or_default();
    let full_config = LengthConfig::full(trainee.arch().num_layers, dev.seq_len);

    for (si, step) in steps.iter().enumerate() {
        let step_index = step_index_base + si + 1;
        for epoch in 1..=step.epochs {
            let mut sums = (0.0, 0.0, 0.0); // total, objective, sandwich
            let mut batches = 0usize;
            for batch in train.examples.chunks(cfg.batch_size) {
                let losses = run_batch(
                    trainee,
                    teacher,
                    projection.as_mut(),
                    &layer_map,
                    batch,
                    step,
                    cfg,
                    rng,
                )
                .map_err(|e| match e {
                    DistillError::NumericFailure { .. } => {
                        DistillError::NumericFailure { step_index, epoch }
                    }
                    other => other,
                })?;
                sums.0 += losses.total;
                sums.1 += losses.objective;
                sums.2 += losses.sandwich;
                batches += 1;
            }
            let inv = 1.0 / batches as f64;
            let dev_f1 = evaluate_model(trainee, &full_config, dev)?.f1;
            let (loss_id, loss_pd) = match step.method {
                Method::Id => (sums.1 * inv, 0.0),
                Method::Pd => (0.0, sums.1 * inv),
                // hard-label loss appears in loss_total only
                Method::Ft => (0.0, 0.0),
            };
            metrics.push(MetricsRow {
                epoch,
                step_index,
                loss_total: sums.0 * inv,
                loss_id,
                loss_pd,
                loss_sandwich: sums.2 * inv,
                dev_f1,
            });
        }
        checkpoints.push((format!("{checkpoint_prefix}step{}", si + 1), trainee.clone()));
    }
    Ok(())
}

/// Executes a pipeline: the teacher pipeline first when present (FT steps
/// training the teacher itself), then the student steps in order, each
/// step's output feeding the next. Metrics carry one row per epoch.
pub fn run_pipeline(
    spec: &PipelineSpec,
    teacher: &EncoderModel,
    student: &EncoderModel,
    task: &SpanTask,
    cfg: &TrainingConfig,
) -> Result<PipelineRun, DistillError> {
    cfg.validate()?;
    if spec.steps.is_empty() {
        return Err(DistillError::BadParameter { what: "pipeline (empty)", value: 0.0 });
    }
    if spec.steps.iter().any(|s| s.method == Method::Ft) {
        return Err(DistillError::FtInStudentPipeline);
    }
    if let Some(tp) = &spec.teacher_pipeline {
        if tp.steps.iter().any(|s| s.method != Method::Ft) {
            return Err(DistillError::TeacherPipelineNotFt);
        }
    }
    let uses_id = spec.steps.iter().any(|s| s.method == Method::Id);
    if uses_id && student.arch().heads != teacher.arch().heads {
        return Err(DistillError::HeadCountMismatch {
            student: student.arch().heads,
            teacher: teacher.arch().heads,
        });
    }

    let (train, dev) = split_dev(task);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();

    let mut teacher = teacher.clone();
    let mut teacher_steps = 0;
    if let Some(tp) = &spec.teacher_pipeline {
        run_steps(
            &mut teacher,
            None,
            &tp.steps,
            &train,
            &dev,
            cfg,
            &mut rng,
            0,
            "teacher_",
            &mut metrics,
            &mut checkpoints,
        )?;
        teacher_steps = tp.steps.len();
    }

    let mut student = student.clone();
    run_steps(
        &mut student,
        Some(&teacher),
        &spec.steps,
        &train,
        &dev,
        cfg,
        &mut rng,
        teacher_steps,
        "",
        &mut metrics,
        &mut checkpoints,
    )?;

    Ok(PipelineRun { student, teacher, metrics, checkpoints })
}
