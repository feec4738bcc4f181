//! Synthetic span-extraction task, span F1, and the two search objectives:
//! accuracy (maximize) and a deterministic compute-cost model (minimize),
//! with optional wall-clock measurement on the side.
//!
//! Task shape: every sequence starts with a CLS token, and the answer span
//! is bracketed by an OPEN marker immediately before it and a CLOSE marker
//! immediately after. A model solves the task by locating the markers.

use crate::encoder::{EncoderArch, EncoderError, EncoderModel, LengthConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

pub const TOK_CLS: usize = 0;
pub const TOK_OPEN: usize = 1;
pub const TOK_CLOSE: usize = 2;
/// CLS, OPEN, CLOSE plus at least one filler token.
pub const MIN_VOCAB: usize = 4;

#[derive(Debug)]
pub enum EvalError {
    BadParameter { what: &'static str, value: f64 },
    InvalidSpan { start: usize, end: usize },
    EmptyTask,
    BadTaskFile { line: usize, what: String },
    Encoder(EncoderError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::BadParameter { what, value } => write!(f, "bad parameter {what}: {value}"),
            EvalError::InvalidSpan { start, end } => {
                write!(f, "invalid span: start {start} > end {end}")
            }
            EvalError::EmptyTask => write!(f, "task contains no examples"),
            EvalError::BadTaskFile { line, what } => write!(f, "task file line {line}: {what}"),
            EvalError::Encoder(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<EncoderError> for EvalError {
    fn from(e: EncoderError) -> Self {
        EvalError::Encoder(e)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpanExample {
    pub tokens: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct SpanTask {
    pub examples: Vec<SpanExample>,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Marker-bracketed span dataset. Spans are 1 to 3 tokens, placed so the
/// OPEN/CLOSE markers stay inside the sequence.
pub fn generate_task(
    seed: u64,
    n_examples: usize,
    seq_len: usize,
    vocab: usize,
) -> Result<SpanTask, EvalError> {
    if seq_len < 4 {
        return Err(EvalError::BadParameter { what: "seq_len", value: seq_len as f64 });
    }
    if vocab < MIN_VOCAB {
        return Err(EvalError::BadParameter { what: "vocab", value: vocab as f64 });
    }
    if n_examples == 0 {
        return Err(EvalError::BadParameter { what: "n_examples", value: 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let mut tokens: Vec<usize> =
            (0..seq_len).map(|_| rng.gen_range(MIN_VOCAB - 1..vocab)).collect();
        tokens[0] = TOK_CLS;
        // start ≥ 2 leaves room for OPEN at start-1 (position 0 is CLS);
        // end ≤ seq_len-2 leaves room for CLOSE at end+1
        let max_span = 3.min(seq_len - 3);
        let span_len = rng.gen_range(1..=max_span);
        let start = rng.gen_range(2..=seq_len - 1 - span_len);
        let end = start + span_len - 1;
        tokens[start - 1] = TOK_OPEN;
        tokens[end + 1] = TOK_CLOSE;
        examples.push(SpanExample { tokens, start, end });
    }
    Ok(SpanTask { examples, vocab, seq_len, seed })
}

impl SpanTask {
    /// One JSON object per line: {"tokens": [...], "start": s, "end": e}.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<SpanTask, EvalError> {
        let mut examples: Vec<SpanExample> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: SpanExample = serde_json::from_str(line)
                .map_err(|e| EvalError::BadTaskFile { line: i + 1, what: e.to_string() })?;
            if ex.start > ex.end || ex.end >= ex.tokens.len() {
                return Err(EvalError::BadTaskFile {
                    line: i + 1,
                    what: format!(
                        "span [{}, {}] out of range for {} tokens",
                        ex.start,
                        ex.end,
                        ex.tokens.len()
                    ),
                });
            }
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(EvalError::EmptyTask);
        }
        let vocab = examples
            .iter()
            .flat_map(|e| e.tokens.iter())
            .max()
            .map(|&m| (m + 1).max(MIN_VOCAB))
            .unwrap();
        let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap();
        Ok(SpanTask { examples, vocab, seq_len, seed: 0 })
    }
}

/// Token-overlap F1 between two inclusive index spans.
pub fn f1_span(
    pred_start: usize,
    pred_end: usize,
    gold_start: usize,
    gold_end: usize,
) -> Result<f64, EvalError> {
    if pred_start > pred_end {
        return Err(EvalError::InvalidSpan { start: pred_start, end: pred_end });
    }
    if gold_start > gold_end {
        return Err(EvalError::InvalidSpan { start: gold_start, end: gold_end });
    }
    let lo = pred_start.max(gold_start);
    let hi = pred_end.min(gold_end);
    if lo > hi {
        return Ok(0.0);
    }
    let overlap = (hi - lo + 1) as f64;
    let p = overlap / (pred_end - pred_start + 1) as f64;
    let r = overlap / (gold_end - gold_start + 1) as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Per-layer multiply-accumulate count for retained length n, hidden h,
/// feed-forward f: 4nh² for the q/k/v/o projections, 2n²h for the two
/// attention products, 2nhf for the FFN.
pub fn cost_flops(arch: &EncoderArch, config: &LengthConfig) -> Result<f64, EvalError> {
    if config.num_layers() != arch.num_layers {
        return Err(EvalError::Encoder(EncoderError::ConfigLenMismatch {
            got: config.num_layers(),
            want: arch.num_layers,
        }));
    }
    let h = arch.hidden as f64;
    let f = arch.ff as f64;
    let mut total = 0.0;
    for &len in config.lengths() {
        let n = len as f64;
        total += 4.0 * n * h * h + 2.0 * n * n * h + 2.0 * n * h * f;
    }
    Ok(total)
}

/// Cost ratio of a reference architecture at full length over this
/// (arch, config); the plotting convention for the x axis.
pub fn speedup(
    reference: &EncoderArch,
    reference_len: usize,
    arch: &EncoderArch,
    config: &LengthConfig,
) -> Result<f64, EvalError> {
    let ref_cost =
        cost_flops(reference, &LengthConfig::full(reference.num_layers, reference_len))?;
    Ok(ref_cost / cost_flops(arch, config)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub f1: f64,
    pub exact_match: f64,
    pub cost_flops: f64,
    pub wall_clock_ms: Option<f64>,
    pub config: LengthConfig,
}

/// Argmax decode: start is the best position by start score, end the best
/// position at or after it by end score.
pub fn decode_span(logits: &Tensor) -> (usize, usize) {
    let n = logits.shape()[0];
    let mut start = 0;
    for i in 1..n {
        if logits.at2(i, 0) > logits.at2(start, 0) {
            start = i;
        }
    }
    let mut end = start;
    for i in start..n {
        if logits.at2(i, 1) > logits.at2(end, 1) {
            end = i;
        }
    }
    (start, end)
}

pub fn evaluate_model(
    model: &EncoderModel,
    config: &LengthConfig,
    task: &SpanTask,
) -> Result<EvalResult, EvalError> {
    if task.examples.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    let mut f1_sum = 0.0;
    let mut em_sum = 0.0;
    for ex in &task.examples {
        let trace = model.forward_adaptive(&ex.tokens, config)?;
        let (ps, pe) = decode_span(&trace.logits);
        f1_sum += f1_span(ps, pe, ex.start, ex.end)?;
        if ps == ex.start && pe == ex.end {
            em_sum += 1.0;
        }
    }
    let n = task.examples.len() as f64;
    Ok(EvalResult {
        f1: f1_sum / n,
        exact_match: em_sum / n,
        cost_flops: cost_flops(model.arch(), config)?,
        wall_clock_ms: None,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WallClockSummary {
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Actual repeat count after the minimum-of-3 floor.
    pub repeats: usize,
}

/// Times full-task forward passes. One warm-up pass is excluded; at least
/// three timed repeats always run.
pub fn measure_wall_clock(
    model: &EncoderModel,
    config: &LengthConfig,
    task: &SpanTask,
    repeats: usize,
) -> Result<WallClockSummary, EvalError> {
    if task.examples.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    let repeats = repeats.max(3);
    let pass = || -> Result<(), EvalError> {
        for ex in &task.examples {
            let trace = model.forward_adaptive(&ex.tokens, config)?;
            std::hint::black_box(decode_span(&trace.logits));
        }
        Ok(())
    };
    pass()?; // warm-up
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        pass()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    let p95 = times[((repeats as f64 * 0.95).ceil() as usize - 1).min(repeats - 1)];
    Ok(WallClockSummary { median_ms: median, p95_ms: p95, repeats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_generation_is_deterministic() {
        let a = generate_task(5, 20, 12, 16).unwrap();
        let b = generate_task(5, 20, 12, 16).unwrap();
        for (x, y) in a.examples.iter().zip(&b.examples) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!((x.start, x.end), (y.start, y.end));
        }
        let c = generate_task(6, 20, 12, 16).unwrap();
        assert!(a.examples.iter().zip(&c.examples).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn spans_stay_in_bounds_and_markers_line_up() {
        let task = generate_task(9, 10_000, 10, 16).unwrap();
        for ex in &task.examples {
            assert!(ex.start <= ex.end && ex.end < ex.tokens.len());
            assert_eq!(ex.tokens[0], TOK_CLS);
            assert_eq!(ex.tokens[ex.start - 1], TOK_OPEN);
            assert_eq!(ex.tokens[ex.end + 1], TOK_CLOSE);
            // exactly one marker pair per sequence
            assert_eq!(ex.tokens.iter().filter(|&&t| t == TOK_OPEN).count(), 1);
            assert_eq!(ex.tokens.iter().filter(|&&t| t == TOK_CLOSE).count(), 1);
        }
    }

    #[test]
    fn tiny_vocab_and_seq_rejected() {
        assert!(generate_task(1, 10, 12, 3).is_err());
        assert!(generate_task(1, 10, 3, 16).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let task = generate_task(3, 25, 8, 12).unwrap();
        let text = task.to_jsonl();
        let back = SpanTask::from_jsonl(&text).unwrap();
        assert_eq!(back.examples.len(), 25);
        for (a, b) in task.examples.iter().zip(&back.examples) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!((a.start, a.end), (b.start, b.end));
        }
        assert!(SpanTask::from_jsonl("").is_err());
        assert!(SpanTask::from_jsonl("{\"tokens\":[1,2],\"start\":1,\"end\":3}\n").is_err());
    }

    #[test]
    fn f1_identical_disjoint_partial() {
        assert_eq!(f1_span(2, 4, 2, 4).unwrap(), 1.0);
        assert_eq!(f1_span(0, 1, 5, 6).unwrap(), 0.0);
        // pred [3,5], gold [4,7]: overlap {4,5}, P=2/3, R=2/4
        let f1 = f1_span(3, 5, 4, 7).unwrap();
        assert!((f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn f1_symmetric_under_swap() {
        let a = f1_span(3, 5, 4, 7).unwrap();
        let b = f1_span(4, 7, 3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f1_rejects_backward_span() {
        assert!(matches!(f1_span(5, 3, 0, 1), Err(EvalError::InvalidSpan { start: 5, end: 3 })));
    }

    #[test]
    fn cost_hand_case_and_monotonicity() {
        let arch = EncoderArch { num_layers: 1, hidden: 2, ff: 4, heads: 1, vocab: 8, max_seq: 8 };
        let c = cost_flops(&arch, &LengthConfig::full(1, 1)).unwrap();
        assert_eq!(c, 36.0);

        let arch6 = EncoderArch { num_layers: 6, hidden: 8, ff: 16, heads: 2, vocab: 8, max_seq: 8 };
        let all1 = cost_flops(&arch6, &LengthConfig::full(6, 1)).unwrap();
        let all2 = cost_flops(&arch6, &LengthConfig::full(6, 2)).unwrap();
        assert!(all1 < all2);
    }

    #[test]
    fn decode_picks_end_at_or_after_start() {
        // end score peaks before the start peak; decode must ignore it
        let logits = Tensor::new(
            vec![4, 2],
            vec![
                0.0, 9.0, // pos 0: huge end score
                0.0, 0.0, //
                5.0, 1.0, // pos 2: best start
                0.0, 2.0, // pos 3: best end ≥ start
            ],
        )
        .unwrap();
        assert_eq!(decode_span(&logits), (2, 3));
    }

    #[test]
    fn wall_clock_enforces_floor_and_order() {
        let arch = EncoderArch { num_layers: 2, hidden: 8, ff: 16, heads: 2, vocab: 12, max_seq: 8 };
        let model = EncoderModel::new(arch, 3).unwrap();
        let task = generate_task(1, 4, 8, 12).unwrap();
        let config = LengthConfig::full(2, 8);
        let s = measure_wall_clock(&model, &config, &task, 1).unwrap();
        assert_eq!(s.repeats, 3);
        assert!(s.median_ms >= 0.0);
        assert!(s.p95_ms >= s.median_ms);
    }
}
