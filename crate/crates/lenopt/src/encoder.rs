//! Toy transformer encoder with length-adaptive inference.
//!
//! The model runs three ways: full-length, adaptively under a [`LengthConfig`]
//! (word-vectors eliminated per layer by attention-received significance and
//! restored before the output head so span logits cover every input
//! position), and on a tape for training with optional per-step length and
//! layer sampling.
//!
//! Pruning schedule: the first layer computes attention over the whole input
//! and prunes mid-layer, before its feed-forward block, using its own
//! attention. Every later layer prunes at entry using the previous layer's
//! attention. Position 0 survives every cut; ties go to the lower original
//! position. A token dropped at layer i keeps the last hidden value it was
//! given; the restore step scatters those values back to their original rows
//! before the final layer norm and span head.

use crate::tensor::{Tape, Tensor, TensorError, Val};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug)]
pub enum EncoderError {
    UnknownToken { id: usize, vocab: usize },
    InputTooLong { len: usize, max: usize },
    ConfigLenMismatch { got: usize, want: usize },
    ConfigViolation { inequality: String },
    BadParameter { what: &'static str, value: f64 },
    BadCheckpoint { what: String },
    Tensor(TensorError),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::UnknownToken { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            EncoderError::InputTooLong { len, max } => {
                write!(f, "input length {len} exceeds max_seq {max}")
            }
            EncoderError::ConfigLenMismatch { got, want } => {
                write!(f, "length config has {got} entries, model has {want} layers")
            }
            EncoderError::ConfigViolation { inequality } => {
                write!(f, "length config violates constraint: {inequality}")
            }
            EncoderError::BadParameter { what, value } => {
                write!(f, "bad parameter {what}: {value}")
            }
            EncoderError::BadCheckpoint { what } => write!(f, "bad checkpoint: {what}"),
            EncoderError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EncoderError {}

impl From<TensorError> for EncoderError {
    fn from(e: TensorError) -> Self {
        EncoderError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub num_layers: usize,
    pub hidden: usize,
    pub ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("ff", self.ff),
            ("heads", self.heads),
            ("vocab", self.vocab),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(EncoderError::BadParameter { what, value: 0.0 });
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(EncoderError::BadParameter {
                what: "heads (must divide hidden)",
                value: self.heads as f64,
            });
        }
        if self.max_seq < 2 {
            return Err(EncoderError::BadParameter { what: "max_seq", value: self.max_seq as f64 });
        }
        Ok(())
    }
}

/// Per-layer retained sequence lengths, non-increasing by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LengthConfig {
    lengths: Vec<usize>,
}

impl LengthConfig {
    pub fn new(lengths: Vec<usize>) -> Result<Self, EncoderError> {
        if lengths.is_empty() {
            return Err(EncoderError::BadParameter { what: "lengths (empty)", value: 0.0 });
        }
        for (i, &l) in lengths.iter().enumerate() {
            if l == 0 {
                return Err(EncoderError::ConfigViolation { inequality: format!("x{i} < 1") });
            }
        }
        for i in 1..lengths.len() {
            if lengths[i] > lengths[i - 1] {
                return Err(EncoderError::ConfigViolation {
                    inequality: format!("x{} > x{}", i, i - 1),
                });
            }
        }
        Ok(LengthConfig { lengths })
    }

    /// The no-drop configuration: every layer keeps `len` tokens.
    pub fn full(num_layers: usize, len: usize) -> Self {
        LengthConfig { lengths: vec![len.max(1); num_layers] }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn num_layers(&self) -> usize {
        self.lengths.len()
    }
}

impl TryFrom<Vec<usize>> for LengthConfig {
    type Error = String;
    fn try_from(v: Vec<usize>) -> Result<Self, String> {
        LengthConfig::new(v).map_err(|e| e.to_string())
    }
}

impl From<LengthConfig> for Vec<usize> {
    fn from(c: LengthConfig) -> Vec<usize> {
        c.lengths
    }
}

impl fmt::Display for LengthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.lengths.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Everything a forward pass produced, detached from the tape.
pub struct ForwardTrace {
    /// Per-layer output hidden states, one row per retained token.
    pub hidden: Vec<Tensor>,
    /// Per-layer attention, shape `[heads, a, a]` where `a` is the length the
    /// layer's attention ran over.
    pub attn: Vec<Tensor>,
    /// Span logits `[input_len × 2]`, column 0 start scores, column 1 end.
    pub logits: Tensor,
    /// Original positions of each layer's output rows.
    pub kept: Vec<Vec<usize>>,
    /// Original positions the layer's attention ran over; differs from
    /// `kept` only at the first layer, which prunes mid-layer.
    pub attn_kept: Vec<Vec<usize>>,
}

/// Same trace but as live tape handles, for building losses.
pub struct TapedTrace {
    pub hidden: Vec<Val>,
    /// Per layer, one attention matrix per head; `None` when the layer was
    /// skipped by a layer mask.
    pub attn: Vec<Option<Vec<Val>>>,
    pub logits: Val,
    pub kept: Vec<Vec<usize>>,
    pub attn_kept: Vec<Vec<usize>>,
}

/// Tape handles for every model parameter, keyed by block name.
pub struct ParamVals {
    map: BTreeMap<String, Val>,
}

impl ParamVals {
    pub fn get(&self, name: &str) -> Val {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Val)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderModel {
    arch: EncoderArch,
    params: BTreeMap<String, Tensor>,
}

impl EncoderModel {
    /// Fresh model with seeded initialization: Xavier-uniform weight
    /// matrices, zero biases, unit layer-norm gains.
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self, EncoderError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let h = arch.hidden;
        let f = arch.ff;

        let xavier = |params: &mut BTreeMap<String, Tensor>, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            params.insert(name, Tensor::uniform(&[rows, cols], bound, rng));
        };

        params.insert("embedding".into(), Tensor::randn(&[arch.vocab, h], 0.5, &mut rng));
        params.insert("positional".into(), Tensor::randn(&[arch.max_seq, h], 0.5, &mut rng));
        params.insert("emb_ln_gain".into(), Tensor::new(vec![h], vec![1.0; h]).unwrap());
        params.insert("emb_ln_bias".into(), Tensor::zeros(&[h]));
        for i in 0..arch.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                xavier(&mut params, format!("layer{i}.{w}"), h, h, &mut rng);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("layer{i}.{b}"), Tensor::zeros(&[h]));
            }
            params.insert(format!("layer{i}.ln1_gain"), Tensor::new(vec![h], vec![1.0; h]).unwrap());
            params.insert(format!("layer{i}.ln1_bias"), Tensor::zeros(&[h]));
            xavier(&mut params, format!("layer{i}.w1"), h, f, &mut rng);
            params.insert(format!("layer{i}.b1"), Tensor::zeros(&[f]));
            xavier(&mut params, format!("layer{i}.w2"), f, h, &mut rng);
            params.insert(format!("layer{i}.b2"), Tensor::zeros(&[h]));
            params.insert(format!("layer{i}.ln2_gain"), Tensor::new(vec![h], vec![1.0; h]).unwrap());
            params.insert(format!("layer{i}.ln2_bias"), Tensor::zeros(&[h]));
        }
        params.insert("final_ln_gain".into(), Tensor::new(vec![h], vec![1.0; h]).unwrap());
        params.insert("final_ln_bias".into(), Tensor::zeros(&[h]));
        xavier(&mut params, "head_w".into(), h, 2, &mut rng);
        params.insert("head_b".into(), Tensor::zeros(&[2]));

        Ok(EncoderModel { arch, params })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn expected_shapes(arch: &EncoderArch) -> BTreeMap<String, Vec<usize>> {
        let (h, f) = (arch.hidden, arch.ff);
        let mut m = BTreeMap::new();
        m.insert("embedding".into(), vec![arch.vocab, h]);
        m.insert("positional".into(), vec![arch.max_seq, h]);
        m.insert("emb_ln_gain".into(), vec![h]);
        m.insert("emb_ln_bias".into(), vec![h]);
        for i in 0..arch.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                m.insert(format!("layer{i}.{w}"), vec![h, h]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                m.insert(format!("layer{i}.{b}"), vec![h]);
            }
            m.insert(format!("layer{i}.ln1_gain"), vec![h]);
            m.insert(format!("layer{i}.ln1_bias"), vec![h]);
            m.insert(format!("layer{i}.w1"), vec![h, f]);
            m.insert(format!("layer{i}.b1"), vec![f]);
            m.insert(format!("layer{i}.w2"), vec![f, h]);
            m.insert(format!("layer{i}.b2"), vec![h]);
            m.insert(format!("layer{i}.ln2_gain"), vec![h]);
            m.insert(format!("layer{i}.ln2_bias"), vec![h]);
        }
        m.insert("final_ln_gain".into(), vec![h]);
        m.insert("final_ln_bias".into(), vec![h]);
        m.insert("head_w".into(), vec![h, 2]);
        m.insert("head_b".into(), vec![2]);
        m
    }

    /// Structural check used on deserialized checkpoints.
    pub fn validate(&self) -> Result<(), EncoderError> {
        self.arch.validate()?;
        let expected = Self::expected_shapes(&self.arch);
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => {
                    return Err(EncoderError::BadCheckpoint { what: format!("missing block {name}") })
                }
                Some(t) => {
                    if t.shape() != shape.as_slice() {
                        return Err(EncoderError::BadCheckpoint {
                            what: format!(
                                "block {name} has shape {:?}, expected {:?}",
                                t.shape(),
                                shape
                            ),
                        });
                    }
                    if !t.all_finite() {
                        return Err(EncoderError::BadCheckpoint {
                            what: format!("block {name} contains non-finite values"),
                        });
                    }
                }
            }
        }
        for name in self.params.keys() {
            if !expected.contains_key(name) {
                return Err(EncoderError::BadCheckpoint {
                    what: format!("unexpected block {name}"),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EncoderError> {
        let model: EncoderModel = serde_json::from_str(s)
            .map_err(|e| EncoderError::BadCheckpoint { what: e.to_string() })?;
        model.validate()?;
        Ok(model)
    }

    /// Puts every parameter on the tape; trainable parameters get gradients.
    pub fn register(&self, tape: &Tape, trainable: bool) -> ParamVals {
        let mut map = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t)
            };
            map.insert(name.clone(), v);
        }
        ParamVals { map }
    }

    /// Applies one gradient-descent step: `p -= lr * grad(p)`.
    pub fn apply_gradients(&mut self, params: &ParamVals, grads: &crate::tensor::Gradients, lr: f64) {
        for (name, val) in params.map.iter() {
            if let Some(g) = grads.get(*val) {
                let p = self.params.get_mut(name).expect("registered param exists");
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }

    pub fn forward_full(&self, tokens: &[usize]) -> Result<ForwardTrace, EncoderError> {
        let tape = Tape::new();
        let pv = self.register(&tape, false);
        let t = self.forward_on_tape(&tape, &pv, tokens, None, None)?;
        Ok(extract_trace(&tape, t))
    }

    pub fn forward_adaptive(
        &self,
        tokens: &[usize],
        config: &LengthConfig,
    ) -> Result<ForwardTrace, EncoderError> {
        let tape = Tape::new();
        let pv = self.register(&tape, false);
        let t = self.forward_on_tape(&tape, &pv, tokens, Some(config), None)?;
        Ok(extract_trace(&tape, t))
    }

    /// Core forward. `config: None` keeps every token at every layer. A
    /// masked (skipped) layer is an exact identity: no attention, no FFN,
    /// and no pruning for that layer's config entry.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        pv: &ParamVals,
        tokens: &[usize],
        config: Option<&LengthConfig>,
        layer_mask: Option<&[bool]>,
    ) -> Result<TapedTrace, EncoderError> {
        let arch = &self.arch;
        let n = tokens.len();
        if n == 0 {
            return Err(EncoderError::BadParameter { what: "tokens (empty)", value: 0.0 });
        }
        if n > arch.max_seq {
            return Err(EncoderError::InputTooLong { len: n, max: arch.max_seq });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= arch.vocab) {
            return Err(EncoderError::UnknownToken { id, vocab: arch.vocab });
        }
        if let Some(c) = config {
            if c.num_layers() != arch.num_layers {
                return Err(EncoderError::ConfigLenMismatch {
                    got: c.num_layers(),
                    want: arch.num_layers,
                });
            }
        }
        if let Some(m) = layer_mask {
            assert_eq!(m.len(), arch.num_layers, "layer mask length");
        }
        // target lengths, clamped so an over-long x0 falls back to the input
        let eff: Vec<usize> = match config {
            Some(c) => c.lengths().iter().map(|&l| l.min(n)).collect(),
            None => vec![n; arch.num_layers],
        };

        let emb = tape.gather_rows(pv.get("embedding"), tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pv.get("positional"), &positions)?;
        let summed = tape.add(emb, pos)?;
        let mut x = tape.layer_norm(summed, pv.get("emb_ln_gain"), pv.get("emb_ln_bias"), LN_EPS)?;

        let mut cur = positions.clone();
        // significance of each current row, from the latest attention seen
        let mut last_scores: Option<Vec<f64>> = None;
        // rows dropped so far: original positions plus their final values
        let mut snapshots: Vec<(Vec<usize>, Val)> = Vec::new();

        let mut hidden = Vec::with_capacity(arch.num_layers);
        let mut attn = Vec::with_capacity(arch.num_layers);
        let mut kept = Vec::with_capacity(arch.num_layers);
        let mut attn_kept = Vec::with_capacity(arch.num_layers);

        for i in 0..arch.num_layers {
            if layer_mask.is_some_and(|m| m[i]) {
                hidden.push(x);
                attn.push(None);
                kept.push(cur.clone());
                attn_kept.push(cur.clone());
                continue;
            }

            // layers after the first prune at entry, using the significance
            // carried over from the previous attention
            if i > 0 && eff[i] < cur.len() {
                let (keep_rows, drop_rows) = select_top_k(&cur, last_scores.as_deref(), eff[i]);
                let dropped_positions: Vec<usize> = drop_rows.iter().map(|&r| cur[r]).collect();
                let dropped_vals = tape.gather_rows(x, &drop_rows)?;
                snapshots.push((dropped_positions, dropped_vals));
                x = tape.gather_rows(x, &keep_rows)?;
                cur = keep_rows.iter().map(|&r| cur[r]).collect();
            }

            attn_kept.push(cur.clone());
            let (heads_attn, attn_out) = self.attention_block(tape, pv, x, i)?;
            let res1 = tape.add(x, attn_out)?;
            let mut mid = tape.layer_norm(
                res1,
                pv.get(&format!("layer{i}.ln1_gain")),
                pv.get(&format!("layer{i}.ln1_bias")),
                LN_EPS,
            )?;

            let mut scores = attention_column_sums(tape, &heads_attn, cur.len());

            // the first layer prunes here, after its own attention has
            // scored the full input but before the FFN
            if i == 0 && eff[0] < cur.len() {
                let (keep_rows, drop_rows) = select_top_k(&cur, Some(&scores), eff[0]);
                let dropped_positions: Vec<usize> = drop_rows.iter().map(|&r| cur[r]).collect();
                let dropped_vals = tape.gather_rows(mid, &drop_rows)?;
                snapshots.push((dropped_positions, dropped_vals));
                mid = tape.gather_rows(mid, &keep_rows)?;
                scores = keep_rows.iter().map(|&r| scores[r]).collect();
                cur = keep_rows.iter().map(|&r| cur[r]).collect();
            }
            last_scores = Some(scores);

            let ff1 = tape.add_bias(
                tape.matmul(mid, pv.get(&format!("layer{i}.w1")))?,
                pv.get(&format!("layer{i}.b1")),
            )?;
            let act = tape.gelu(ff1);
            let ff2 = tape.add_bias(
                tape.matmul(act, pv.get(&format!("layer{i}.w2")))?,
                pv.get(&format!("layer{i}.b2")),
            )?;
            let res2 = tape.add(mid, ff2)?;
            x = tape.layer_norm(
                res2,
                pv.get(&format!("layer{i}.ln2_gain")),
                pv.get(&format!("layer{i}.ln2_bias")),
                LN_EPS,
            )?;

            hidden.push(x);
            attn.push(Some(heads_attn));
            kept.push(cur.clone());
        }

        // restore: dropped word-vectors return at their original rows with
        // the values they last held
        let restored = if snapshots.is_empty() {
            x
        } else {
            let mut acc = tape.scatter_rows(x, &cur, n)?;
            for (pos, vals) in &snapshots {
                let sc = tape.scatter_rows(*vals, pos, n)?;
                acc = tape.add(acc, sc)?;
            }
            acc
        };
        let normed =
            tape.layer_norm(restored, pv.get("final_ln_gain"), pv.get("final_ln_bias"), LN_EPS)?;
        let logits = tape.add_bias(tape.matmul(normed, pv.get("head_w"))?, pv.get("head_b"))?;

        Ok(TapedTrace { hidden, attn, logits, kept, attn_kept })
    }

    fn attention_block(
        &self,
        tape: &Tape,
        pv: &ParamVals,
        x: Val,
        layer: usize,
    ) -> Result<(Vec<Val>, Val), EncoderError> {
        let heads = self.arch.heads;
        let d = self.arch.hidden / heads;
        let q = tape.add_bias(
            tape.matmul(x, pv.get(&format!("layer{layer}.wq")))?,
            pv.get(&format!("layer{layer}.bq")),
        )?;
        let k = tape.add_bias(
            tape.matmul(x, pv.get(&format!("layer{layer}.wk")))?,
            pv.get(&format!("layer{layer}.bk")),
        )?;
        let v = tape.add_bias(
            tape.matmul(x, pv.get(&format!("layer{layer}.wv")))?,
            pv.get(&format!("layer{layer}.bv")),
        )?;
        let mut heads_attn = Vec::with_capacity(heads);
        let mut ctx_parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * d, d)?;
            let kh = tape.slice_cols(k, h * d, d)?;
            let vh = tape.slice_cols(v, h * d, d)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.scale(tape.matmul(qh, kt)?, 1.0 / (d as f64).sqrt());
            let a = tape.softmax_rows(scores, 1.0)?;
            heads_attn.push(a);
            ctx_parts.push(tape.matmul(a, vh)?);
        }
        let ctx = tape.concat_cols(&ctx_parts)?;
        let out = tape.add_bias(
            tape.matmul(ctx, pv.get(&format!("layer{layer}.wo")))?,
            pv.get(&format!("layer{layer}.bo")),
        )?;
        Ok((heads_attn, out))
    }
}

/// Total attention received per token: `score[j] = Σ_h Σ_i attn[h][i][j]`.
/// `attn` must be `[heads, n, n]`.
pub fn significance_scores(attn: &Tensor) -> Result<Vec<f64>, EncoderError> {
    let shape = attn.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(EncoderError::Tensor(TensorError::DimMismatch {
            op: "significance_scores",
            lhs: shape.to_vec(),
            rhs: vec![],
        }));
    }
    let (heads, n) = (shape[0], shape[1]);
    let d = attn.data();
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                scores[j] += d[h * n * n + i * n + j];
            }
        }
    }
    Ok(scores)
}

/// Column sums of each head's attention, read off the tape. The selection
/// rule consumes these as plain floats; no gradient flows through pruning.
fn attention_column_sums(tape: &Tape, heads_attn: &[Val], n: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n];
    for &a in heads_attn {
        tape.with_value(a, |_, d| {
            for i in 0..n {
                for j in 0..n {
                    scores[j] += d[i * n + j];
                }
            }
        });
    }
    scores
}

/// Picks the `k` highest-scoring rows (ties to the lower original position),
/// forcing row 0 in, and returns (kept, dropped) row indices in ascending
/// order so relative token order survives. Without scores the first `k` rows
/// win.
fn select_top_k(cur: &[usize], scores: Option<&[f64]>, k: usize) -> (Vec<usize>, Vec<usize>) {
    let m = cur.len();
    debug_assert!(k >= 1 && k < m);
    let mut order: Vec<usize> = (0..m).collect();
    if let Some(s) = scores {
        order.sort_by(|&a, &b| {
            s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal).then(cur[a].cmp(&cur[b]))
        });
    }
    let mut chosen = order[..k].to_vec();
    if !chosen.contains(&0) {
        chosen[k - 1] = 0;
    }
    chosen.sort_unstable();
    let dropped: Vec<usize> = (0..m).filter(|r| chosen.binary_search(r).is_err()).collect();
    (chosen, dropped)
}

fn extract_trace(tape: &Tape, t: TapedTrace) -> ForwardTrace {
    let attn = t
        .attn
        .iter()
        .map(|layer| {
            let heads = layer.as_ref().expect("maskless forward records every layer");
            let n = tape.shape(heads[0])[0];
            let mut data = Vec::with_capacity(heads.len() * n * n);
            for &h in heads {
                tape.with_value(h, |_, d| data.extend_from_slice(d));
            }
            Tensor::new(vec![heads.len(), n, n], data).expect("attention block shape")
        })
        .collect();
    ForwardTrace {
        hidden: t.hidden.iter().map(|&h| tape.value(h)).collect(),
        attn,
        logits: tape.value(t.logits),
        kept: t.kept,
        attn_kept: t.attn_kept,
    }
}

/// LengthDrop draw: layer 0 keeps `base_len`, each later layer keeps a
/// uniform draw from `[ceil((1-p)·prev), prev]`, floored at one token.
pub fn sample_length_config(
    base_len: usize,
    num_layers: usize,
    p_length_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LengthConfig, EncoderError> {
    if !(0.0..=1.0).contains(&p_length_drop) {
        return Err(EncoderError::BadParameter { what: "p_length_drop", value: p_length_drop });
    }
    if base_len == 0 {
        return Err(EncoderError::BadParameter { what: "base_len", value: 0.0 });
    }
    if num_layers == 0 {
        return Err(EncoderError::BadParameter { what: "num_layers", value: 0.0 });
    }
    let mut lengths = Vec::with_capacity(num_layers);
    lengths.push(base_len);
    for _ in 1..num_layers {
        let prev = *lengths.last().unwrap();
        let lo = (((1.0 - p_length_drop) * prev as f64).ceil() as usize).max(1);
        lengths.push(rng.gen_range(lo..=prev));
    }
    Ok(LengthConfig { lengths })
}

/// LayerDrop draw: each layer is independently skipped with probability `p`.
pub fn sample_layer_mask(
    num_layers: usize,
    p_layer_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>, EncoderError> {
    if !(0.0..=1.0).contains(&p_layer_drop) {
        return Err(EncoderError::BadParameter { what: "p_layer_drop", value: p_layer_drop });
    }
    Ok((0..num_layers).map(|_| rng.gen::<f64>() < p_layer_drop).collect())
}

/// Order-sensitive FNV-1a over the logits' bit patterns; hex encoded so the
/// golden-trace JSON stores it exactly.
pub fn logits_checksum(logits: &Tensor) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &v in logits.data() {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> EncoderArch {
        EncoderArch { num_layers: 3, hidden: 8, ff: 16, heads: 2, vocab: 11, max_seq: 12 }
    }

    #[test]
    fn arch_rejects_indivisible_heads() {
        let arch = EncoderArch { heads: 3, ..toy_arch() };
        assert!(arch.validate().is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = EncoderModel::new(toy_arch(), 7).unwrap();
        let trace = model.forward_full(&[1, 4, 2, 9, 3, 5]).unwrap();
        for layer in &trace.attn {
            let [heads, n, _] = layer.shape() else { panic!("attention rank") };
            for h in 0..*heads {
                for i in 0..*n {
                    let row = &layer.data()[h * n * n + i * n..h * n * n + i * n + n];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeroed_model_gives_uniform_logits() {
        let mut model = EncoderModel::new(toy_arch(), 7).unwrap();
        for name in model.param_names() {
            model.param_mut(&name).data_mut().fill(0.0);
        }
        let trace = model.forward_full(&[1, 2, 3, 4, 5]).unwrap();
        let first = (trace.logits.at2(0, 0), trace.logits.at2(0, 1));
        for i in 1..5 {
            assert_eq!(trace.logits.at2(i, 0), first.0);
            assert_eq!(trace.logits.at2(i, 1), first.1);
        }
    }

    #[test]
    fn unknown_token_and_overlong_input_rejected() {
        let model = EncoderModel::new(toy_arch(), 1).unwrap();
        assert!(matches!(
            model.forward_full(&[1, 11]),
            Err(EncoderError::UnknownToken { id: 11, vocab: 11 })
        ));
        assert!(matches!(
            model.forward_full(&vec![1; 13]),
            Err(EncoderError::InputTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn significance_uniform_attention() {
        let (heads, n) = (2, 4);
        let attn = Tensor::new(vec![heads, n, n], vec![0.25; heads * n * n]).unwrap();
        let scores = significance_scores(&attn).unwrap();
        for s in scores {
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn significance_hand_sum() {
        let attn = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(significance_scores(&attn).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn significance_matches_triple_loop_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (heads, n) = (3, 6);
        let mut data = vec![0.0; heads * n * n];
        for h in 0..heads {
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for j in 0..n {
                    data[h * n * n + i * n + j] = row[j] / sum;
                }
            }
        }
        let attn = Tensor::new(vec![heads, n, n], data.clone()).unwrap();
        let scores = significance_scores(&attn).unwrap();

        let mut oracle = vec![0.0; n];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    oracle[j] += data[h * n * n + i * n + j];
                }
            }
        }
        for (a, b) in scores.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = scores.iter().sum();
        assert!((total - (heads * n) as f64).abs() < 1e-9);
    }

    #[test]
    fn significance_rejects_non_square() {
        let attn = Tensor::new(vec![1, 2, 3], vec![0.0; 6]).unwrap();
        assert!(significance_scores(&attn).is_err());
    }

    #[test]
    fn length_config_names_violated_inequality() {
        let err = LengthConfig::new(vec![300, 384, 250]).unwrap_err();
        assert!(err.to_string().contains("x1 > x0"), "{err}");
    }

    #[test]
    fn full_config_kept_lists_are_identity() {
        let model = EncoderModel::new(toy_arch(), 5).unwrap();
        let tokens = [1, 2, 3, 4, 5, 6, 7];
        let config = LengthConfig::full(3, tokens.len());
        let trace = model.forward_adaptive(&tokens, &config).unwrap();
        let identity: Vec<usize> = (0..tokens.len()).collect();
        for layer in &trace.kept {
            assert_eq!(layer, &identity);
        }
    }

    #[test]
    fn sample_length_config_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = sample_length_config(10, 4, 0.0, &mut rng).unwrap();
        assert_eq!(c.lengths(), &[10, 10, 10, 10]);

        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_length_config(10, 6, 1.0, &mut rng).unwrap();
            assert!(c.lengths().iter().all(|&l| l >= 1));
        }
        assert!(sample_length_config(10, 4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn sample_length_config_respects_chain_bounds() {
        // lower envelope when every draw hits the bottom of its range:
        // l_{i+1} = ceil(0.8 * l_i), from 384: 308, 247, 198, 159, 128
        let chain = [384, 308, 247, 198, 159, 128];
        let mut l = 384usize;
        for &want in &chain[1..] {
            l = ((0.8 * l as f64).ceil()) as usize;
            assert_eq!(l, want);
        }
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_length_config(384, 6, 0.2, &mut rng).unwrap();
            for i in 1..6 {
                let lo = ((0.8 * c.lengths()[i - 1] as f64).ceil()) as usize;
                assert!(c.lengths()[i] >= lo && c.lengths()[i] <= c.lengths()[i - 1]);
                assert!(c.lengths()[i] >= chain[i]);
            }
        }
    }

    #[test]
    fn sample_layer_mask_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_layer_mask(6, 0.0, &mut rng).unwrap().iter().all(|&s| !s));
        assert!(sample_layer_mask(6, 1.0, &mut rng).unwrap().iter().all(|&s| s));
        assert!(sample_layer_mask(6, -0.1, &mut rng).is_err());
    }

    #[test]
    fn all_layers_skipped_reduces_to_embedding_and_head() {
        let model = EncoderModel::new(toy_arch(), 4).unwrap();
        let tokens = [3, 1, 4, 1, 5];
        let tape = Tape::new();
        let pv = model.register(&tape, false);
        let t = model
            .forward_on_tape(&tape, &pv, &tokens, None, Some(&[true, true, true]))
            .unwrap();
        assert_eq!(tape.shape(t.logits), vec![5, 2]);
        assert!(t.attn.iter().all(|a| a.is_none()));
        for layer in &t.kept {
            assert_eq!(layer, &vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption_detection() {
        let model = EncoderModel::new(toy_arch(), 42).unwrap();
        let json = model.to_json();
        let back = EncoderModel::from_json(&json).unwrap();
        assert_eq!(model.param("head_w").data(), back.param("head_w").data());

        let mut broken: serde_json::Value = serde_json::from_str(&json).unwrap();
        broken["params"].as_object_mut().unwrap().remove("head_w");
        let err = EncoderModel::from_json(&broken.to_string()).unwrap_err();
        assert!(err.to_string().contains("head_w"), "{err}");
    }

    #[test]
    fn checksum_distinguishes_and_reproduces() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0 + 1e-15]).unwrap();
        assert_eq!(logits_checksum(&a), logits_checksum(&a));
        assert_ne!(logits_checksum(&a), logits_checksum(&b));
    }
}
