//! Tiny pre-norm causal transformer with a language-model head, a scalar
//! per-token value head, and a projection head for CoT embeddings.
//!
//! The forward pass is built entirely from tape primitives, so one
//! implementation serves training (with `backward`) and evaluation-only
//! workloads (per-thread tapes, values read off and discarded). Token and
//! positional lookups are one-hot selector matmuls; the matmul kernel
//! skips zero multipliers, making them cheap.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AdError, Array, NodeId, Tape};
use crate::task::TokenId;

const CHECKPOINT_MAGIC: &[u8; 9] = b"CARFTCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const MASKED: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max length {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("autodiff: {0}")]
    Autodiff(#[from] AdError),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),
    #[error("checkpoint: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_proj: usize,
}

impl ModelConfig {
    /// Desk-scale default for the given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            d_proj: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("d_proj", self.d_proj),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len > 1024 {
            return Err(ModelError::BadConfig(format!(
                "max_seq_len {} exceeds the 1024-token ceiling",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// All learnable arrays, in a fixed creation order. Arrays are shared via
/// `Arc` so binding them to a tape never copies data; the optimizer
/// mutates through copy-on-write, which also makes reference-policy
/// snapshots O(1).
#[derive(Clone)]
pub struct PolicyParams {
    config: ModelConfig,
    entries: Vec<(String, Arc<Array>)>,
    by_name: HashMap<String, usize>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, av), (bn, bv))| an == bn && av == bv)
    }
}

impl PolicyParams {
    fn from_entries(
        config: ModelConfig,
        entries: Vec<(String, Arc<Array>)>,
    ) -> Self {
        let by_name = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self {
            config,
            entries,
            by_name,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[(String, Arc<Array>)] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.by_name[name]
    }

    pub fn get(&self, name: &str) -> &Arc<Array> {
        &self.entries[self.by_name[name]].1
    }

    /// Mutable access for the optimizer step; clones lazily if a snapshot
    /// still shares the array.
    pub fn get_mut(&mut self, idx: usize) -> &mut Array {
        Arc::make_mut(&mut self.entries[idx].1)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let ids = self
            .entries
            .iter()
            .map(|(_, a)| tape.leaf(Arc::clone(a)))
            .collect();
        TapeBinding { ids }
    }
}

/// Leaf ids for one tape, aligned with `PolicyParams::entries`.
pub struct TapeBinding {
    pub(crate) ids: Vec<NodeId>,
}

impl TapeBinding {
    pub fn node(&self, params: &PolicyParams, name: &str) -> NodeId {
        self.ids[params.index_of(name)]
    }

    /// Gradients accumulated on this tape, aligned with the parameter
    /// entries. `None` means identically zero.
    pub fn gradients<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t Array>> {
        self.ids.iter().map(|&id| tape.grad(id)).collect()
    }
}

fn expected_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let hd = config.head_dim();
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("l{l}.attn_norm"), vec![d]));
        for h in 0..config.n_heads {
            out.push((format!("l{l}.h{h}.wq"), vec![d, hd]));
            out.push((format!("l{l}.h{h}.wk"), vec![d, hd]));
            out.push((format!("l{l}.h{h}.wv"), vec![d, hd]));
            out.push((format!("l{l}.h{h}.wo"), vec![hd, d]));
        }
        out.push((format!("l{l}.ff_norm"), vec![d]));
        out.push((format!("l{l}.ff1_w"), vec![d, config.d_ff]));
        out.push((format!("l{l}.ff1_b"), vec![config.d_ff]));
        out.push((format!("l{l}.ff2_w"), vec![config.d_ff, d]));
        out.push((format!("l{l}.ff2_b"), vec![d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_w".to_string(), vec![d, config.vocab_size]));
    out.push(("lm_b".to_string(), vec![config.vocab_size]));
    out.push(("value_w".to_string(), vec![d, 1]));
    out.push(("value_b".to_string(), vec![1]));
    out.push(("proj_w".to_string(), vec![d, config.d_proj]));
    out.push(("proj_b".to_string(), vec![config.d_proj]));
    out
}

/// Deterministic initialization: weights from N(0, 1/sqrt(d_model)), norm
/// gains one, all biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<PolicyParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
        .expect("valid normal distribution");
    let entries = expected_names(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("_norm") || name.contains("norm") {
                vec![1.0; n]
            } else if name.ends_with("_b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            (name, Arc::new(Array::new(shape, data).expect("valid init array")))
        })
        .collect();
    Ok(PolicyParams::from_entries(*config, entries))
}

/// Per-sequence forward output: `logits [L, vocab]`, `hidden [L, d_model]`
/// (the representation both heads read), `values [L]`.
#[derive(Debug, Clone, Copy)]
pub struct SeqForward {
    pub logits: NodeId,
    pub hidden: NodeId,
    pub values: NodeId,
}

fn onehot_rows(tape: &mut Tape, indices: &[usize], width: usize) -> NodeId {
    let mut a = Array::zeros(&[indices.len(), width]);
    for (r, &i) in indices.iter().enumerate() {
        a.data_mut()[r * width + i] = 1.0;
    }
    tape.constant(a)
}

fn ones_col(tape: &mut Tape, n: usize) -> NodeId {
    tape.constant(Array::new(vec![n, 1], vec![1.0; n]).expect("ones column"))
}

/// Broadcasts a `[dim]` vector to `[rows, dim]` through a ones-column
/// matmul, keeping everything inside the primitive set.
fn broadcast_rows(
    tape: &mut Tape,
    rows: usize,
    vec_node: NodeId,
    dim: usize,
) -> Result<NodeId, AdError> {
    let row = tape.reshape(vec_node, vec![1, dim])?;
    let ones = ones_col(tape, rows);
    tape.matmul(ones, row)
}

fn linear(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    rows: usize,
    out_dim: usize,
) -> Result<NodeId, AdError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let bb = broadcast_rows(tape, rows, b, out_dim)?;
            tape.add(y, bb)
        }
        None => Ok(y),
    }
}

/// RMS norm with a learned gain: sqrt(d) * x/|x| per row, times gain.
fn rms_norm(
    tape: &mut Tape,
    x: NodeId,
    gain: NodeId,
    rows: usize,
    dim: usize,
) -> Result<NodeId, AdError> {
    let n = tape.l2_normalize(x)?;
    let s = tape.scale(n, (dim as f64).sqrt())?;
    let g = broadcast_rows(tape, rows, gain, dim)?;
    tape.mul(s, g)
}

fn causal_mask(tape: &mut Tape, len: usize) -> NodeId {
    let mut a = Array::zeros(&[len, len]);
    for i in 0..len {
        for j in (i + 1)..len {
            a.data_mut()[i * len + j] = MASKED;
        }
    }
    tape.constant(a)
}

/// Runs the transformer over one token sequence. Logits at position t
/// depend only on tokens 0..=t.
pub fn forward(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &TapeBinding,
    tokens: &[TokenId],
) -> Result<SeqForward, ModelError> {
    let cfg = params.config();
    let l = tokens.len();
    if l == 0 {
        return Err(ModelError::EmptySequence);
    }
    if l > cfg.max_seq_len {
        return Err(ModelError::SeqTooLong {
            len: l,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let node = |name: &str| bind.node(params, name);
    let d = cfg.d_model;

    let tok_sel = onehot_rows(tape, tokens, cfg.vocab_size);
    let te = tape.matmul(tok_sel, node("tok_emb"))?;
    let positions: Vec<usize> = (0..l).collect();
    let pos_sel = onehot_rows(tape, &positions, cfg.max_seq_len);
    let pe = tape.matmul(pos_sel, node("pos_emb"))?;
    let mut x = tape.add(te, pe)?;

    let mask = causal_mask(tape, l);
    let inv_sqrt_hd = 1.0 / (cfg.head_dim() as f64).sqrt();

    for i in 0..cfg.n_layers {
        let xn = rms_norm(tape, x, node(&format!("l{i}.attn_norm")), l, d)?;
        let mut attn: Option<NodeId> = None;
        for h in 0..cfg.n_heads {
            let q = tape.matmul(xn, node(&format!("l{i}.h{h}.wq")))?;
            let k = tape.matmul(xn, node(&format!("l{i}.h{h}.wk")))?;
            let v = tape.matmul(xn, node(&format!("l{i}.h{h}.wv")))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt_hd)?;
            let scores = tape.add(scores, mask)?;
            let attn_w = tape.softmax(scores)?;
            let mixed = tape.matmul(attn_w, v)?;
            let out = tape.matmul(mixed, node(&format!("l{i}.h{h}.wo")))?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        x = tape.add(x, attn.expect("n_heads >= 1"))?;

        let xn2 = rms_norm(tape, x, node(&format!("l{i}.ff_norm")), l, d)?;
        let h1 = linear(
            tape,
            xn2,
            node(&format!("l{i}.ff1_w")),
            Some(node(&format!("l{i}.ff1_b"))),
            l,
            cfg.d_ff,
        )?;
        let h1 = tape.tanh(h1)?;
        let ff = linear(
            tape,
            h1,
            node(&format!("l{i}.ff2_w")),
            Some(node(&format!("l{i}.ff2_b"))),
            l,
            d,
        )?;
        x = tape.add(x, ff)?;
    }

    let hidden = rms_norm(tape, x, node("final_norm"), l, d)?;
    let logits = linear(
        tape,
        hidden,
        node("lm_w"),
        Some(node("lm_b")),
        l,
        cfg.vocab_size,
    )?;
    let v2 = linear(tape, hidden, node("value_w"), Some(node("value_b")), l, 1)?;
    let values = tape.reshape(v2, vec![l])?;
    Ok(SeqForward {
        logits,
        hidden,
        values,
    })
}

/// Forward on a fresh tape with a fresh binding; the evaluation entry
/// point.
pub fn forward_fresh(
    params: &PolicyParams,
    tokens: &[TokenId],
) -> Result<(Tape, TapeBinding, SeqForward), ModelError> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape);
    let f = forward(&mut tape, params, &bind, tokens)?;
    Ok((tape, bind, f))
}

/// Runs each row of a batch through [`forward`] on one tape.
pub fn forward_batch(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &TapeBinding,
    rows: &[Vec<TokenId>],
) -> Result<Vec<SeqForward>, ModelError> {
    rows.iter().map(|r| forward(tape, params, bind, r)).collect()
}

/// One sampled continuation with the sampling-time snapshot statistics.
#[derive(Debug, Clone)]
pub struct SampledContinuation {
    /// Generated tokens, including the end-of-sequence token if emitted.
    pub tokens: Vec<TokenId>,
    /// log pi(a_t | s_t) of each generated token under the sampling
    /// parameters.
    pub log_probs: Vec<f64>,
    /// Value-head estimate of each pre-action state.
    pub values: Vec<f64>,
}

fn softmax_row(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn argmax_tie_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shifted per-token statistics for the generated suffix of a sequence:
/// token t is scored by the logits and value at position t-1.
fn continuation_stats(
    tape: &Tape,
    f: &SeqForward,
    tokens: &[TokenId],
    prompt_len: usize,
    vocab: usize,
) -> (Vec<f64>, Vec<f64>) {
    let logits = tape.value(f.logits);
    let values = tape.value(f.values);
    let gen_len = tokens.len() - prompt_len;
    let mut log_probs = Vec::with_capacity(gen_len);
    let mut vals = Vec::with_capacity(gen_len);
    for t in 0..gen_len {
        let pos = prompt_len + t;
        let row = &logits.data()[(pos - 1) * vocab..pos * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        log_probs.push(row[tokens[pos]] - lse);
        vals.push(values.data()[pos - 1]);
    }
    (log_probs, vals)
}

/// Autoregressive multinomial sampling at the given temperature, stopping
/// at `eos` or after `max_new` tokens. Deterministic given `seed`.
pub fn sample_continuation(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_new: usize,
    temperature: f64,
    seed: u64,
    eos: TokenId,
) -> Result<SampledContinuation, ModelError> {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(max_new > 0, "max_new must be positive");
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let cfg = params.config();
    if prompt.len() + max_new > cfg.max_seq_len {
        return Err(ModelError::SeqTooLong {
            len: prompt.len() + max_new,
            max: cfg.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let (tape, _, f) = forward_fresh(params, &seq)?;
        let logits = tape.value(f.logits);
        let last = &logits.data()[(seq.len() - 1) * cfg.vocab_size..];
        let probs = softmax_row(last, temperature);
        let tok = sample_index(&probs, &mut rng);
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    // One pass over the finished sequence yields every per-token statistic
    // under the sampling-time parameters.
    let (tape, _, f) = forward_fresh(params, &seq)?;
    let (log_probs, values) = continuation_stats(&tape, &f, &seq, prompt.len(), cfg.vocab_size);
    Ok(SampledContinuation {
        tokens: seq[prompt.len()..].to_vec(),
        log_probs,
        values,
    })
}

/// Argmax decoding with ties broken by the lowest token id; evaluation
/// only.
pub fn greedy_decode(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_new: usize,
    eos: TokenId,
) -> Result<Vec<TokenId>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let cfg = params.config();
    if prompt.len() + max_new > cfg.max_seq_len {
        return Err(ModelError::SeqTooLong {
            len: prompt.len() + max_new,
            max: cfg.max_seq_len,
        });
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let (tape, _, f) = forward_fresh(params, &seq)?;
        let logits = tape.value(f.logits);
        let last = &logits.data()[(seq.len() - 1) * cfg.vocab_size..];
        let tok = argmax_tie_lowest(last);
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(seq[prompt.len()..].to_vec())
}

/// log pi(token) for each generated token of a fixed sequence under
/// `params`; used for reference-policy statistics.
pub fn sequence_log_probs(
    params: &PolicyParams,
    tokens: &[TokenId],
    prompt_len: usize,
) -> Result<Vec<f64>, ModelError> {
    assert!(prompt_len >= 1 && prompt_len <= tokens.len());
    let (tape, _, f) = forward_fresh(params, tokens)?;
    let (log_probs, _) =
        continuation_stats(&tape, &f, tokens, prompt_len, params.config().vocab_size);
    Ok(log_probs)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, config as u32s, then named arrays
// (name length + name + rank + extents + raw little-endian f64). Round
// trips are bit-exact.
// ---------------------------------------------------------------------------

pub fn params_to_bytes(params: &PolicyParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
        cfg.max_seq_len,
        cfg.d_proj,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, arr) in &params.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &e in arr.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in arr.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<PolicyParams, ModelError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let mut fields = [0usize; 7];
    for f in &mut fields {
        *f = cur.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: fields[0],
        d_model: fields[1],
        n_layers: fields[2],
        n_heads: fields[3],
        d_ff: fields[4],
        max_seq_len: fields[5],
        d_proj: fields[6],
    };
    config.validate()?;
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("array name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(cur.u64()?));
        }
        let arr = Array::new(shape, data)
            .map_err(|e| ModelError::Corrupt(format!("array {name}: {e}")))?;
        entries.push((name, Arc::new(arr)));
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    let expected = expected_names(&config);
    if entries.len() != expected.len()
        || entries
            .iter()
            .zip(&expected)
            .any(|((n, a), (en, es))| n != en || a.shape() != es.as_slice())
    {
        return Err(ModelError::Corrupt(
            "array names or shapes do not match the config".into(),
        ));
    }
    Ok(PolicyParams::from_entries(config, entries))
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, params_to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    params_from_bytes(&bytes)
}
