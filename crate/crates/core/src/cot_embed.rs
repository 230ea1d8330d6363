//! Pooled chain-of-thought embeddings: project the hidden states of a CoT
//! span, pool them with softmax-normalized state values, and normalize to
//! the unit sphere. Used by both the contrastive signals and the
//! embedding-shaped partial reward.

use thiserror::Error;

use crate::autodiff::{AdError, Array, NodeId, Tape};
use crate::model::{self, ModelError, PolicyParams, SeqForward, TapeBinding};
use crate::task::TokenId;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty position selection")]
    EmptySelection,
    #[error("selection must be strictly increasing within 0..{len}")]
    BadSelection { len: usize },
    #[error("degenerate embedding: pooled vector has zero norm")]
    Degenerate,
    #[error("empty CoT span")]
    EmptySpan,
    #[error("autodiff: {0}")]
    Autodiff(#[from] AdError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

/// Unit-norm summary vector of one CoT.
#[derive(Debug, Clone, PartialEq)]
pub struct CoTEmbedding {
    vector: Array,
}

impl CoTEmbedding {
    /// Wraps a vector, checking unit norm to 1e-9 and finiteness.
    pub fn from_array(vector: Array) -> Result<Self, EmbedError> {
        if vector.shape().len() != 1 {
            return Err(EmbedError::BadSelection { len: 0 });
        }
        let norm: f64 = vector.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm - 1.0).abs().le(&1e-9) {
            return Err(EmbedError::Degenerate);
        }
        Ok(Self { vector })
    }

    pub fn as_slice(&self) -> &[f64] {
        self.vector.data()
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Inner product, clamped to [-1, 1] to absorb float dust; exact at
    /// the endpoints.
    pub fn inner(&self, other: &CoTEmbedding) -> f64 {
        let raw: f64 = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        raw.clamp(-1.0, 1.0)
    }
}

fn selection_matrix(tape: &mut Tape, selection: &[usize], len: usize) -> NodeId {
    let mut m = Array::zeros(&[selection.len(), len]);
    for (r, &p) in selection.iter().enumerate() {
        m.data_mut()[r * len + p] = 1.0;
    }
    tape.constant(m)
}

fn validate_selection(selection: &[usize], len: usize) -> Result<(), EmbedError> {
    if selection.is_empty() {
        return Err(EmbedError::EmptySelection);
    }
    let increasing = selection.windows(2).all(|w| w[0] < w[1]);
    if !increasing || *selection.last().unwrap() >= len {
        return Err(EmbedError::BadSelection { len });
    }
    Ok(())
}

/// Differentiable pooled embedding of the selected positions:
/// `normalize(sum_i softmax(values_sel)_i * proj(hidden_sel_i))`.
/// Gradients flow through hidden states, values, and the projection.
pub fn embed_cot_node(
    tape: &mut Tape,
    hidden: NodeId,
    values: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    selection: Option<&[usize]>,
) -> Result<NodeId, EmbedError> {
    let len = tape.value(hidden).shape()[0];
    let d_proj = tape.value(proj_w).shape()[1];
    let all: Vec<usize>;
    let sel = match selection {
        Some(s) => s,
        None => {
            all = (0..len).collect();
            &all
        }
    };
    validate_selection(sel, len)?;
    let m = sel.len();

    let sel_mat = selection_matrix(tape, sel, len);
    let h_sel = tape.matmul(sel_mat, hidden)?;
    let v_col = tape.reshape(values, vec![len, 1])?;
    let v_sel2 = tape.matmul(sel_mat, v_col)?;
    let v_sel = tape.reshape(v_sel2, vec![m])?;
    let weights = tape.softmax(v_sel)?;

    let projected = tape.matmul(h_sel, proj_w)?;
    let b_row = tape.reshape(proj_b, vec![1, d_proj])?;
    let ones = tape.constant(Array::new(vec![m, 1], vec![1.0; m]).expect("ones"));
    let b_full = tape.matmul(ones, b_row)?;
    let projected = tape.add(projected, b_full)?;

    let w_col = tape.reshape(weights, vec![m, 1])?;
    let pt = tape.transpose(projected)?;
    let pooled2 = tape.matmul(pt, w_col)?;
    let pooled = tape.reshape(pooled2, vec![d_proj])?;
    match tape.l2_normalize(pooled) {
        Ok(e) => Ok(e),
        Err(AdError::ZeroNorm { .. }) => Err(EmbedError::Degenerate),
        Err(e) => Err(e.into()),
    }
}

/// Forward pass plus pooled embedding of `span` within `tokens`, read off
/// the tape as a concrete unit vector.
pub fn embed_sequence(
    params: &PolicyParams,
    tokens: &[TokenId],
    span: &[usize],
) -> Result<CoTEmbedding, EmbedError> {
    let (mut tape, bind, f) = model::forward_fresh(params, tokens)?;
    let node = embed_from_forward(&mut tape, params, &bind, &f, span)?;
    CoTEmbedding::from_array(tape.value(node).clone())
}

/// Pooled embedding node reusing an existing forward on the same tape.
pub fn embed_from_forward(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &TapeBinding,
    f: &SeqForward,
    span: &[usize],
) -> Result<NodeId, EmbedError> {
    embed_cot_node(
        tape,
        f.hidden,
        f.values,
        bind.node(params, "proj_w"),
        bind.node(params, "proj_b"),
        Some(span),
    )
}

/// Embedding of an annotated CoT: forward over question + CoT (+ eos),
/// sliced to the CoT token positions. Requires a fresh forward because the
/// annotated text has no sampling-time cache.
pub fn embed_annotated(
    params: &PolicyParams,
    question_tokens: &[TokenId],
    cot_tokens: &[TokenId],
    eos: TokenId,
) -> Result<CoTEmbedding, EmbedError> {
    if cot_tokens.is_empty() {
        return Err(EmbedError::EmptySpan);
    }
    let mut seq = question_tokens.to_vec();
    seq.extend_from_slice(cot_tokens);
    seq.push(eos);
    let span = annotated_span(question_tokens.len(), cot_tokens.len());
    embed_sequence(params, &seq, &span)
}

/// Embedding of a rollout CoT: the generated tokens up to and excluding
/// the end-of-sequence token.
pub fn embed_rollout(
    params: &PolicyParams,
    full_tokens: &[TokenId],
    prompt_len: usize,
    eos: TokenId,
) -> Result<CoTEmbedding, EmbedError> {
    let span = rollout_span(full_tokens, prompt_len, eos)?;
    embed_sequence(params, full_tokens, &span)
}

pub fn annotated_span(question_len: usize, cot_len: usize) -> Vec<usize> {
    (question_len..question_len + cot_len).collect()
}

/// Positions of the generated CoT, excluding a terminal eos. Errors if the
/// rollout generated nothing but eos.
pub fn rollout_span(
    full_tokens: &[TokenId],
    prompt_len: usize,
    eos: TokenId,
) -> Result<Vec<usize>, EmbedError> {
    let mut end = full_tokens.len();
    if end > prompt_len && full_tokens[end - 1] == eos {
        end -= 1;
    }
    if end <= prompt_len {
        return Err(EmbedError::EmptySpan);
    }
    Ok((prompt_len..end).collect())
}
