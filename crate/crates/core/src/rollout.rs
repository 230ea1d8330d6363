//! On-policy trajectory collection: terminal and per-token rewards,
//! GAE advantages, and return estimates.

use thiserror::Error;

use crate::cot_embed::{self, CoTEmbedding, EmbedError};
use crate::exec::{self, Execution};
use crate::model::{self, ModelError, PolicyParams};
use crate::seeding;
use crate::task::{self, Outcome, Sample, TaskError, TokenId, Vocab};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("per-token arrays have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty per-token input")]
    Empty,
    #[error("gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("lambda must lie in (0, 1], got {0}")]
    BadLambda(f64),
    #[error("embedding-partial reward needs both embeddings for a wrong-extractable outcome")]
    MissingEmbedding,
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("task: {0}")]
    Task(#[from] TaskError),
    #[error("cot_embed: {0}")]
    Embed(#[from] EmbedError),
}

/// How wrong-but-extractable answers are rewarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Flat 0.1, as in plain reinforced fine-tuning.
    FixedPartial,
    /// Similarity-shaped reward in [0.1, 0.3].
    EmbeddingPartial,
}

/// One on-policy rollout with its sampling-time snapshot statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_len: usize,
    /// Prompt plus generated tokens (including eos if emitted).
    pub tokens: Vec<TokenId>,
    pub old_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub token_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub terminal_reward: f64,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Terminal reward for a finished rollout. Correct answers earn 1,
/// unextractable ones 0; wrong-but-extractable answers earn 0.1 flat or
/// `(<e_ann, e_roll> + 2) / 10`, which spans exactly [0.1, 0.3].
pub fn terminal_reward(
    outcome: Outcome,
    e_annotated: Option<&CoTEmbedding>,
    e_rollout: Option<&CoTEmbedding>,
    mode: RewardMode,
) -> Result<f64, RolloutError> {
    match outcome {
        Outcome::Correct => Ok(1.0),
        Outcome::Unextractable => Ok(0.0),
        Outcome::WrongExtractable => match mode {
            RewardMode::FixedPartial => Ok(0.1),
            RewardMode::EmbeddingPartial => {
                let (a, r) = match (e_annotated, e_rollout) {
                    (Some(a), Some(r)) => (a, r),
                    _ => return Err(RolloutError::MissingEmbedding),
                };
                Ok((a.inner(r) + 2.0) / 10.0)
            }
        },
    }
}

/// Differentiable form of the embedding-shaped partial reward:
/// `clip(<e_ann, e_roll>, -1, 1) * 0.1 + 0.2`.
pub fn partial_reward_node(
    tape: &mut crate::autodiff::Tape,
    e_annotated: crate::autodiff::NodeId,
    e_rollout: crate::autodiff::NodeId,
) -> Result<crate::autodiff::NodeId, crate::autodiff::AdError> {
    let ip = tape.inner(e_annotated, e_rollout)?;
    let clipped = tape.clip(ip, -1.0, 1.0)?;
    let scaled = tape.scale(clipped, 0.1)?;
    let offset = tape.constant(crate::autodiff::Array::scalar(0.2));
    tape.add(scaled, offset)
}

/// Per-token total reward: a KL penalty `-beta * (old - ref)` at every
/// token, plus the terminal reward at the last generated token.
pub fn token_rewards(
    terminal: f64,
    old_log_probs: &[f64],
    ref_log_probs: &[f64],
    beta: f64,
) -> Result<Vec<f64>, RolloutError> {
    if old_log_probs.len() != ref_log_probs.len() {
        return Err(RolloutError::LengthMismatch {
            a: old_log_probs.len(),
            b: ref_log_probs.len(),
        });
    }
    if old_log_probs.is_empty() {
        return Err(RolloutError::Empty);
    }
    let mut out: Vec<f64> = old_log_probs
        .iter()
        .zip(ref_log_probs)
        .map(|(o, r)| -beta * (o - r))
        .collect();
    *out.last_mut().unwrap() += terminal;
    Ok(out)
}

/// GAE advantages via the backward recursion `A_t = s_t + gamma*lambda*A_{t+1}`
/// over TD residuals `s_t = r_t + gamma*V_{t+1} - V_t` with terminal
/// bootstrap `V_L = 0`. Equals the explicit discounted double sum.
pub fn gae(
    token_rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, RolloutError> {
    if token_rewards.len() != values.len() {
        return Err(RolloutError::LengthMismatch {
            a: token_rewards.len(),
            b: values.len(),
        });
    }
    if token_rewards.is_empty() {
        return Err(RolloutError::Empty);
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RolloutError::BadGamma(gamma));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(RolloutError::BadLambda(lambda));
    }
    let len = token_rewards.len();
    let mut adv = vec![0.0; len];
    let mut acc = 0.0;
    for t in (0..len).rev() {
        let next_v = if t + 1 < len { values[t + 1] } else { 0.0 };
        let residual = token_rewards[t] + gamma * next_v - values[t];
        acc = residual + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Return estimates `R_t = A_t + V_t`, elementwise.
pub fn returns(advantages: &[f64], values: &[f64]) -> Result<Vec<f64>, RolloutError> {
    if advantages.len() != values.len() {
        return Err(RolloutError::LengthMismatch {
            a: advantages.len(),
            b: values.len(),
        });
    }
    Ok(advantages.iter().zip(values).map(|(a, v)| a + v).collect())
}

/// Everything rollout collection needs from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub reward_mode: RewardMode,
    /// Seed for this collection step; each sample derives its own stream.
    pub step_seed: u64,
}

/// Collects one on-policy rollout per sample. Samples are independent
/// given the parameter snapshot and their derived seeds, so collection
/// may run data-parallel; results keep batch order either way.
pub fn collect(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[Sample],
    vocab: &Vocab,
    cfg: &RolloutConfig,
    execution: Execution,
) -> Result<Vec<Trajectory>, RolloutError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    exec::map_indexed(execution, batch, |i, sample| {
        collect_one(
            params,
            ref_params,
            sample,
            vocab,
            cfg,
            seeding::derive(cfg.step_seed, "sample", i as u64),
        )
    })
}

fn collect_one(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    sample: &Sample,
    vocab: &Vocab,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    let eos = vocab.eos_id();
    let prompt = vocab.tokenize(&sample.question)?;
    let prompt_len = prompt.len();
    let sampled = model::sample_continuation(
        params,
        &prompt,
        cfg.max_new_tokens,
        cfg.temperature,
        seed,
        eos,
    )?;
    let mut tokens = prompt;
    tokens.extend_from_slice(&sampled.tokens);

    let generated_text = vocab.detokenize(&sampled.tokens)?;
    let outcome = task::check(task::extract_answer(&generated_text), sample.gold);

    let terminal = match (cfg.reward_mode, outcome) {
        (RewardMode::EmbeddingPartial, Outcome::WrongExtractable) => {
            let q = vocab.tokenize(&sample.question)?;
            let c = vocab.tokenize(&sample.cot)?;
            let e_ann = cot_embed::embed_annotated(params, &q, &c, eos)?;
            let e_roll = cot_embed::embed_rollout(params, &tokens, prompt_len, eos)?;
            terminal_reward(outcome, Some(&e_ann), Some(&e_roll), cfg.reward_mode)?
        }
        _ => terminal_reward(outcome, None, None, cfg.reward_mode)?,
    };

    let ref_log_probs = model::sequence_log_probs(ref_params, &tokens, prompt_len)?;
    let rewards = token_rewards(terminal, &sampled.log_probs, &ref_log_probs, cfg.beta)?;
    let advantages = gae(&rewards, &sampled.values, cfg.gamma, cfg.lambda)?;
    let rets = returns(&advantages, &sampled.values)?;

    Ok(Trajectory {
        prompt_len,
        tokens,
        old_log_probs: sampled.log_probs,
        ref_log_probs,
        values: sampled.values,
        token_rewards: rewards,
        advantages,
        returns: rets,
        terminal_reward: terminal,
        outcome,
    })
}
