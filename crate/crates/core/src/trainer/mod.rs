//! Two-stage training pipeline: supervised warmup, then reinforced
//! fine-tuning with the clipped PPO losses plus an optional contrastive
//! term, against a frozen post-warmup reference policy.

mod adam;
mod metrics;
mod rl;
mod sft;

pub use adam::{adam_step, decay_weights, AdamState};
pub use metrics::{parse_metrics, MetricsRecord, MetricsWriter, StepMetrics};
pub use rl::{ppo_policy_loss, ppo_value_loss, rl_step};
pub use sft::sft_epoch;

use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::AdError;
use crate::contrast::ContrastError;
use crate::cot_embed::EmbedError;
use crate::exec::{self, Execution};
use crate::model::{self, ModelConfig, ModelError, PolicyParams};
use crate::rollout::{RewardMode, RolloutError};
use crate::seeding;
use crate::task::{self, Sample, TaskError, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("rollout: {0}")]
    Rollout(#[from] RolloutError),
    #[error("task: {0}")]
    Task(#[from] TaskError),
    #[error("contrast: {0}")]
    Contrast(#[from] ContrastError),
    #[error("cot_embed: {0}")]
    Embed(#[from] EmbedError),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which contrastive signal feeds the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    Positive,
    Negative,
    /// Pure PPO baseline; the contrastive term is identically zero.
    None,
}

/// Every scalar hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub kl_beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub contrast_coef: f64,
    pub updates_per_step: usize,
    pub rl_steps: usize,
    pub batch_size: usize,
    pub signal_mode: SignalMode,
    pub reward_mode: RewardMode,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub rl_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay on rank-2 arrays, scaled by the stage
    /// learning rate.
    pub weight_decay: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Test-set evaluation cadence in RL steps; 0 disables periodic evals.
    pub eval_interval: usize,
    /// Checkpoint cadence in RL steps; 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kl_beta: 0.05,
            gamma: 0.95,
            lambda: 1.0,
            alpha: 5.0,
            epsilon: 0.2,
            tau: 0.2,
            contrast_coef: 1e-3,
            updates_per_step: 2,
            rl_steps: 300,
            batch_size: 16,
            signal_mode: SignalMode::Positive,
            reward_mode: RewardMode::EmbeddingPartial,
            sft_epochs: 20,
            sft_lr: 3e-3,
            rl_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            temperature: 1.0,
            max_new_tokens: 64,
            eval_interval: 20,
            checkpoint_interval: 0,
            seed: 0,
            model: ModelConfig::desk(Vocab::arithmetic().size()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.contrast_coef < 0.0 {
            return bad(format!("contrast_coef must be >= 0, got {}", self.contrast_coef));
        }
        if self.kl_beta < 0.0 {
            return bad(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        if self.updates_per_step == 0 {
            return bad("updates_per_step must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1".into());
        }
        if self.sft_lr <= 0.0 || self.rl_lr <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.alpha < 0.0 {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Greedy-decodes every question and returns the fraction answered
/// correctly. Rows are independent, so evaluation may run data-parallel.
pub fn evaluate(
    params: &PolicyParams,
    samples: &[Sample],
    vocab: &Vocab,
    max_new: usize,
    execution: Execution,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let eos = vocab.eos_id();
    let correct = exec::map_indexed(execution, samples, |_, s| {
        let prompt = vocab.tokenize(&s.question)?;
        let generated = model::greedy_decode(params, &prompt, max_new, eos)?;
        let text = vocab.detokenize(&generated)?;
        Ok::<bool, TrainError>(task::check(task::extract_answer(&text), s.gold) == task::Outcome::Correct)
    })?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64)
}

/// Everything a finished run reports.
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub sft_losses: Vec<f64>,
    pub post_sft_accuracy: f64,
    pub history: Vec<StepMetrics>,
    pub final_accuracy: Option<f64>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Cycles through the training set in reshuffled passes, yielding batches
/// of the configured size.
struct BatchStream<'a> {
    dataset: &'a [Sample],
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    fn new(dataset: &'a [Sample], seed: u64) -> Self {
        Self {
            dataset,
            seed,
            pass: 0,
            order: shuffled(dataset.len(), seeding::derive(seed, "rl-pass", 0)),
            cursor: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<Sample> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.pass += 1;
                self.order =
                    shuffled(self.dataset.len(), seeding::derive(self.seed, "rl-pass", self.pass));
                self.cursor = 0;
            }
            out.push(self.dataset[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// Runs the full two-stage pipeline: `sft_epochs` supervised passes, a
/// reference-policy snapshot, then `rl_steps` reinforced steps with
/// periodic evaluation and checkpointing. Bit-reproducible from
/// (config, datasets, initial params).
pub fn train<W: Write>(
    cfg: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    initial: Option<PolicyParams>,
    metrics: &mut MetricsWriter<W>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let vocab = Vocab::arithmetic();
    if cfg.model.vocab_size != vocab.size() {
        return Err(TrainError::BadConfig(format!(
            "model vocab_size {} does not match the task vocabulary ({})",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }
    let execution = Execution::default();
    let mut params = match initial {
        Some(p) => p,
        None => model::init_params(&cfg.model, seeding::derive(cfg.seed, "init", 0))?,
    };

    let mut sft_losses = Vec::with_capacity(cfg.sft_epochs);
    let mut sft_opt = AdamState::new(&params);
    for epoch in 0..cfg.sft_epochs {
        let mean_loss = sft_epoch(&mut params, &mut sft_opt, train_set, &vocab, cfg, epoch)?;
        metrics.record(&MetricsRecord::SftEpoch {
            epoch: epoch + 1,
            mean_loss,
        })?;
        sft_losses.push(mean_loss);
    }
    let post_sft_accuracy = evaluate(&params, test_set, &vocab, cfg.max_new_tokens, execution)?;
    metrics.record(&MetricsRecord::SftEval {
        accuracy: post_sft_accuracy,
    })?;

    let ref_params = params.clone();
    let mut rl_opt = AdamState::new(&params);
    let mut stream = BatchStream::new(train_set, cfg.seed);
    let mut history = Vec::with_capacity(cfg.rl_steps);
    let mut final_accuracy = None;
    for step in 1..=cfg.rl_steps {
        let batch = stream.next_batch(cfg.batch_size);
        let mut m = rl_step(
            &mut params,
            &ref_params,
            &mut rl_opt,
            &batch,
            &vocab,
            cfg,
            step,
            execution,
        )?;
        let do_eval = (cfg.eval_interval > 0 && step % cfg.eval_interval == 0)
            || step == cfg.rl_steps;
        if do_eval {
            let acc = evaluate(&params, test_set, &vocab, cfg.max_new_tokens, execution)?;
            m.eval_accuracy = Some(acc);
            final_accuracy = Some(acc);
        }
        metrics.record(&MetricsRecord::RlStep(m.clone()))?;
        history.push(m);
        if let Some(path) = checkpoint_path {
            let at_interval =
                cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0;
            if at_interval || step == cfg.rl_steps {
                model::save_checkpoint(&params, path)?;
            }
        }
    }
    if cfg.rl_steps == 0 {
        if let Some(path) = checkpoint_path {
            model::save_checkpoint(&params, path)?;
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        params,
        sft_losses,
        post_sft_accuracy,
        history,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                vocab_size: Vocab::arithmetic().size(),
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 64,
                d_proj: 8,
            },
            sft_epochs: 1,
            rl_steps: 2,
            batch_size: 4,
            max_new_tokens: 10,
            eval_interval: 0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_out_of_range() {
        let mut cfg = small_cfg();
        cfg.epsilon = 1.5;
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
        let mut cfg = small_cfg();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn evaluate_rejects_empty_and_ignores_order() {
        let vocab = Vocab::arithmetic();
        let cfg = small_cfg();
        let params = init_params(&cfg.model, 1).unwrap();
        assert!(matches!(
            evaluate(&params, &[], &vocab, 8, Execution::Sequential),
            Err(TrainError::EmptyDataset)
        ));
        let mut samples = task::gen_dataset(6, 3, task::Split::Test).unwrap();
        let a = evaluate(&params, &samples, &vocab, 8, Execution::Sequential).unwrap();
        samples.reverse();
        let b = evaluate(&params, &samples, &vocab, 8, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn zero_rl_steps_returns_sft_params_unchanged() {
        let mut cfg = small_cfg();
        cfg.rl_steps = 0;
        let train_set = task::gen_dataset(8, 5, task::Split::Train).unwrap();
        let test_set = task::gen_dataset(4, 5, task::Split::Test).unwrap();
        let mut w = MetricsWriter::new(Vec::new());
        let out = train(&cfg, &train_set, &test_set, None, &mut w, None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.sft_losses.len(), 1);

        // the same run with RL enabled starts from the same SFT params
        let mut cfg2 = small_cfg();
        cfg2.rl_steps = 1;
        let mut w2 = MetricsWriter::new(Vec::new());
        let out2 = train(&cfg2, &train_set, &test_set, None, &mut w2, None).unwrap();
        assert_eq!(out2.history.len(), 1);
        assert!(out.params != out2.params);
    }

    #[test]
    fn history_length_matches_rl_steps_and_is_reproducible() {
        let cfg = small_cfg();
        let train_set = task::gen_dataset(8, 9, task::Split::Train).unwrap();
        let test_set = task::gen_dataset(4, 9, task::Split::Test).unwrap();
        let run = || {
            let mut w = MetricsWriter::new(Vec::new());
            let out = train(&cfg, &train_set, &test_set, None, &mut w, None).unwrap();
            (out, String::from_utf8(w.into_inner().clone()).unwrap())
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a.history.len(), cfg.rl_steps);
        assert!(a.params == b.params);
        assert_eq!(ta, tb);
        assert_eq!(a.history, b.history);
    }
}
