//! Reinforced fine-tuning step: clipped-surrogate policy loss, clipped
//! value loss, optional contrastive term, and the per-step optimization
//! loop against fixed sampling-time snapshots.

use crate::autodiff::{Array, NodeId, Tape};
use crate::contrast::{self, ContrastBatch, LcsSplit};
use crate::cot_embed;
use crate::exec::Execution;
use crate::model::{self, PolicyParams, SeqForward, TapeBinding};
use crate::rollout::{self, RolloutConfig, Trajectory};
use crate::seeding;
use crate::task::{Outcome, Sample, TokenId, Vocab};

use super::adam::{adam_step, decay_weights, AdamState};
use super::metrics::StepMetrics;
use super::{SignalMode, TrainConfig, TrainError};

fn check_lengths(node_len: usize, a: usize, b: usize) -> Result<(), TrainError> {
    if node_len != a || node_len != b || node_len == 0 {
        return Err(TrainError::BadConfig(format!(
            "per-token arrays disagree: {node_len} vs {a} vs {b}"
        )));
    }
    Ok(())
}

/// Clipped surrogate policy loss
/// `-mean_t min(ratio_t * A_t, clip(ratio_t, 1-eps, 1+eps) * A_t)` with
/// `ratio = exp(new - old)`. The min is realized through one-sided clips
/// selected by the sign of the (constant) advantage, which keeps the
/// saturated branch at exactly zero gradient.
pub fn ppo_policy_loss(
    tape: &mut Tape,
    new_log_probs: NodeId,
    old_log_probs: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<NodeId, TrainError> {
    let n = tape.value(new_log_probs).len();
    check_lengths(n, old_log_probs.len(), advantages.len())?;
    let old = tape.constant(Array::vector(old_log_probs.to_vec()));
    let diff = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(diff)?;
    let hi = tape.clip(ratio, f64::NEG_INFINITY, 1.0 + epsilon)?;
    let lo = tape.clip(ratio, 1.0 - epsilon, f64::INFINITY)?;
    let adv_pos = tape.constant(Array::vector(
        advantages.iter().map(|&a| if a >= 0.0 { a } else { 0.0 }).collect(),
    ));
    let adv_neg = tape.constant(Array::vector(
        advantages.iter().map(|&a| if a < 0.0 { a } else { 0.0 }).collect(),
    ));
    let up = tape.mul(hi, adv_pos)?;
    let down = tape.mul(lo, adv_neg)?;
    let surrogate = tape.add(up, down)?;
    let mean = tape.mean(surrogate)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Clipped value loss
/// `0.5 * mean_t max((V_t - R_t)^2, clip(R_t - V_t, A_t-eps, A_t+eps)^2)`.
/// The clip rewrites to `A + clip(V_old - V, -eps, eps)` through the
/// identity `R - A = V_old`; the max picks its branch from the current
/// values, which is rebuilt on every update.
pub fn ppo_value_loss(
    tape: &mut Tape,
    new_values: NodeId,
    returns: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<NodeId, TrainError> {
    let n = tape.value(new_values).len();
    check_lengths(n, returns.len(), advantages.len())?;
    let ret = tape.constant(Array::vector(returns.to_vec()));
    let unclipped = tape.sub(new_values, ret)?;

    let v_old: Vec<f64> = returns
        .iter()
        .zip(advantages)
        .map(|(r, a)| r - a)
        .collect();
    let v_old_node = tape.constant(Array::vector(v_old));
    let drift = tape.sub(v_old_node, new_values)?;
    let clipped_drift = tape.clip(drift, -epsilon, epsilon)?;
    let adv = tape.constant(Array::vector(advantages.to_vec()));
    let clipped = tape.add(adv, clipped_drift)?;

    let u_vals = tape.value(unclipped).data().to_vec();
    let w_vals = tape.value(clipped).data().to_vec();
    let pick_u: Vec<f64> = u_vals
        .iter()
        .zip(&w_vals)
        .map(|(u, w)| if u * u >= w * w { 1.0 } else { 0.0 })
        .collect();
    let pick_w: Vec<f64> = pick_u.iter().map(|&m| 1.0 - m).collect();
    let mask_u = tape.constant(Array::vector(pick_u));
    let mask_w = tape.constant(Array::vector(pick_w));

    let su = tape.mul(unclipped, unclipped)?;
    let sw = tape.mul(clipped, clipped)?;
    let gu = tape.mul(su, mask_u)?;
    let gw = tape.mul(sw, mask_w)?;
    let sel = tape.add(gu, gw)?;
    let mean = tape.mean(sel)?;
    Ok(tape.scale(mean, 0.5)?)
}

/// Precomputed per-sample data that stays fixed across the inner updates.
struct SamplePlan {
    /// question + annotated CoT + eos
    ann_seq: Vec<TokenId>,
    question_len: usize,
    ann_span: Vec<usize>,
    /// Rollout CoT positions (absolute, eos excluded), when nonempty.
    roll_span: Option<Vec<usize>>,
    /// LCS split of (annotated CoT, rollout CoT) token content.
    split: LcsSplit,
    correct: bool,
    wrong_extractable: bool,
}

fn plan_sample(
    sample: &Sample,
    traj: &Trajectory,
    vocab: &Vocab,
) -> Result<SamplePlan, TrainError> {
    let eos = vocab.eos_id();
    let q = vocab.tokenize(&sample.question)?;
    let cot = vocab.tokenize(&sample.cot)?;
    let mut ann_seq = q.clone();
    ann_seq.extend_from_slice(&cot);
    ann_seq.push(eos);
    let ann_span = cot_embed::annotated_span(q.len(), cot.len());
    let roll_span = cot_embed::rollout_span(&traj.tokens, traj.prompt_len, eos).ok();
    let roll_cot: &[TokenId] = match &roll_span {
        Some(span) => &traj.tokens[span[0]..=*span.last().unwrap()],
        None => &[],
    };
    Ok(SamplePlan {
        question_len: q.len(),
        ann_span,
        split: contrast::lcs(&cot, roll_cot),
        correct: traj.outcome == Outcome::Correct,
        wrong_extractable: traj.outcome == Outcome::WrongExtractable,
        ann_seq,
        roll_span,
    })
}

/// Scatters per-sample vector nodes into one pooled batch vector through
/// one-hot placement matmuls.
struct Pooler {
    total: usize,
    acc: Option<NodeId>,
}

impl Pooler {
    fn new(total: usize) -> Self {
        Self { total, acc: None }
    }

    fn add_segment(
        &mut self,
        tape: &mut Tape,
        piece: NodeId,
        src_start: usize,
        count: usize,
        dst_start: usize,
    ) -> Result<(), TrainError> {
        let n = tape.value(piece).len();
        let mut p = Array::zeros(&[self.total, n]);
        for t in 0..count {
            p.data_mut()[(dst_start + t) * n + (src_start + t)] = 1.0;
        }
        let p = tape.constant(p);
        let col = tape.reshape(piece, vec![n, 1])?;
        let placed = tape.matmul(p, col)?;
        self.acc = Some(match self.acc {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
        Ok(())
    }

    fn finish(self, tape: &mut Tape) -> Result<NodeId, TrainError> {
        let acc = self.acc.expect("pooler received at least one segment");
        Ok(tape.reshape(acc, vec![self.total])?)
    }
}

fn contrast_loss_node(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &TapeBinding,
    plans: &[SamplePlan],
    trajs: &[Trajectory],
    roll_fwds: &[SeqForward],
    cfg: &TrainConfig,
) -> Result<Option<NodeId>, TrainError> {
    match cfg.signal_mode {
        SignalMode::None => Ok(None),
        SignalMode::Positive => {
            let mut e_annotated = Vec::new();
            let mut e_rollout = Vec::new();
            let mut mask = Vec::new();
            for (i, plan) in plans.iter().enumerate() {
                let span = match &plan.roll_span {
                    Some(s) => s,
                    None => continue,
                };
                let er = cot_embed::embed_from_forward(
                    tape,
                    params,
                    bind,
                    &roll_fwds[i],
                    span,
                )?;
                e_rollout.push(er);
                if plan.correct {
                    let ann_fwd = model::forward(tape, params, bind, &plan.ann_seq)?;
                    let ea = cot_embed::embed_from_forward(
                        tape,
                        params,
                        bind,
                        &ann_fwd,
                        &plan.ann_span,
                    )?;
                    e_annotated.push(Some(ea));
                } else {
                    e_annotated.push(None);
                }
                mask.push(plan.correct);
            }
            if e_rollout.is_empty() {
                return Ok(None);
            }
            let batch = ContrastBatch {
                e_annotated,
                e_rollout,
                mask,
                tau: cfg.tau,
            };
            Ok(Some(contrast::masked_infonce_positive(tape, &batch)?))
        }
        SignalMode::Negative => {
            let b = plans.len();
            let mut lcs_roll = vec![None; b];
            let mut exc_ann = vec![None; b];
            let mut exc_roll = vec![None; b];
            let mut mask = vec![false; b];
            for (i, plan) in plans.iter().enumerate() {
                if !plan.wrong_extractable || !plan.split.usable() || plan.roll_span.is_none() {
                    continue;
                }
                let ann_fwd = model::forward(tape, params, bind, &plan.ann_seq)?;
                let nodes = contrast::split_embeddings_negative(
                    tape,
                    params,
                    bind,
                    &ann_fwd,
                    plan.question_len,
                    &roll_fwds[i],
                    trajs[i].prompt_len,
                    &plan.split,
                )?;
                if let Some(ne) = nodes {
                    lcs_roll[i] = Some(ne.lcs_rollout);
                    exc_ann[i] = Some(ne.exc_annotated);
                    exc_roll[i] = Some(ne.exc_rollout);
                    mask[i] = true;
                }
            }
            if !mask.iter().any(|&m| m) {
                return Ok(None);
            }
            Ok(Some(contrast::masked_infonce_negative(
                tape, &lcs_roll, &exc_ann, &exc_roll, &mask, cfg.tau,
            )?))
        }
    }
}

/// One RL step: collect rollouts under the current snapshot, then run the
/// configured number of inner updates against the frozen statistics.
pub fn rl_step(
    params: &mut PolicyParams,
    ref_params: &PolicyParams,
    opt: &mut AdamState,
    batch: &[Sample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    step: usize,
    execution: Execution,
) -> Result<StepMetrics, TrainError> {
    let rcfg = RolloutConfig {
        beta: cfg.kl_beta,
        gamma: cfg.gamma,
        lambda: cfg.lambda,
        temperature: cfg.temperature,
        max_new_tokens: cfg.max_new_tokens,
        reward_mode: cfg.reward_mode,
        step_seed: seeding::derive(cfg.seed, "rollout", step as u64),
    };
    let trajs = rollout::collect(params, ref_params, batch, vocab, &rcfg, execution)?;
    let b = trajs.len() as f64;
    let mean_terminal = trajs.iter().map(|t| t.terminal_reward).sum::<f64>() / b;
    let n_correct = trajs.iter().filter(|t| t.outcome == Outcome::Correct).count();
    let n_extractable = trajs
        .iter()
        .filter(|t| t.outcome != Outcome::Unextractable)
        .count();

    let plans: Vec<SamplePlan> = batch
        .iter()
        .zip(&trajs)
        .map(|(s, t)| plan_sample(s, t, vocab))
        .collect::<Result<_, _>>()?;

    let total: usize = trajs.iter().map(|t| t.gen_len()).sum();
    let mut old_all = Vec::with_capacity(total);
    let mut adv_all = Vec::with_capacity(total);
    let mut ret_all = Vec::with_capacity(total);
    for t in &trajs {
        old_all.extend_from_slice(&t.old_log_probs);
        adv_all.extend_from_slice(&t.advantages);
        ret_all.extend_from_slice(&t.returns);
    }

    let use_contrast = cfg.signal_mode != SignalMode::None && cfg.contrast_coef != 0.0;
    let mut first = None;
    for _ in 0..cfg.updates_per_step {
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let mut lp_pool = Pooler::new(total);
        let mut v_pool = Pooler::new(total);
        let mut roll_fwds = Vec::with_capacity(trajs.len());
        let mut dst = 0usize;
        for traj in &trajs {
            let fwd = model::forward(&mut tape, params, &bind, &traj.tokens)?;
            let n = traj.tokens.len();
            let lsm = tape.log_softmax(fwd.logits)?;
            let targets: Vec<usize> = (0..n)
                .map(|p| if p + 1 < n { traj.tokens[p + 1] } else { 0 })
                .collect();
            let picked = tape.gather(lsm, targets)?;
            let g = traj.gen_len();
            lp_pool.add_segment(&mut tape, picked, traj.prompt_len - 1, g, dst)?;
            v_pool.add_segment(&mut tape, fwd.values, traj.prompt_len - 1, g, dst)?;
            dst += g;
            roll_fwds.push(fwd);
        }
        let new_lp = lp_pool.finish(&mut tape)?;
        let new_v = v_pool.finish(&mut tape)?;
        let policy = ppo_policy_loss(&mut tape, new_lp, &old_all, &adv_all, cfg.epsilon)?;
        let value = ppo_value_loss(&mut tape, new_v, &ret_all, &adv_all, cfg.epsilon)?;
        let contrast_node = if use_contrast {
            contrast_loss_node(&mut tape, params, &bind, &plans, &trajs, &roll_fwds, cfg)?
        } else {
            None
        };

        let value_scaled = tape.scale(value, cfg.alpha)?;
        let mut total_node = tape.add(policy, value_scaled)?;
        let mut contrast_val = 0.0;
        if let Some(cn) = contrast_node {
            contrast_val = tape.value(cn).item();
            let scaled = tape.scale(cn, cfg.contrast_coef)?;
            total_node = tape.add(total_node, scaled)?;
        }

        let loss_total = tape.value(total_node).item();
        if !loss_total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        if first.is_none() {
            first = Some((
                loss_total,
                tape.value(policy).item(),
                tape.value(value).item(),
                contrast_val,
            ));
        }
        tape.backward(total_node)?;
        let grads = bind.gradients(&tape);
        decay_weights(params, cfg.rl_lr, cfg.weight_decay);
        adam_step(
            params,
            &grads,
            opt,
            cfg.rl_lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )?;
    }

    let (loss_total, loss_policy, loss_value, loss_contrast) =
        first.expect("at least one inner update");
    Ok(StepMetrics {
        step,
        loss_total,
        loss_policy,
        loss_value,
        loss_contrast,
        mean_terminal_reward: mean_terminal,
        frac_correct: n_correct as f64 / b,
        frac_extractable: n_extractable as f64 / b,
        eval_accuracy: None,
    })
}
