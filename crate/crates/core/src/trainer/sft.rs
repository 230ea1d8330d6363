//! Supervised warmup: next-token cross-entropy over question + CoT + eos,
//! with the loss restricted to CoT-and-answer positions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, NodeId, Tape};
use crate::model::{self, PolicyParams};
use crate::seeding;
use crate::task::{Sample, TokenId, Vocab};

use super::adam::{adam_step, decay_weights, AdamState};
use super::{TrainConfig, TrainError};

/// Builds the masked per-sample cross-entropy sum node and returns it with
/// the number of scored positions. Scored positions predict the tokens at
/// indices `question_len..len`, i.e. the CoT, the answer, and eos.
pub(super) fn sample_loss_sum(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &model::TapeBinding,
    seq: &[TokenId],
    question_len: usize,
) -> Result<(NodeId, usize, NodeId), TrainError> {
    let n = seq.len();
    assert!(question_len >= 1 && question_len < n);
    let fwd = model::forward(tape, params, bind, seq)?;
    let lsm = tape.log_softmax(fwd.logits)?;
    let targets: Vec<usize> = (0..n).map(|p| if p + 1 < n { seq[p + 1] } else { 0 }).collect();
    let picked = tape.gather(lsm, targets)?;
    let mut mask = vec![0.0; n];
    for m in mask.iter_mut().take(n - 1).skip(question_len - 1) {
        *m = 1.0;
    }
    let mask_node = tape.constant(Array::vector(mask));
    let gated = tape.mul(picked, mask_node)?;
    let sum = tape.sum(gated)?;
    Ok((sum, n - question_len, fwd.logits))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// One pass over the dataset in shuffled minibatches; returns the mean
/// loss in nats per scored token.
pub fn sft_epoch(
    params: &mut PolicyParams,
    opt: &mut AdamState,
    dataset: &[Sample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let eos = vocab.eos_id();
    let tokenized: Vec<(Vec<TokenId>, usize)> = dataset
        .iter()
        .map(|s| {
            let q = vocab.tokenize(&s.question)?;
            let mut seq = q.clone();
            seq.extend(vocab.tokenize(&s.cot)?);
            seq.push(eos);
            Ok::<_, TrainError>((seq, q.len()))
        })
        .collect::<Result<_, _>>()?;

    let order = shuffled_indices(dataset.len(), seeding::derive(cfg.seed, "sft", epoch as u64));
    let mut total_nats = 0.0;
    let mut total_tokens = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let mut batch_sum: Option<NodeId> = None;
        let mut count = 0usize;
        for &i in chunk {
            let (seq, qlen) = &tokenized[i];
            let (sum, tokens, _) = sample_loss_sum(&mut tape, params, &bind, seq, *qlen)?;
            count += tokens;
            batch_sum = Some(match batch_sum {
                Some(acc) => tape.add(acc, sum)?,
                None => sum,
            });
        }
        let loss = tape.scale(batch_sum.expect("nonempty chunk"), -1.0 / count as f64)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite { step: epoch });
        }
        tape.backward(loss)?;
        let grads = bind.gradients(&tape);
        decay_weights(params, cfg.sft_lr, cfg.weight_decay);
        adam_step(
            params,
            &grads,
            opt,
            cfg.sft_lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )?;
        total_nats += loss_value * count as f64;
        total_tokens += count;
    }
    Ok(total_nats / total_tokens as f64)
}
