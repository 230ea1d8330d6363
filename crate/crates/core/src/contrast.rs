//! Masked contrastive signals over CoT embeddings: a positive InfoNCE
//! over (annotated, rollout) pairs and a negative InfoNCE built from
//! LCS/exclusion splits of wrong rollouts.

use thiserror::Error;

use crate::autodiff::{AdError, Array, NodeId, Tape};
use crate::cot_embed::{self, EmbedError};
use crate::model::{PolicyParams, SeqForward, TapeBinding};
use crate::task::TokenId;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("batch lists have different lengths")]
    LengthMismatch,
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
    #[error("row {0} is masked in but lacks an embedding")]
    MissingEmbedding(usize),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AdError),
    #[error("cot_embed: {0}")]
    Embed(#[from] EmbedError),
}

/// Index split of two token sequences into a longest common subsequence
/// and its complements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcsSplit {
    pub lcs_a: Vec<usize>,
    pub lcs_b: Vec<usize>,
    pub exc_a: Vec<usize>,
    pub exc_b: Vec<usize>,
}

impl LcsSplit {
    pub fn len(&self) -> usize {
        self.lcs_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lcs_a.is_empty()
    }

    /// True when every subset needed by the negative signal is nonempty.
    pub fn usable(&self) -> bool {
        !self.lcs_a.is_empty() && !self.exc_a.is_empty() && !self.exc_b.is_empty()
    }
}

/// Dynamic-programming LCS. Among maximal solutions, returns the one with
/// the lexicographically smallest index list in `a`, ties broken by the
/// smallest indices in `b`.
pub fn lcs(a: &[TokenId], b: &[TokenId]) -> LcsSplit {
    let (n, m) = (a.len(), b.len());
    // table[i][j] = LCS length of a[i..] and b[j..]
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if a[i] == b[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let mut lcs_a = Vec::new();
    let mut lcs_b = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m && table[i][j] > 0 {
        // Match a[i] at the earliest b position that still completes a
        // maximal solution; if none exists, a[i] cannot appear in any
        // maximal solution and is skipped.
        let mut found = None;
        for jp in j..m {
            if table[i][jp] < table[i][j] {
                break;
            }
            if b[jp] == a[i] && 1 + table[i + 1][jp + 1] == table[i][j] {
                found = Some(jp);
                break;
            }
        }
        match found {
            Some(jp) => {
                lcs_a.push(i);
                lcs_b.push(jp);
                i += 1;
                j = jp + 1;
            }
            None => i += 1,
        }
    }
    let in_a: Vec<bool> = {
        let mut v = vec![false; n];
        for &p in &lcs_a {
            v[p] = true;
        }
        v
    };
    let in_b: Vec<bool> = {
        let mut v = vec![false; m];
        for &p in &lcs_b {
            v[p] = true;
        }
        v
    };
    LcsSplit {
        exc_a: (0..n).filter(|&p| !in_a[p]).collect(),
        exc_b: (0..m).filter(|&p| !in_b[p]).collect(),
        lcs_a,
        lcs_b,
    }
}

/// One batch of the positive signal: per-row annotated and rollout
/// embedding nodes, the correct-answer mask, and the temperature.
///
/// Every rollout embedding participates in the denominators, so all B
/// must be present; annotated embeddings are only consumed by masked-in
/// rows and may be absent elsewhere.
pub struct ContrastBatch {
    pub e_annotated: Vec<Option<NodeId>>,
    pub e_rollout: Vec<NodeId>,
    pub mask: Vec<bool>,
    pub tau: f64,
}

/// Stacks per-row embedding nodes into one `[rows, d]` node through
/// one-hot column placements.
fn stack_rows(tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId, AdError> {
    let n = rows.len();
    let d = tape.value(rows[0]).len();
    let mut acc: Option<NodeId> = None;
    for (r, &e) in rows.iter().enumerate() {
        let mut col = Array::zeros(&[n, 1]);
        col.data_mut()[r] = 1.0;
        let col = tape.constant(col);
        let row = tape.reshape(e, vec![1, d])?;
        let placed = tape.matmul(col, row)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, placed)?,
            None => placed,
        });
    }
    Ok(acc.expect("nonempty rows"))
}

/// Positive InfoNCE with term-level mask gating. Row i contributes
/// `-log softmax_j(<ann_i, roll_j>/tau)[i]` when masked in and exactly 0
/// (value and gradient) otherwise; the denominator runs over every rollout
/// embedding in the batch.
pub fn masked_infonce_positive(
    tape: &mut Tape,
    batch: &ContrastBatch,
) -> Result<NodeId, ContrastError> {
    let b = batch.e_annotated.len();
    if batch.e_rollout.len() != b || batch.mask.len() != b || b == 0 {
        return Err(ContrastError::LengthMismatch);
    }
    if batch.tau <= 0.0 {
        return Err(ContrastError::BadTau(batch.tau));
    }
    if !batch.mask.iter().any(|&m| m) {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let d = tape.value(batch.e_rollout[0]).len();
    // Rows without an annotated embedding are necessarily masked out;
    // stand in a zero row, which the mask strips from value and gradient.
    let zero_row = tape.constant(Array::vector(vec![0.0; d]));
    let mut ann_rows = Vec::with_capacity(b);
    for (i, e) in batch.e_annotated.iter().enumerate() {
        match e {
            Some(id) => ann_rows.push(*id),
            None if batch.mask[i] => return Err(ContrastError::MissingEmbedding(i)),
            None => ann_rows.push(zero_row),
        }
    }
    let ann = stack_rows(tape, &ann_rows)?;
    let roll = stack_rows(tape, &batch.e_rollout)?;
    let roll_t = tape.transpose(roll)?;
    let sims = tape.matmul(ann, roll_t)?;
    let logits = tape.scale(sims, 1.0 / batch.tau)?;
    let lsm = tape.log_softmax(logits)?;
    let diag = tape.gather(lsm, (0..b).collect())?;
    let mask = tape.constant(Array::vector(
        batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    ));
    let gated = tape.mul(diag, mask)?;
    let total = tape.sum(gated)?;
    Ok(tape.scale(total, -1.0)?)
}

/// Negative InfoNCE over the usable rows: numerator similarity
/// `<lcs_roll_i, exc_ann_i>`, denominator over `<lcs_roll_i, exc_roll_j>`
/// for the masked-in rows only. Returns exactly 0 when no row is usable.
pub fn masked_infonce_negative(
    tape: &mut Tape,
    e_lcs_roll: &[Option<NodeId>],
    e_exc_ann: &[Option<NodeId>],
    e_exc_roll: &[Option<NodeId>],
    mask: &[bool],
    tau: f64,
) -> Result<NodeId, ContrastError> {
    let b = e_lcs_roll.len();
    if e_exc_ann.len() != b || e_exc_roll.len() != b || mask.len() != b {
        return Err(ContrastError::LengthMismatch);
    }
    if tau <= 0.0 {
        return Err(ContrastError::BadTau(tau));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let mut lcs_roll = Vec::with_capacity(rows.len());
    let mut exc_ann = Vec::with_capacity(rows.len());
    let mut exc_roll = Vec::with_capacity(rows.len());
    for &i in &rows {
        let take = |v: &[Option<NodeId>]| v[i].ok_or(ContrastError::MissingEmbedding(i));
        lcs_roll.push(take(e_lcs_roll)?);
        exc_ann.push(take(e_exc_ann)?);
        exc_roll.push(take(e_exc_roll)?);
    }
    let u = rows.len();
    let lcs_m = stack_rows(tape, &lcs_roll)?;
    let exc_roll_m = stack_rows(tape, &exc_roll)?;
    let exc_roll_t = tape.transpose(exc_roll_m)?;
    let den = tape.matmul(lcs_m, exc_roll_t)?;
    let den = tape.scale(den, 1.0 / tau)?;
    // Row logsumexp via the log-softmax identity lse = x_k - logsoftmax(x)_k.
    let lsm = tape.log_softmax(den)?;
    let zeros = vec![0usize; u];
    let den_0 = tape.gather(den, zeros.clone())?;
    let lsm_0 = tape.gather(lsm, zeros)?;
    let lse = tape.sub(den_0, lsm_0)?;

    // Numerator similarities stacked into a vector.
    let mut num: Option<NodeId> = None;
    for (r, (&lr, &ea)) in lcs_roll.iter().zip(&exc_ann).enumerate() {
        let ip = tape.inner(lr, ea)?;
        let mut basis = Array::zeros(&[u]);
        basis.data_mut()[r] = 1.0;
        let basis = tape.constant(basis);
        let placed = tape.mul(basis, ip)?;
        num = Some(match num {
            Some(a) => tape.add(a, placed)?,
            None => placed,
        });
    }
    let num = tape.scale(num.expect("nonempty rows"), -1.0 / tau)?;
    let per_row = tape.add(num, lse)?;
    Ok(tape.sum(per_row)?)
}

/// The four split embeddings of the negative signal, as tape nodes.
pub struct NegativeEmbeddings {
    pub lcs_annotated: NodeId,
    pub exc_annotated: NodeId,
    pub lcs_rollout: NodeId,
    pub exc_rollout: NodeId,
}

/// Builds the LCS/exclusion embeddings for one (annotated, rollout) pair
/// from existing forward passes. `ann_offset`/`roll_offset` map CoT token
/// indices to absolute sequence positions. Returns `None` when any subset
/// is empty, which forces the sample out of the negative mask.
#[allow(clippy::too_many_arguments)]
pub fn split_embeddings_negative(
    tape: &mut Tape,
    params: &PolicyParams,
    bind: &TapeBinding,
    ann_forward: &SeqForward,
    ann_offset: usize,
    roll_forward: &SeqForward,
    roll_offset: usize,
    split: &LcsSplit,
) -> Result<Option<NegativeEmbeddings>, ContrastError> {
    if !split.usable() {
        return Ok(None);
    }
    let shift = |positions: &[usize], off: usize| -> Vec<usize> {
        positions.iter().map(|&p| p + off).collect()
    };
    let embed = |tape: &mut Tape, fwd: &SeqForward, span: &[usize]| {
        cot_embed::embed_from_forward(tape, params, bind, fwd, span)
    };
    let lcs_annotated = embed(tape, ann_forward, &shift(&split.lcs_a, ann_offset))?;
    let exc_annotated = embed(tape, ann_forward, &shift(&split.exc_a, ann_offset))?;
    let lcs_rollout = embed(tape, roll_forward, &shift(&split.lcs_b, roll_offset))?;
    let exc_rollout = embed(tape, roll_forward, &shift(&split.exc_b, roll_offset))?;
    Ok(Some(NegativeEmbeddings {
        lcs_annotated,
        exc_annotated,
        lcs_rollout,
        exc_rollout,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_node(tape: &mut Tape, data: Vec<f64>) -> NodeId {
        let norm: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        tape.constant(Array::vector(data.iter().map(|v| v / norm).collect()))
    }

    // -- LCS ---------------------------------------------------------------

    fn dp_length(a: &[usize], b: &[usize]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..a.len() {
            for j in 0..b.len() {
                t[i + 1][j + 1] = if a[i] == b[j] {
                    t[i][j] + 1
                } else {
                    t[i][j + 1].max(t[i + 1][j])
                };
            }
        }
        t[a.len()][b.len()]
    }

    fn validate_split(a: &[usize], b: &[usize], s: &LcsSplit) {
        assert_eq!(s.lcs_a.len(), s.lcs_b.len());
        assert_eq!(s.lcs_a.len(), dp_length(a, b));
        assert!(s.lcs_a.windows(2).all(|w| w[0] < w[1]));
        assert!(s.lcs_b.windows(2).all(|w| w[0] < w[1]));
        for (&i, &j) in s.lcs_a.iter().zip(&s.lcs_b) {
            assert_eq!(a[i], b[j]);
        }
        let mut all_a = s.lcs_a.clone();
        all_a.extend(&s.exc_a);
        all_a.sort_unstable();
        assert_eq!(all_a, (0..a.len()).collect::<Vec<_>>());
        let mut all_b = s.lcs_b.clone();
        all_b.extend(&s.exc_b);
        all_b.sort_unstable();
        assert_eq!(all_b, (0..b.len()).collect::<Vec<_>>());
    }

    #[test]
    fn lcs_identity_and_disjoint() {
        let a = vec![1, 2, 3, 4];
        let s = lcs(&a, &a);
        assert_eq!(s.lcs_a, vec![0, 1, 2, 3]);
        assert!(s.exc_a.is_empty() && s.exc_b.is_empty());
        let s = lcs(&a, &[7, 8, 9]);
        assert!(s.is_empty());
        assert_eq!(s.exc_a, vec![0, 1, 2, 3]);
        let s = lcs(&[], &a);
        assert!(s.is_empty());
    }

    #[test]
    fn lcs_classic_length_four() {
        // "ABCBDAB" vs "BDCABA" -> length 4.
        let a = vec![0, 1, 2, 1, 3, 0, 1];
        let b = vec![1, 3, 2, 0, 1, 0];
        let s = lcs(&a, &b);
        assert_eq!(s.len(), 4);
        validate_split(&a, &b, &s);
    }

    /// Brute-force lexicographically smallest maximal common subsequence.
    fn brute_best(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
        fn rec(
            a: &[usize],
            b: &[usize],
            i: usize,
            j: usize,
            need: usize,
            cur: &mut (Vec<usize>, Vec<usize>),
            best: &mut Option<(Vec<usize>, Vec<usize>)>,
        ) {
            if need == 0 {
                let cand = cur.clone();
                if best.as_ref().map(|b| cand < *b).unwrap_or(true) {
                    *best = Some(cand);
                }
                return;
            }
            for ii in i..a.len() {
                for jj in j..b.len() {
                    if a[ii] == b[jj] {
                        cur.0.push(ii);
                        cur.1.push(jj);
                        if dp_length(&a[ii + 1..], &b[jj + 1..]) >= need - 1 {
                            rec(a, b, ii + 1, jj + 1, need - 1, cur, best);
                        }
                        cur.0.pop();
                        cur.1.pop();
                    }
                }
            }
        }
        let need = dp_length(a, b);
        let mut best = None;
        rec(a, b, 0, 0, need, &mut (vec![], vec![]), &mut best);
        best.unwrap_or((vec![], vec![]))
    }

    #[test]
    fn lcs_tie_break_is_lexicographically_smallest() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.random_range(0..=7);
            let m = rng.random_range(0..=7);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let s = lcs(&a, &b);
            validate_split(&a, &b, &s);
            let (ba, bb) = brute_best(&a, &b);
            assert_eq!((s.lcs_a.clone(), s.lcs_b.clone()), (ba, bb), "a={a:?} b={b:?}");
        }
    }

    // -- Positive signal ----------------------------------------------------

    #[test]
    fn positive_single_identical_pair_is_zero() {
        let mut tape = Tape::new();
        let e = unit_node(&mut tape, vec![1.0, 0.0]);
        let batch = ContrastBatch {
            e_annotated: vec![Some(e)],
            e_rollout: vec![e],
            mask: vec![true],
            tau: 0.2,
        };
        let loss = masked_infonce_positive(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn positive_orthogonal_pairs_match_closed_form() {
        let mut tape = Tape::new();
        let e1 = unit_node(&mut tape, vec![1.0, 0.0]);
        let e2 = unit_node(&mut tape, vec![0.0, 1.0]);
        let batch = ContrastBatch {
            e_annotated: vec![Some(e1), Some(e2)],
            e_rollout: vec![e1, e2],
            mask: vec![true, true],
            tau: 0.2,
        };
        let loss = masked_infonce_positive(&mut tape, &batch).unwrap();
        // Each row: -log(e^5 / (e^5 + e^0)) = ln(1 + e^-5).
        let expected = 2.0 * (1.0 + (-5.0f64).exp()).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn positive_all_masked_is_exact_zero_with_zero_gradients() {
        let mut tape = Tape::new();
        let e1 = unit_node(&mut tape, vec![0.6, 0.8]);
        let e2 = unit_node(&mut tape, vec![-0.8, 0.6]);
        let batch = ContrastBatch {
            e_annotated: vec![Some(e1), Some(e2)],
            e_rollout: vec![e2, e1],
            mask: vec![false, false],
            tau: 0.2,
        };
        let loss = masked_infonce_positive(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss).unwrap();
        for e in [e1, e2] {
            assert!(tape.grad(e).is_none() || tape.grad(e).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn positive_masked_row_has_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let e1 = unit_node(&mut tape, vec![0.6, 0.8]);
        let e2 = unit_node(&mut tape, vec![-0.8, 0.6]);
        let a1 = unit_node(&mut tape, vec![1.0, 0.0]);
        let a2 = unit_node(&mut tape, vec![0.0, 1.0]);
        let batch = ContrastBatch {
            e_annotated: vec![Some(a1), Some(a2)],
            e_rollout: vec![e1, e2],
            mask: vec![true, false],
            tau: 0.5,
        };
        let loss = masked_infonce_positive(&mut tape, &batch).unwrap();
        tape.backward(loss).unwrap();
        // The masked-out annotated embedding gets exactly zero gradient;
        // its rollout embedding still appears in row 0's denominator.
        let g_a2 = tape.grad(a2);
        assert!(g_a2.is_none() || g_a2.unwrap().data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(a1).unwrap().data().iter().any(|&g| g != 0.0));
        assert!(tape.grad(e2).unwrap().data().iter().any(|&g| g != 0.0));

        // Omitting the masked-out annotated embedding changes nothing.
        let mut tape2 = Tape::new();
        let f1 = unit_node(&mut tape2, vec![0.6, 0.8]);
        let f2 = unit_node(&mut tape2, vec![-0.8, 0.6]);
        let b1 = unit_node(&mut tape2, vec![1.0, 0.0]);
        let batch2 = ContrastBatch {
            e_annotated: vec![Some(b1), None],
            e_rollout: vec![f1, f2],
            mask: vec![true, false],
            tau: 0.5,
        };
        let loss2 = masked_infonce_positive(&mut tape2, &batch2).unwrap();
        assert_eq!(tape.value(loss).item(), tape2.value(loss2).item());
    }

    #[test]
    fn positive_is_permutation_equivariant() {
        let mut tape = Tape::new();
        let rows: Vec<(NodeId, NodeId, bool)> = vec![
            (unit_node(&mut tape, vec![1.0, 0.2]), unit_node(&mut tape, vec![0.9, 0.1]), true),
            (unit_node(&mut tape, vec![-0.5, 1.0]), unit_node(&mut tape, vec![0.3, -0.8]), false),
            (unit_node(&mut tape, vec![0.1, -1.0]), unit_node(&mut tape, vec![-0.2, 0.7]), true),
        ];
        let build = |tape: &mut Tape, order: &[usize]| {
            let batch = ContrastBatch {
                e_annotated: order.iter().map(|&i| Some(rows[i].0)).collect(),
                e_rollout: order.iter().map(|&i| rows[i].1).collect(),
                mask: order.iter().map(|&i| rows[i].2).collect(),
                tau: 0.2,
            };
            let l = masked_infonce_positive(tape, &batch).unwrap();
            tape.value(l).item()
        };
        let a = build(&mut tape, &[0, 1, 2]);
        let b = build(&mut tape, &[2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn positive_rejects_bad_batches() {
        let mut tape = Tape::new();
        let e = unit_node(&mut tape, vec![1.0, 0.0]);
        let bad = ContrastBatch {
            e_annotated: vec![Some(e)],
            e_rollout: vec![],
            mask: vec![true],
            tau: 0.2,
        };
        assert!(matches!(
            masked_infonce_positive(&mut tape, &bad),
            Err(ContrastError::LengthMismatch)
        ));
        let bad_tau = ContrastBatch {
            e_annotated: vec![Some(e)],
            e_rollout: vec![e],
            mask: vec![true],
            tau: 0.0,
        };
        assert!(matches!(
            masked_infonce_positive(&mut tape, &bad_tau),
            Err(ContrastError::BadTau(_))
        ));
        let missing = ContrastBatch {
            e_annotated: vec![None],
            e_rollout: vec![e],
            mask: vec![true],
            tau: 0.2,
        };
        assert!(matches!(
            masked_infonce_positive(&mut tape, &missing),
            Err(ContrastError::MissingEmbedding(0))
        ));
    }

    // -- Negative signal ----------------------------------------------------

    #[test]
    fn negative_single_row_matches_closed_form() {
        let mut tape = Tape::new();
        let lcs_roll = unit_node(&mut tape, vec![1.0, 0.0]);
        let exc_ann = unit_node(&mut tape, vec![0.0, 1.0]);
        let loss = masked_infonce_negative(
            &mut tape,
            &[Some(lcs_roll)],
            &[Some(exc_ann)],
            &[Some(lcs_roll)],
            &[true],
            0.2,
        )
        .unwrap();
        // -log(e^0 / e^5) = 5.
        assert!((tape.value(loss).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn negative_no_usable_rows_is_zero() {
        let mut tape = Tape::new();
        let loss =
            masked_infonce_negative(&mut tape, &[None], &[None], &[None], &[false], 0.2).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn negative_loss_decreases_as_numerator_similarity_grows() {
        let eval = |align: f64| {
            let mut tape = Tape::new();
            let lcs_roll = unit_node(&mut tape, vec![1.0, 0.0]);
            let exc_ann = unit_node(&mut tape, vec![align, (1.0 - align * align).sqrt()]);
            let exc_roll = unit_node(&mut tape, vec![0.5, 0.5]);
            let l = masked_infonce_negative(
                &mut tape,
                &[Some(lcs_roll)],
                &[Some(exc_ann)],
                &[Some(exc_roll)],
                &[true],
                0.2,
            )
            .unwrap();
            tape.value(l).item()
        };
        assert!(eval(0.9) < eval(0.5));
        assert!(eval(0.5) < eval(0.0));
    }

    #[test]
    fn negative_missing_embedding_on_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let e = unit_node(&mut tape, vec![1.0, 0.0]);
        assert!(matches!(
            masked_infonce_negative(&mut tape, &[Some(e)], &[None], &[Some(e)], &[true], 0.2),
            Err(ContrastError::MissingEmbedding(0))
        ));
    }

    #[test]
    fn negative_denominator_restricted_to_usable_rows() {
        // With two usable rows the denominator couples them; loss must
        // differ from the single-row case computed on row 0 alone.
        let mut tape = Tape::new();
        let l0 = unit_node(&mut tape, vec![1.0, 0.0]);
        let a0 = unit_node(&mut tape, vec![0.0, 1.0]);
        let r0 = unit_node(&mut tape, vec![1.0, 0.0]);
        let l1 = unit_node(&mut tape, vec![0.6, 0.8]);
        let a1 = unit_node(&mut tape, vec![0.8, -0.6]);
        let r1 = unit_node(&mut tape, vec![0.0, 1.0]);
        let both = masked_infonce_negative(
            &mut tape,
            &[Some(l0), Some(l1)],
            &[Some(a0), Some(a1)],
            &[Some(r0), Some(r1)],
            &[true, true],
            0.2,
        )
        .unwrap();
        let row0_only = masked_infonce_negative(
            &mut tape,
            &[Some(l0), Some(l1)],
            &[Some(a0), Some(a1)],
            &[Some(r0), Some(r1)],
            &[true, false],
            0.2,
        )
        .unwrap();
        let both_v = tape.value(both).item();
        let row0_v = tape.value(row0_only).item();
        assert!((both_v - row0_v).abs() > 1e-6);
    }

    // -- Gradient checks ----------------------------------------------------

    #[test]
    fn positive_gradients_match_finite_differences() {
        use crate::autodiff::grad_check;
        // Differentiate w.r.t. one annotated embedding; others constant.
        let others: Vec<Vec<f64>> = vec![
            vec![0.6, 0.8, 0.0],
            vec![0.0, 0.6, 0.8],
            vec![-0.8, 0.0, 0.6],
        ];
        let f = move |tape: &mut Tape, x: NodeId| {
            let e_ann: Vec<Option<NodeId>> = std::iter::once(Some(x))
                .chain(
                    others[1..]
                        .iter()
                        .map(|v| Some(tape.constant(Array::vector(v.clone())))),
                )
                .collect();
            let e_roll: Vec<NodeId> = others
                .iter()
                .map(|v| tape.constant(Array::vector(v.clone())))
                .collect();
            let batch = ContrastBatch {
                e_annotated: e_ann,
                e_rollout: e_roll,
                mask: vec![true, true, false],
                tau: 0.2,
            };
            masked_infonce_positive(tape, &batch).map_err(|_| AdError::NonFiniteLoss)
        };
        let x = Array::vector(vec![0.6, 0.8, 0.0]);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn negative_gradients_match_finite_differences() {
        use crate::autodiff::grad_check;
        let f = |tape: &mut Tape, x: NodeId| {
            let a0 = tape.constant(Array::vector(vec![0.0, 1.0, 0.0]));
            let r0 = tape.constant(Array::vector(vec![0.8, 0.0, 0.6]));
            let l1 = tape.constant(Array::vector(vec![0.6, 0.8, 0.0]));
            let a1 = tape.constant(Array::vector(vec![0.0, 0.0, 1.0]));
            let r1 = tape.constant(Array::vector(vec![1.0, 0.0, 0.0]));
            masked_infonce_negative(
                tape,
                &[Some(x), Some(l1)],
                &[Some(a0), Some(a1)],
                &[Some(r0), Some(r1)],
                &[true, true],
                0.2,
            )
            .map_err(|_| AdError::NonFiniteLoss)
        };
        let x = Array::vector(vec![0.28, 0.96, 0.0]);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    // -- Split embeddings ---------------------------------------------------

    #[test]
    fn split_embeddings_degenerate_cases_are_unusable() {
        use crate::model::{forward, init_params, ModelConfig};
        let cfg = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 16,
            d_proj: 4,
        };
        let params = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let seq_a = vec![1, 2, 3, 4];
        let seq_b = vec![1, 2, 3, 4];
        let fa = forward(&mut tape, &params, &bind, &seq_a).unwrap();
        let fb = forward(&mut tape, &params, &bind, &seq_b).unwrap();

        // Identical CoTs: exclusion sets empty.
        let split = lcs(&seq_a[1..], &seq_b[1..]);
        assert!(!split.usable());
        let out = split_embeddings_negative(&mut tape, &params, &bind, &fa, 1, &fb, 1, &split)
            .unwrap();
        assert!(out.is_none());

        // Disjoint CoTs: LCS empty.
        let split = lcs(&[1, 2], &[3, 4]);
        assert!(!split.usable());

        // Partial overlap yields four unit-norm embeddings.
        let ca = vec![2, 3, 4];
        let cb = vec![2, 5, 4];
        let split = lcs(&ca, &cb);
        assert!(split.usable());
        let seq_b2 = vec![1, 2, 5, 4];
        let fb2 = forward(&mut tape, &params, &bind, &seq_b2).unwrap();
        let out = split_embeddings_negative(&mut tape, &params, &bind, &fa, 1, &fb2, 1, &split)
            .unwrap()
            .unwrap();
        for id in [
            out.lcs_annotated,
            out.exc_annotated,
            out.lcs_rollout,
            out.exc_rollout,
        ] {
            let norm: f64 = tape.value(id).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
