//! Adam with bias correction.

use crate::autodiff::Array;
use crate::model::PolicyParams;

use super::TrainError;

/// First and second moment accumulators, mirrored onto the parameter
/// entries, plus the step counter.
pub struct AdamState {
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Array> = params
            .entries()
            .iter()
            .map(|(_, a)| Array::zeros(a.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Decoupled weight decay, applied before the Adam update as in AdamW.
/// Only rank-2 arrays (weight matrices and embeddings) decay; norm gains
/// and biases are left alone.
pub fn decay_weights(params: &mut PolicyParams, lr: f64, weight_decay: f64) {
    if weight_decay == 0.0 {
        return;
    }
    let factor = 1.0 - lr * weight_decay;
    for i in 0..params.entries().len() {
        let arr = params.get_mut(i);
        if arr.shape().len() == 2 {
            for v in arr.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// One Adam update. `grads` aligns with the parameter entries; `None`
/// entries are zero gradients (their moments still decay).
pub fn adam_step(
    params: &mut PolicyParams,
    grads: &[Option<&Array>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    if grads.len() != state.m.len() {
        return Err(TrainError::BadConfig(format!(
            "gradient list of {} entries does not match {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != state.m[i].shape() {
                return Err(TrainError::BadConfig(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    state.m[i].shape()
                )));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..state.m.len() {
        let g = grads[i].map(|a| a.data());
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(i).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |s| s[k]);
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn params() -> PolicyParams {
        let cfg = ModelConfig {
            vocab_size: 4,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_seq_len: 4,
            d_proj: 2,
        };
        init_params(&cfg, 9).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let grads: Vec<Option<&Array>> = vec![None; p.entries().len()];
        adam_step(&mut p, &grads, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert!(p == before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_per_coordinate() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let big: Vec<Array> = p
            .entries()
            .iter()
            .map(|(_, a)| {
                Array::new(a.shape().to_vec(), vec![10.0; a.len()]).unwrap()
            })
            .collect();
        let grads: Vec<Option<&Array>> = big.iter().map(Some).collect();
        let lr = 1e-3;
        adam_step(&mut p, &grads, &mut st, lr, 0.9, 0.999, 1e-8).unwrap();
        // With bias correction, the first step is -lr * g / (|g| + eps').
        for (i, (_, a)) in p.entries().iter().enumerate() {
            for (k, &after) in a.data().iter().enumerate() {
                let delta = before.entries()[i].1.data()[k] - after;
                assert!((delta - lr).abs() < 1e-6, "delta {delta}");
            }
        }
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut p = params();
            let mut st = AdamState::new(&p);
            let g: Vec<Array> = p
                .entries()
                .iter()
                .map(|(_, a)| {
                    Array::new(
                        a.shape().to_vec(),
                        (0..a.len()).map(|k| (k as f64 * 0.7).sin()).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let grads: Vec<Option<&Array>> = g.iter().map(Some).collect();
            for _ in 0..3 {
                adam_step(&mut p, &grads, &mut st, 3e-3, 0.9, 0.999, 1e-8).unwrap();
            }
            p
        };
        assert!(run() == run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let mut st = AdamState::new(&p);
        let bad = Array::zeros(&[1]);
        let mut grads: Vec<Option<&Array>> = vec![None; p.entries().len()];
        grads[0] = Some(&bad);
        assert!(adam_step(&mut p, &grads, &mut st, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }
}
