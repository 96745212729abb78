//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::params::{Grads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment buffers, one slot per parameter of the set they
/// were created for. A slot stays `None` until its parameter first receives
/// a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Option<Vec<f32>>>,
    pub v: Vec<Option<Vec<f32>>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn bit_eq(&self, other: &OptimizerState) -> bool {
        let same = |a: &[Option<Vec<f32>>], b: &[Option<Vec<f32>>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => {
                        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                    }
                    (None, None) => true,
                    _ => false,
                })
        };
        self.step == other.step && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// One AdamW update. Frozen parameters and parameters without a gradient
/// are left untouched.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut OptimizerState,
    hp: &AdamW,
    lr: f32,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract_err!(
            "optimizer sees {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, t) in params.tensors().iter().enumerate() {
        if let Some(g) = grads.get(i) {
            if g.len() != t.numel() {
                return Err(contract_err!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    params.names()[i],
                    g.len(),
                    t.numel()
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let Some(g) = grads.get(i) else { continue };
        let n = g.len();
        let m = state.m[i].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; n]);
        for (((w, &g), m), v) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w *= decay;
            *w -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Single-cycle cosine annealing from `lr_init`, evaluated per epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f32) -> f32 {
    let frac = epoch as f64 / total_epochs.max(1) as f64;
    (f64::from(lr_init) * 0.5 * (1.0 + (PI * frac).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn scalar_set(w: f32) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(&[1], vec![w]).unwrap());
        set
    }

    fn grads_of(set: &ParamSet, g_val: f32) -> Grads {
        let mut g = Graph::new();
        let bound = set.bind(&mut g, true);
        let w = bound.vars()[0];
        let lin = g.scale(w, g_val);
        let loss = g.sum(lin);
        g.backward(loss).unwrap();
        set.collect_grads(&g, &bound)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut set = scalar_set(1.0);
        let grads = grads_of(&set, 1.0);
        let mut st = OptimizerState::new(&set);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        adamw_step(&mut set, &grads, &mut st, &hp, 0.1).unwrap();
        assert!((set.tensors()[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut set = scalar_set(2.0);
        let grads = grads_of(&set, 0.0);
        let mut st = OptimizerState::new(&set);
        let hp = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        adamw_step(&mut set, &grads, &mut st, &hp, 0.1).unwrap();
        assert!((set.tensors()[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1.0), 1.0);
        assert!((cosine_lr(5, 10, 1.0) - 0.5).abs() < 1e-7);
        assert!(cosine_lr(9, 10, 1.0) > 0.0);
    }
}
