//! AdamW with decoupled weight decay over named parameter groups.
//!
//! Each group carries its own learning rate and decay (calibration trains
//! quantizer parameters and low-rank factors at different rates). A group
//! whose gradients contain a NaN/Inf skips that step — moments and
//! parameters untouched — and bumps a counter instead of poisoning the run.

use crate::tensor::{Scalar, Tensor};

/// One set of parameters sharing a learning rate and weight decay.
pub struct ParamGroup<T: Scalar> {
    pub name: String,
    pub params: Vec<Tensor<T>>,
    pub lr: T,
    pub weight_decay: T,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: &str, params: Vec<Tensor<T>>, lr: T, weight_decay: T) -> ParamGroup<T> {
        ParamGroup { name: name.to_string(), params, lr, weight_decay }
    }
}

struct GroupState<T: Scalar> {
    group: ParamGroup<T>,
    /// Per-parameter first/second moment buffers.
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Steps actually applied to this group (skips do not count).
    t: u64,
}

/// Decoupled-weight-decay Adam.
///
/// Update per element, with bias-corrected moments `m̂`, `v̂`:
/// `p ← p − lr · ( m̂ / (√v̂ + eps) + weight_decay · p )`
/// — the decay multiplies the parameter, not the gradient.
pub struct AdamW<T: Scalar> {
    groups: Vec<GroupState<T>>,
    beta1: T,
    beta2: T,
    eps: T,
    skipped_steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(groups: Vec<ParamGroup<T>>) -> AdamW<T> {
        let groups = groups
            .into_iter()
            .map(|group| {
                let m = group.params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
                let v = group.params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
                GroupState { group, m, v, t: 0 }
            })
            .collect();
        AdamW {
            groups,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            skipped_steps: 0,
        }
    }

    /// Number of steps skipped because a group saw a non-finite gradient.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    /// Steps applied to the group at `index` so far.
    pub fn steps_applied(&self, index: usize) -> u64 {
        self.groups[index].t
    }

    /// Drop accumulated gradients on every registered parameter.
    pub fn zero_grads(&self) {
        for gs in &self.groups {
            for p in &gs.group.params {
                p.zero_grad();
            }
        }
    }

    /// Apply one optimizer step from the currently accumulated gradients,
    /// then reset them. Parameters without a gradient (dead paths) are left
    /// alone except for weight decay — they still decay only when a
    /// gradient arrived, keeping "no signal" a true no-op.
    pub fn step(&mut self) {
        for gs in &mut self.groups {
            let grads: Vec<Option<Vec<T>>> = gs.group.params.iter().map(|p| p.grad()).collect();
            let non_finite = grads
                .iter()
                .flatten()
                .any(|g| g.iter().any(|v| !v.is_finite()));
            if non_finite {
                self.skipped_steps += 1;
            } else {
                gs.t += 1;
                let t = gs.t as i32;
                let bc1 = T::one() - self.beta1.powi(t);
                let bc2 = T::one() - self.beta2.powi(t);
                for (i, p) in gs.group.params.iter().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    let (m, v) = (&mut gs.m[i], &mut gs.v[i]);
                    let (lr, wd) = (gs.group.lr, gs.group.weight_decay);
                    p.with_data_mut(|data| {
                        for j in 0..data.len() {
                            m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                            v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                            let m_hat = m[j] / bc1;
                            let v_hat = v[j] / bc2;
                            data[j] =
                                data[j] - lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * data[j]);
                        }
                    });
                }
            }
            for p in &gs.group.params {
                p.zero_grad();
            }
        }
    }
}
