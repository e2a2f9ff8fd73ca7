//! Adam with per-group learning rates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// First/second moment estimates, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    moments: BTreeMap<ParamId, Moments<T>>,
}

/// Largest absolute per-coordinate change applied to each group in one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub max_update: BTreeMap<Group, f64>,
    pub lr_used: BTreeMap<Group, f64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

/// One Adam update of every parameter that has a gradient entry.
///
/// Fails without touching any parameter if a frozen parameter carries a
/// gradient or a trainable group has no learning rate.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    lr_by_group: &BTreeMap<Group, f64>,
    state: &mut AdamState<T>,
) -> Result<StepStats> {
    let trainable_groups: BTreeSet<Group> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.group)
        .collect();
    for g in &trainable_groups {
        if !lr_by_group.contains_key(g) {
            return Err(TensorError::MissingGroupRate(g.to_string()));
        }
    }
    for (id, g) in grads.iter() {
        let p = store.get(id);
        if !p.trainable {
            return Err(TensorError::FrozenGradient(p.name.clone()));
        }
        if p.tensor.shape() != g.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("{}: grad {:?} for param {:?}", p.name, g.shape(), p.tensor.shape()),
            });
        }
    }

    let cfg = state.cfg;
    let (b1, b2, eps) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2), c::<T>(cfg.eps));
    let mut stats = StepStats::default();
    for (id, g) in grads.iter() {
        let group = store.get(id).group;
        let lr = lr_by_group[&group];
        stats.lr_used.insert(group, lr);
        let mom = state.moments.entry(id).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        mom.step += 1;
        let t = mom.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t: T = c(lr);
        let mut max_upd = T::zero();
        let param = store.tensor_mut(id);
        for (((p, &gv), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.data_mut())
            .zip(mom.v.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * gv;
            *v = b2 * *v + (T::one() - b2) * gv * gv;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            let upd = lr_t * mhat / (vhat.sqrt() + eps);
            *p -= upd;
            max_upd = max_upd.max(upd.abs());
        }
        if !param.is_finite() {
            return Err(TensorError::NonFinite { op: "adam_step" });
        }
        let e = stats.max_update.entry(group).or_insert(0.0);
        *e = e.max(max_upd.to_f64().unwrap_or(f64::NAN));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates() -> BTreeMap<Group, f64> {
        Group::ALL.into_iter().map(|g| (g, 1e-3)).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap(), Group::Llm).unwrap();
        let mut grads = Gradients::empty();
        grads.insert(id, Tensor::zeros(&[2]));
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut store, &grads, &rates(), &mut st).unwrap();
        }
        assert_eq!(store.tensor(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn one_step_with_unit_gradient_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; bias-corrected mhat = 1, vhat = 1, so the
        // update is lr / (1 + eps).
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(2.0), Group::Llm).unwrap();
        let mut grads = Gradients::empty();
        grads.insert(id, Tensor::scalar(1.0));
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut store, &grads, &rates(), &mut st).unwrap();
        let expected = 2.0 - 1e-3 / (1.0 + 1e-8);
        assert!((store.tensor(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_with_gradient_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(2.0), Group::Vision).unwrap();
        store.set_trainable(id, false);
        let mut grads = Gradients::empty();
        grads.insert(id, Tensor::scalar(1.0));
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut store, &grads, &rates(), &mut st).unwrap_err();
        assert_eq!(err, TensorError::FrozenGradient("w".into()));
        assert_eq!(store.tensor(id).item(), 2.0);
    }

    #[test]
    fn missing_group_rate_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(2.0), Group::Vision).unwrap();
        let mut lrs = rates();
        lrs.remove(&Group::Vision);
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut store, &Gradients::empty(), &lrs, &mut st).unwrap_err();
        assert_eq!(err, TensorError::MissingGroupRate("vision".into()));
    }
}
