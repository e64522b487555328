//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use std::collections::BTreeMap;

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Learning-rate schedule evaluated per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine annealing from `base` at step 0 to `min` at `total_steps`.
    Cosine { base: f64, min: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                base,
                min,
                total_steps,
            } => {
                if total_steps == 0 || step >= total_steps {
                    return min;
                }
                let t = step as f64 / total_steps as f64;
                min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// AdamW state: per-parameter first/second moment buffers and a step counter.
/// Learning rates are decoupled per parameter through the `lr_of` callback so
/// backbone and head groups can anneal independently.
pub struct AdamW<E: Scalar> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Paper defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn with_decay(weight_decay: f64) -> Self {
        Self::new(0.9, 0.999, 1e-8, weight_decay)
    }
}

/// One AdamW update over every parameter that has a gradient. `lr_of` maps a
/// parameter name to its learning rate for this step. Decay is decoupled:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step<E: Scalar>(
    params: &mut ParamStore<E>,
    grads: &BTreeMap<String, Vec<E>>,
    opt: &mut AdamW<E>,
    lr_of: &dyn Fn(&str) -> f64,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);

    for (name, grad) in grads {
        let param = params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if grad.len() != param.data.len() {
            return Err(Error::dims("adamw_step", &[grad.len()], &[param.data.len()]));
        }
        let lr = lr_of(name);
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![E::zero(); grad.len()]);
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![E::zero(); grad.len()]);
        for i in 0..grad.len() {
            let g = grad[i].to_f64();
            let mi = opt.beta1 * m[i].to_f64() + (1.0 - opt.beta1) * g;
            let vi = opt.beta2 * v[i].to_f64() + (1.0 - opt.beta2) * g * g;
            m[i] = E::from_f64(mi);
            v[i] = E::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let p = param.data[i].to_f64();
            let step = lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p);
            param.data[i] = E::from_f64(p - step);
        }
    }
    Ok(())
}
