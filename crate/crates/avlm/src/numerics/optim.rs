//! Decoupled-weight-decay AdamW and the warmup/cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::param::Parameter;
use crate::numerics::{lit, Scalar, Tensor};

/// AdamW hyperparameters. Betas follow the training recipe; eps and
/// weight_decay default to the optimizer's conventional values and are
/// config-overridable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moments per trainable parameter plus the shared step count.
pub struct OptimizerState<S: Scalar = f32> {
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
    pub step_count: u64,
    pub hyper: AdamWHyper,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self { moments: BTreeMap::new(), step_count: 0, hyper }
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor<S>, Tensor<S>)> {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut BTreeMap<String, (Tensor<S>, Tensor<S>)> {
        &mut self.moments
    }
}

/// One AdamW update over the given parameters.
///
/// Trainable parameters must carry gradients; non-trainable ones are left
/// bitwise untouched. Gradients are cleared on return.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Parameter<S>],
    state: &mut OptimizerState<S>,
) -> Result<()> {
    for p in params.iter() {
        if p.trainable {
            match &p.grad {
                None => {
                    return Err(Error::Optimizer(format!(
                        "trainable parameter {:?} has no gradient",
                        p.name
                    )))
                }
                Some(g) => {
                    if !g.all_finite() {
                        return Err(Error::Optimizer(format!(
                            "non-finite gradient on parameter {:?}",
                            p.name
                        )));
                    }
                    if g.shape() != p.value.shape() {
                        return Err(Error::Optimizer(format!(
                            "gradient shape {:?} does not match parameter {:?} shape {:?}",
                            g.shape(),
                            p.name,
                            p.value.shape()
                        )));
                    }
                }
            }
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let h = state.hyper;
    let lr = lit::<S>(h.lr);
    let beta1 = lit::<S>(h.beta1);
    let beta2 = lit::<S>(h.beta2);
    let one = S::one();
    let eps = lit::<S>(h.eps);
    let bc1 = one - beta1.powi(t);
    let bc2 = one - beta2.powi(t);
    let decay = lit::<S>(h.lr * h.weight_decay);

    for p in params.iter_mut() {
        if !p.trainable {
            p.grad = None;
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
        let pdata = p.value.data_mut();
        for i in 0..pdata.len() {
            let g = grad.data()[i];
            let mi = beta1 * m.data()[i] + (one - beta1) * g;
            let vi = beta2 * v.data()[i] + (one - beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let mut x = pdata[i];
            x = x - lr * m_hat / (v_hat.sqrt() + eps);
            x = x - decay * pdata[i];
            pdata[i] = x;
        }
    }
    Ok(())
}

/// Linear ramp to `base_lr` over `ceil(warmup_ratio * total_steps)` steps,
/// then cosine decay to exactly zero at `total_steps`.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if !(0.0 < warmup_ratio && warmup_ratio < 1.0) {
        return Err(Error::Schedule(format!(
            "warmup_ratio must be in (0, 1), got {warmup_ratio}"
        )));
    }
    if total_steps == 0 {
        return Err(Error::Schedule("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Schedule(format!(
            "step {step} past total_steps {total_steps}"
        )));
    }
    let mut warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if warmup >= total_steps {
        warmup = total_steps - 1;
    }
    if warmup > 0 && step <= warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
