use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers keyed by parameter name, plus the step count.
/// Parameters that never received a gradient have no buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

const STEP_KEY: &str = "opt.step";
const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

impl OptimizerState {
    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push(STEP_KEY, Tensor::scalar(self.step as f64))?;
        for (name, (m, v)) in &self.moments {
            ck.push(format!("{M_PREFIX}{name}"), m.clone())?;
            ck.push(format!("{V_PREFIX}{name}"), v.clone())?;
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let step = ck.require(STEP_KEY)?.item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::format("checkpoint", format!("optimizer step {step}")));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in ck.iter() {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                let v = ck.require(&format!("{V_PREFIX}{p}"))?;
                if v.shape() != m.shape() {
                    return Err(Error::Load(vec![name.to_string()]));
                }
                moments.insert(p.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(OptimizerState { step: step as u64, moments })
    }
}

/// One decoupled-weight-decay Adam update of `param` in place. `step` is
/// the 1-based step number used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    hp: &AdamWParams,
) {
    assert!(step >= 1, "steps are 1-based");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] *= 1.0 - lr * weight_decay;
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + hp.eps);
    }
}

/// Step schedule: full rate before `drop_epoch`, a tenth from then on.
pub fn lr_schedule(epoch: usize, drop_epoch: usize) -> f64 {
    if epoch < drop_epoch {
        1.0
    } else {
        0.1
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
