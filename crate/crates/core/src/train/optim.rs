//! Decoupled-weight-decay adaptive-moment optimizer and the warmup+cosine
//! learning-rate schedule.

use crate::nn::ParamList;
use crate::tensor::Tensor;

/// Per-step learning rate: linear warmup to `peak` over `warmup` steps,
/// then cosine decay to zero over the rest. Steps are 1-based; step 1 of
/// warmup gets `peak / warmup` (there is no lr(0)).
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, peak: f64) -> f64 {
    assert!(step >= 1 && step <= total_steps, "step {step} of {total_steps}");
    let warmup = ((total_steps as f64 * warmup_ratio).round() as usize).max(1);
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Slot {
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over an explicit parameter list. Anything not handed to the
/// optimizer is frozen: it receives no update of any kind.
pub struct AdamW {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
}

impl AdamW {
    pub fn new(params: &ParamList, weight_decay: f64) -> AdamW {
        let slots = params
            .iter()
            .map(|(_, p)| Slot {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                param: p.clone(),
            })
            .collect();
        AdamW {
            slots,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.slots.iter().map(|s| s.param.numel()).sum()
    }

    /// Global gradient-norm clip over the managed parameters. Returns the
    /// pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: f64) -> f64 {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = s.param.grad() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for s in &self.slots {
                s.param.scale_grad(scale);
            }
        }
        norm
    }

    /// One update with the given learning rate; missing grads are zeros.
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let grad = slot.param.grad();
            let grad = grad.as_deref().unwrap_or(&[]);
            slot.param.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad.get(i).copied().unwrap_or(0.0);
                    slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                    slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = slot.m[i] / bc1;
                    let vh = slot.v[i] / bc2;
                    data[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[i]);
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for s in &self.slots {
            s.param.zero_grad();
        }
    }
}
