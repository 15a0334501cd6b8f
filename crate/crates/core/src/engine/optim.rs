//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use crate::engine::params::ParamStore;
use crate::tensor::Mat;

/// Learning rate `base * (1 + cos(pi * step / horizon)) / 2`, zero past the
/// horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub horizon: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.horizon == 0 || step >= self.horizon {
            return if self.horizon == 0 { self.base_lr } else { 0.0 };
        }
        let frac = step as f64 / self.horizon as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub horizon: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Mat>,
    pub second_moment: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, horizon: u64) -> Self {
        let zeros: Vec<Mat> = store
            .iter()
            .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            step: 0,
            base_lr,
            weight_decay,
            horizon,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.base_lr,
            horizon: self.horizon,
        }
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule().lr(self.step)
    }
}

/// One AdamW update from the gradients currently stored in `store`.
pub fn adamw_step(state: &mut OptimizerState, store: &mut ParamStore) {
    assert_eq!(state.first_moment.len(), store.len(), "optimizer/parameter mismatch");
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let decay = if p.decay { state.weight_decay } else { 0.0 };
        for (((w, g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *w -= lr * decay * *w;
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}
