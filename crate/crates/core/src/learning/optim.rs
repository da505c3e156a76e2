//! AdamW with decoupled weight decay and a cosine learning-rate schedule
//! with linear warmup.

use crate::model::ModelParams;

/// Optimizer state: first/second moments stored flat in the model's
/// tensor-visit order, plus the schedule.
#[derive(Debug, Clone)]
pub struct OptimState {
    /// Completed steps.
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &ModelParams,
        lr_peak: f64,
        warmup_steps: u64,
        total_steps: u64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let n = model.param_count();
        OptimState {
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            lr_peak,
            warmup_steps,
            total_steps,
            weight_decay,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Learning rate at `step`: linear ramp from 0 to the peak over
/// `warmup_steps`, then cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: u64, state: &OptimState) -> f64 {
    let step = step.min(state.total_steps);
    if state.warmup_steps > 0 && step <= state.warmup_steps {
        return state.lr_peak * step as f64 / state.warmup_steps as f64;
    }
    if state.total_steps <= state.warmup_steps {
        return state.lr_peak;
    }
    let progress =
        (step - state.warmup_steps) as f64 / (state.total_steps - state.warmup_steps) as f64;
    state.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW update in place; returns the learning rate that was applied.
/// The schedule is evaluated at the post-increment step, so the first update
/// already moves.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimState) -> f64 {
    state.step += 1;
    let t = state.step;
    let lr = cosine_lr(t, state);
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);

    let g = grads.flatten();
    let mut p = params.flatten();
    assert_eq!(g.len(), p.len(), "adamw_step: parameter/gradient shape mismatch");
    for i in 0..p.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * p[i]);
    }
    params.assign_flat(&p);
    lr
}
