//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Per-parameter first/second moment state.
#[derive(Debug, Default)]
pub struct AdamState<S: Scalar> {
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
    step: u64,
    skipped: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            moments: HashMap::new(),
            step: 0,
            skipped: 0,
        }
    }

    /// Number of steps skipped due to non-finite gradients.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter with a populated gradient.
///
/// If any gradient is non-finite the whole step is skipped (grads are still
/// zeroed) and the skip counter increments. Grads are cleared on exit either
/// way: the step consumes them.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let finite = params
        .iter()
        .all(|(_, t)| t.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())));
    if !finite {
        state.skipped += 1;
        log::warn!(
            "skipping optimizer step: non-finite gradient (total skipped: {})",
            state.skipped
        );
        params.zero_grads();
        return;
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(betas.0);
    let b2 = S::from_f64(betas.1);
    let one = S::one();
    let lr = S::from_f64(lr);
    let eps = S::from_f64(eps);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);

    for (name, tensor) in params.iter_mut() {
        let Some(grad) = tensor.grad() else { continue };
        let grad = grad.to_vec();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
}

/// Scales all gradients so the global L2 norm does not exceed `threshold`.
/// Returns the pre-clip norm.
pub fn clip_gradients<S: Scalar>(params: &mut ParamStore<S>, threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let mut sq = 0.0f64;
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            for &v in g {
                let v = v.as_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let scale = S::from_f64(threshold / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    norm
}
