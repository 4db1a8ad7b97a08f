use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one per scalar of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_scalars: usize) -> Self {
        AdamState {
            m: vec![0.0; num_scalars],
            v: vec![0.0; num_scalars],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update restricted to scalars whose mask entry is `true`
/// (`None` means every scalar). Excluded scalars and their moments are left
/// untouched.
pub fn masked_adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    mask: Option<&[bool]>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.num_scalars();
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(AutodiffError::MaskAlignment {
                expected: n,
                got: mask.len(),
            });
        }
    }
    if grads.num_scalars() != n || state.m.len() != n {
        return Err(AutodiffError::dim(
            "adam",
            format!(
                "store has {n} scalars, gradients {}, optimizer state {}",
                grads.num_scalars(),
                state.m.len()
            ),
        ));
    }
    if !grads.is_finite() {
        return Err(AutodiffError::NonFinite("gradients".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let flat = grads.flatten();
    let (m, v) = (&mut state.m, &mut state.v);
    params.update_scalars(|i, p| {
        if mask.map_or(true, |mk| mk[i]) {
            let g = flat[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}
