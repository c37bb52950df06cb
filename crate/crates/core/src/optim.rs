//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for `{name}` at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    Count { params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter first/second moments and the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update over `params` with matching `grads`.
///
/// Gradients are validated before anything is written, so a failed step
/// leaves both the parameters and the state untouched.
pub fn adamw_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::Count {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(OptimError::Shape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                name: name.clone(),
                index,
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    for ((name, p), g) in params.into_iter().zip(grads) {
        let m = state.moments.entry(name).or_insert_with(|| Moments {
            first: vec![0.0; g.len()],
            second: vec![0.0; g.len()],
        });
        let data = p
            .data()
            .iter()
            .zip(g.data())
            .zip(m.first.iter_mut().zip(m.second.iter_mut()))
            .map(|((&w, &gv), (m1, m2))| {
                *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * gv;
                *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *m1 / bc1;
                let v_hat = *m2 / bc2;
                w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)
            })
            .collect();
        *p = Tensor::from_parts(p.shape().to_vec(), data);
    }
    Ok(())
}
