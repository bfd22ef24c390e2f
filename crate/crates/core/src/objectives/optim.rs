//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::graph::GradientTape;
use crate::linalg::Matrix;
use crate::params::ParamStore;

/// Optimizer state: bias-corrected first/second moments per parameter.
///
/// Moments are allocated lazily on first gradient; a state instance is tied
/// to one parameter store.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl AdamWState {
    pub fn new(lr: f64) -> Self {
        AdamWState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One decoupled-weight-decay update:
    /// `theta <- theta - lr*wd*theta - lr*m_hat/(sqrt(v_hat) + eps)`.
    ///
    /// Updated values are rounded to the `f32` grid so that checkpoints
    /// serialize losslessly.
    pub fn step(&mut self, store: &mut ParamStore, tape: &GradientTape) -> Result<()> {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        // Validate the whole tape before mutating anything.
        for (pid, grad) in tape.iter() {
            let p = store.get(pid);
            if p.frozen {
                return Err(Error::protocol(format!(
                    "gradient for frozen parameter '{}'",
                    p.name
                )));
            }
            if (grad.rows, grad.cols) != (p.value.rows, p.value.cols) {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: (grad.rows, grad.cols),
                    right: (p.value.rows, p.value.cols),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (beta1, beta2) = (self.beta1, self.beta2);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (pid, grad) in tape.iter() {
            let (m, v) = self.moments[pid.0].get_or_insert_with(|| {
                (
                    Matrix::zeros(grad.rows, grad.cols),
                    Matrix::zeros(grad.rows, grad.cols),
                )
            });
            let mut updates = Vec::with_capacity(grad.data.len());
            for ((mi, vi), gi) in m.data.iter_mut().zip(v.data.iter_mut()).zip(&grad.data) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                updates.push(lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps));
            }
            store.update(pid, |theta| {
                for (tv, u) in theta.data.iter_mut().zip(updates.iter()) {
                    *tv -= lr * wd * *tv + u;
                }
                theta.quantize_f32();
            })?;
        }
        Ok(())
    }
}
