//! Adam optimizer with bias correction.

use super::tensor::Tensor;
use crate::error::{Result, TeresaError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair of buffers per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Rebuilds state from checkpointed buffers.
    pub fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> AdamState {
        AdamState { m, v, step }
    }

    pub fn parts(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }

    /// One update over all parameters; a parameter with no accumulated
    /// gradient is treated as having gradient zero.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TeresaError::Config(format!(
                "optimizer state covers {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(TeresaError::Shape {
                    op: "adam_step".to_string(),
                    detail: format!(
                        "parameter {i} has {} values, state has {}",
                        p.len(),
                        self.m[i].len()
                    ),
                });
            }
            let grad = p.grad();
            let g = grad.as_deref();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut values = p.values_mut();
            for j in 0..values.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
