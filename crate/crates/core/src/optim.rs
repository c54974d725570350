//! SGD and Adam over the flat parameter list. Updated parameters are fresh
//! leaves; the previous iteration's graph is dropped with the old tensors.

use serde::{Deserialize, Serialize};

use omni_autodiff::Tensor;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Adam,
}

pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, params: &[Tensor]) -> Optimizer {
        let (m, v) = match kind {
            OptimKind::Sgd => (Vec::new(), Vec::new()),
            OptimKind::Adam => (
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            ),
        };
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Returns the new parameter tensors (fresh leaves).
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if params.len() != grads.len() {
            return Err(CoreError::Config(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CoreError::Config(format!(
                    "parameter shape {:?} vs gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numeric("non-finite gradient".into()));
            }
        }
        self.step_count += 1;
        let mut out = Vec::with_capacity(params.len());
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter().zip(grads) {
                    let data: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gx)| x - self.lr * gx)
                        .collect();
                    out.push(Tensor::leaf(data, p.shape().to_vec())?);
                }
            }
            OptimKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter().zip(grads).enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    let mut data = Vec::with_capacity(p.numel());
                    for (j, (&x, &gx)) in p.data().iter().zip(g.data()).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gx;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gx * gx;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        data.push(x - self.lr * mhat / (vhat.sqrt() + self.eps));
                    }
                    out.push(Tensor::leaf(data, p.shape().to_vec())?);
                }
            }
        }
        Ok(out)
    }
}
