use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimKind {
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimKind::Sgd { lr, momentum, weight_decay }
    }

    pub fn adam(lr: f64) -> Self {
        OptimKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer settings plus one (SGD) or two (Adam) buffers per parameter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    /// Adam step count per element; only elements that were updated advance.
    steps: Vec<Vec<u32>>,
}

impl OptimState {
    pub fn new(kind: OptimKind, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect::<Vec<_>>();
        let adam = matches!(kind, OptimKind::Adam { .. });
        OptimState {
            kind,
            first: zeros(),
            second: if adam { zeros() } else { Vec::new() },
            steps: if adam { shapes.iter().map(|s| vec![0; s.iter().product()]).collect() } else { Vec::new() },
        }
    }

    pub fn for_params(kind: OptimKind, params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(kind, &shapes)
    }

    /// Updates every element of every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step_masked(params, grads, None)
    }

    /// Updates only elements whose mask entry is set; masked-out elements
    /// and their buffers are left untouched.
    pub fn step_masked(&mut self, params: &mut [Tensor], grads: &[Tensor], mask: Option<&[Vec<bool>]>) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer over {} buffers got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(Error::Shape(format!(
                    "parameter {i}: shape {:?} with grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let m = mask.map(|m| &m[i]);
            if let Some(m) = m {
                if m.len() != p.numel() {
                    return Err(Error::Shape(format!("parameter {i}: mask length mismatch")));
                }
            }
            let active = |j: usize| m.is_none_or(|m| m[j]);
            let pd = p.data_mut();
            let gd = g.data();
            match self.kind {
                OptimKind::Sgd { lr, momentum, weight_decay } => {
                    let v = &mut self.first[i];
                    for j in 0..pd.len() {
                        if !active(j) {
                            continue;
                        }
                        let d = gd[j] + weight_decay * pd[j];
                        v[j] = momentum * v[j] + d;
                        pd[j] -= lr * v[j];
                    }
                }
                OptimKind::Adam { lr, beta1, beta2, eps } => {
                    let (m1, m2, t) = (&mut self.first[i], &mut self.second[i], &mut self.steps[i]);
                    for j in 0..pd.len() {
                        if !active(j) {
                            continue;
                        }
                        t[j] += 1;
                        m1[j] = beta1 * m1[j] + (1.0 - beta1) * gd[j];
                        m2[j] = beta2 * m2[j] + (1.0 - beta2) * gd[j] * gd[j];
                        let mh = m1[j] / (1.0 - beta1.powi(t[j] as i32));
                        let vh = m2[j] / (1.0 - beta2.powi(t[j] as i32));
                        pd[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
