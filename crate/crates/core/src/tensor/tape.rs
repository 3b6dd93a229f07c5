//! Eager execution with an explicit tape. Every op computes its value
//! immediately and records enough to run its backward kernel later.

use super::ops::{self, BnCache, BnStats, CeOutput, Conv3dConfig, MatmulSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv3d { x: Var, k: Var, cfg: Conv3dConfig },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BnCache },
    Relu(Var),
    Swish(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var, spec: MatmulSpec },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Result of a cross-entropy node.
pub struct LossVar {
    pub var: Var,
    pub loss: f64,
    pub logliks: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv3d(&mut self, x: Var, k: Var, cfg: Conv3dConfig) -> Result<Var> {
        let y = ops::conv3d_forward(self.value(x), self.value(k), cfg)?;
        Ok(self.push(y, Op::Conv3d { x, k, cfg }))
    }

    /// Normalization with batch statistics; also returns those statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnStats)> {
        let (y, cache, stats) = ops::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), None)?;
        Ok((self.push(y, Op::BatchNorm { x, gamma, beta, cache }), stats))
    }

    /// Normalization with fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &BnStats) -> Result<Var> {
        let (y, cache, _) = ops::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), Some(stats))?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, cache }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let y = ops::swish_forward(self.value(x));
        self.push(y, Op::Swish(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let mut y = self.value(x).clone();
        y.scale_assign(f);
        self.push(y, Op::Scale(x, f))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let spec = MatmulSpec { trans_a, trans_b };
        let y = ops::matmul_forward(self.value(a), self.value(b), spec)?;
        Ok(self.push(y, Op::Matmul { a, b, spec }))
    }

    /// Mean cross-entropy; the node value is the scalar loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<LossVar> {
        let CeOutput { loss, logliks, probs } = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let var = self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs });
        Ok(LossVar { var, loss, logliks })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::MissingContext(format!("variable {} is not on this tape", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                }
                Op::Conv3d { x, k, cfg } => {
                    let (gx, gk) = ops::conv3d_backward(&gy, self.value(*x), self.value(*k), *cfg)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *k, gk)?;
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::batchnorm_backward(&gy, self.value(*gamma), cache)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *gamma, gg)?;
                    acc(&mut grads, *beta, gb)?;
                }
                Op::Relu(x) => {
                    let g = ops::relu_backward(&gy, self.value(*x));
                    acc(&mut grads, *x, g)?;
                }
                Op::Swish(x) => {
                    let g = ops::swish_backward(&gy, self.value(*x));
                    acc(&mut grads, *x, g)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone())?;
                    acc(&mut grads, *b, gy)?;
                }
                Op::Scale(x, f) => {
                    let mut g = gy;
                    g.scale_assign(*f);
                    acc(&mut grads, *x, g)?;
                }
                Op::Reshape(x) => {
                    let g = gy.reshape(self.value(*x).shape())?;
                    acc(&mut grads, *x, g)?;
                }
                Op::GlobalAvgPool(x) => {
                    let g = ops::global_avg_pool_backward(&gy, self.value(*x).shape())?;
                    acc(&mut grads, *x, g)?;
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(&gy, self.value(*x), self.value(*w))?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Matmul { a, b, spec } => {
                    let (ga, gb) = ops::matmul_backward(&gy, self.value(*a), self.value(*b), *spec)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let g = ops::softmax_cross_entropy_backward(gy.data()[0], probs, labels);
                    acc(&mut grads, *logits, g)?;
                }
            }
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let logits = tape.linear(y, w, b).unwrap();
        let z = tape.reshape(logits, &[1]).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
