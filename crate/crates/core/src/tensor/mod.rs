//! Dense `f64` tensors and a small reverse-mode differentiation engine.
//!
//! Activations use the `N x C x T x H x W` layout; convolution kernels are
//! `C_out x C_in/groups x k_t x k_h x k_w`.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{Conv3dConfig, BN_EPS};
pub use optim::{OptimKind, OptimState};
pub use tape::{Grads, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("add {:?} and {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, f: f64) {
        for a in &mut self.data {
            *a *= f;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers the sub-tensor at the cartesian product of per-dimension
    /// index lists.
    pub fn gather(&self, index: &[Vec<usize>]) -> Result<Tensor> {
        self.check_index(index)?;
        let out_shape: Vec<usize> = index.iter().map(Vec::len).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let strides = strides(&self.shape);
        for_each_offset(index, &strides, |off| out.push(self.data[off]));
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Adds `weight * src` into the positions selected by `index`.
    pub fn scatter_add(&mut self, index: &[Vec<usize>], src: &Tensor, weight: f64) -> Result<()> {
        self.check_index(index)?;
        let src_shape: Vec<usize> = index.iter().map(Vec::len).collect();
        if src_shape != src.shape {
            return Err(Error::Shape(format!("scatter of {:?} into slice {src_shape:?}", src.shape)));
        }
        let strides = strides(&self.shape);
        let mut i = 0;
        let data = &mut self.data;
        for_each_offset(index, &strides, |off| {
            data[off] += weight * src.data[i];
            i += 1;
        });
        Ok(())
    }

    fn check_index(&self, index: &[Vec<usize>]) -> Result<()> {
        if index.len() != self.shape.len()
            || index.iter().zip(&self.shape).any(|(ix, &d)| ix.iter().any(|&i| i >= d))
        {
            return Err(Error::Shape(format!("index out of bounds for shape {:?}", self.shape)));
        }
        Ok(())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn for_each_offset(index: &[Vec<usize>], strides: &[usize], mut f: impl FnMut(usize)) {
    fn rec(index: &[Vec<usize>], strides: &[usize], base: usize, f: &mut impl FnMut(usize)) {
        match index.split_first() {
            None => f(base),
            Some((first, rest)) => {
                for &i in first {
                    rec(rest, &strides[1..], base + i * strides[0], f);
                }
            }
        }
    }
    if index.iter().any(Vec::is_empty) {
        return;
    }
    rec(index, strides, 0, &mut f);
}
