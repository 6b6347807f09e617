use alloc::string::String;

use crate::params::{join, Parameters};
use crate::tensor::{gemm, Matrix};
use crate::Rng;

/// Affine map `y = x·W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(fan_in)`, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self::with_std(fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64), rng)
    }

    pub fn with_std(fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self { weight: Matrix::randn(fan_in, fan_out, std, rng), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.zeros_like() }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.fan_out());
        gemm(1.0, x.view(), self.weight.view(), 0.0, &mut y);
        y.add_row_broadcast(self.bias.as_slice());
        y
    }

    /// Accumulate `dW += xᵀ·dy`, `db += Σ dy`.
    pub fn backward_params(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) {
        gemm(1.0, x.view().t(), dy.view(), 1.0, &mut grad.weight);
        dy.accumulate_col_sums(grad.bias.as_mut_slice());
    }

    /// `dx = dy·Wᵀ`.
    pub fn input_grad(&self, dy: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(dy.rows(), self.fan_in());
        gemm(1.0, dy.view(), self.weight.view().t(), 0.0, &mut dx);
        dx
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        self.backward_params(x, dy, grad);
        self.input_grad(dy)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
