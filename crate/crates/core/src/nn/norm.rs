use alloc::string::String;
use alloc::vec::Vec;

use crate::params::{join, Parameters};
use crate::tensor::Matrix;

const EPS: f64 = 1e-5;

/// Layer normalization over the feature (column) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Matrix::filled(1, dim, 1.0), beta: Matrix::zeros(1, dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: self.gamma.zeros_like(), beta: self.beta.zeros_like() }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), d);
        let (g, b) = (self.gamma.as_slice(), self.beta.as_slice());
        for r in 0..x.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + EPS);
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            let yr = y.row_mut(r);
            for j in 0..d {
                yr[j] = g[j] * row[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let g = self.gamma.as_slice();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = alloc::vec![0.0; d];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xr = cache.xhat.row(r);
            {
                let gg = grad.gamma.as_mut_slice();
                for j in 0..d {
                    gg[j] += dyr[j] * xr[j];
                }
            }
            {
                let gb = grad.beta.as_mut_slice();
                for j in 0..d {
                    gb[j] += dyr[j];
                }
            }
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
                sum += dxhat[j];
                sum_x += dxhat[j] * xr[j];
            }
            let is = cache.inv_std[r];
            let dxr = dx.row_mut(r);
            for j in 0..d {
                dxr[j] = is / d as f64 * (d as f64 * dxhat[j] - sum - xr[j] * sum_x);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
