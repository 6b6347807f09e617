use alloc::string::String;

use super::{gelu, gelu_grad, Linear};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl Mlp {
    pub fn new(dim_in: usize, hidden: usize, dim_out: usize, rng: &mut Rng) -> Self {
        Self { fc1: Linear::new(dim_in, hidden, rng), fc2: Linear::new(hidden, dim_out, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { fc1: self.fc1.zeros_like(), fc2: self.fc2.zeros_like() }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(&act);
        (y, MlpCache { input: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Matrix, grad: &mut Mlp) -> Matrix {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        for (d, p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *d *= gelu_grad(*p);
        }
        self.fc1.backward(&cache.input, &dact, &mut grad.fc1)
    }
}

impl Parameters for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
