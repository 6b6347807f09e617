//! Named parameter traversal.
//!
//! Every learnable component implements [`Parameters`]; the model, the
//! optimizer, the gradient buffers and the checkpoint writer all walk
//! parameters in the same deterministic order through it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Matrix;

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, m| out.push((n, m)));
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, *mut Matrix)> = Vec::new();
        self.visit_mut(prefix, &mut |n, m| out.push((n, m as *mut Matrix)));
        // SAFETY: each pointer comes from a distinct field reached through a
        // single `&mut self` traversal, so no two entries alias, and all of
        // them live as long as the returned borrow of `self`.
        out.into_iter().map(|(n, p)| (n, unsafe { &mut *p })).collect()
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    /// Zero every parameter in place.
    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(0.0));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
