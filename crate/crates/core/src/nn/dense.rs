//! Fully connected layer with an explicit backward pass.

use rand::Rng;

use super::tensor::{affine, affine_backward, Param, ParamVisitor, Tensor};
use super::NnError;

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Dense { w: Param::uniform(&[output, input], input, rng), b: Param::zeros(&[output]) }
    }

    pub fn input_size(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_size() {
            return Err(NnError::ShapeMismatch {
                context: "Dense::forward",
                expected: self.input_size(),
                actual: x.len(),
            });
        }
        let mut y = vec![0.0; self.output_size()];
        affine(&self.w.value, &self.b.value, x, &mut y);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.input_size()];
        affine_backward(&self.w.value, &mut self.w.grad, &mut self.b.grad, x, dy, Some(&mut dx));
        dx
    }

    pub fn n_params(&self) -> usize {
        self.w.value.len() + self.b.value.len()
    }
}

impl ParamVisitor for Dense {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward through tanh given the forward *outputs*.
pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(&t, &g)| g * (1.0 - t * t)).collect()
}

#[allow(dead_code)]
fn _assert_tensor_reachable(t: &Tensor) -> usize {
    t.len()
}
