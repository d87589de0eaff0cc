//! Dense row-major tensors and trainable parameters.

use serde::{Deserialize, Serialize};

use super::NnError;

/// A row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(NnError::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: expect,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row view of a 2-d tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

/// A tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param { value: Tensor::zeros(shape), grad: Tensor::zeros(shape) }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Self {
        Self::uniform_bound(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
    }

    pub fn uniform_bound(shape: &[usize], bound: f64, rng: &mut impl rand::Rng) -> Self {
        let mut p = Param::zeros(shape);
        for v in p.value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform access to a model's named parameters, used by the optimizer,
/// the checkpoint writer, and the gradient checker.
pub trait ParamVisitor {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.value.len());
        n
    }
}

/// y = W·x + b for a row-major W of shape [out, in].
pub fn affine(w: &Tensor, b: &Tensor, x: &[f64], y: &mut [f64]) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), inp);
    debug_assert_eq!(y.len(), out);
    let wd = w.data();
    for i in 0..out {
        let row = &wd[i * inp..(i + 1) * inp];
        let mut acc = b.data()[i];
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        y[i] = acc;
    }
}

/// Accumulates dW += dy ⊗ x, db += dy, dx += Wᵀ·dy.
pub fn affine_backward(
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let dwd = dw.data_mut();
    for i in 0..out {
        let g = dy[i];
        let row = &mut dwd[i * inp..(i + 1) * inp];
        for (r, xj) in row.iter_mut().zip(x) {
            *r += g * xj;
        }
        db.data_mut()[i] += g;
    }
    if let Some(dx) = dx {
        let wd = w.data();
        for i in 0..out {
            let g = dy[i];
            let row = &wd[i * inp..(i + 1) * inp];
            for (dxj, wj) in dx.iter_mut().zip(row) {
                *dxj += g * wj;
            }
        }
    }
}
