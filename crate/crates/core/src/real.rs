//! Scalar abstraction shared by the f32 inference path and the f64
//! gradient-checking path, plus conversions between `Tensor` and matrices.

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Real:
    Float + NumAssign + LinalgScalar + ScalarOperand + Debug + Sum + Send + Sync + Default + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

pub(crate) fn c<F: Real>(v: f64) -> F {
    F::of_f64(v)
}

pub fn matrix_to_tensor<F: Real>(m: &Array2<F>) -> Result<Tensor> {
    let (r, c) = m.dim();
    Tensor::new(vec![r, c], m.iter().map(|v| v.as_f32()).collect())
}

pub fn tensor_to_matrix<F: Real>(t: &Tensor) -> Result<Array2<F>> {
    match *t.shape() {
        [r, c] => Ok(Array2::from_shape_vec(
            (r, c),
            t.data().iter().map(|&v| F::of_f32(v)).collect(),
        )
        .expect("tensor shape and length agree")),
        _ => Err(Error::Shape(format!(
            "expected a rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}
