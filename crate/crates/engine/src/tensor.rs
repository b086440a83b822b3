use crate::error::{EngineError, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(EngineError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(EngineError::Contract(format!(
                "shape {shape:?} holds {count} values but buffer has {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let count = shape.iter().product();
        Self::new(shape, vec![T::zero(); count]).expect("zeros: valid shape")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let count = shape.iter().product();
        Self::new(shape, vec![value; count]).expect("full: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(EngineError::Contract(format!(
                    "gradient length {} does not match tensor length {}",
                    g.len(),
                    self.values.len()
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.values.len() || shape.contains(&0) {
            return Err(EngineError::Contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.to_f64()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }
}
