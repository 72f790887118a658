//! Dense row-major tensors, real64 or complex128. No silent promotion: mixed
//! real/complex arithmetic must go through explicit conversion ops.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Real(ArrayD<f64>),
    Complex(ArrayD<Complex64>),
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor::Real(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros_real(shape: &[usize]) -> Self {
        Tensor::Real(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn zeros_complex(shape: &[usize]) -> Self {
        Tensor::Complex(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ArrayD::from_shape_vec(IxDyn(shape), data)
            .map(Tensor::Real)
            .map_err(|e| Error::invalid(format!("tensor shape/data mismatch: {e}")))
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Real(a) => a.shape(),
            Tensor::Complex(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Real(a) => a.len(),
            Tensor::Complex(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Tensor::Complex(_))
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Tensor::Real(a) => Tensor::Real(ArrayD::zeros(a.raw_dim())),
            Tensor::Complex(a) => Tensor::Complex(ArrayD::zeros(a.raw_dim())),
        }
    }

    pub fn real(&self) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::Real(a) => Ok(a),
            Tensor::Complex(_) => Err(Error::invalid("expected real tensor, got complex")),
        }
    }

    pub fn complex(&self) -> Result<&ArrayD<Complex64>> {
        match self {
            Tensor::Complex(a) => Ok(a),
            Tensor::Real(_) => Err(Error::invalid("expected complex tensor, got real")),
        }
    }

    pub fn into_real(self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::Real(a) => Ok(a),
            Tensor::Complex(_) => Err(Error::invalid("expected real tensor, got complex")),
        }
    }

    pub fn into_complex(self) -> Result<ArrayD<Complex64>> {
        match self {
            Tensor::Complex(a) => Ok(a),
            Tensor::Real(_) => Err(Error::invalid("expected complex tensor, got real")),
        }
    }

    /// Value of a one-element real tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        let a = self.real()?;
        if a.len() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar tensor, got shape {:?}",
                a.shape()
            )));
        }
        Ok(*a.iter().next().unwrap())
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Tensor::Real(a) => a.iter().all(|v| v.is_finite()),
            Tensor::Complex(a) => a.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        }
    }
}

impl From<ArrayD<f64>> for Tensor {
    fn from(a: ArrayD<f64>) -> Self {
        Tensor::Real(a)
    }
}

impl From<ArrayD<Complex64>> for Tensor {
    fn from(a: ArrayD<Complex64>) -> Self {
        Tensor::Complex(a)
    }
}

/// Embed a real array into the complex plane (zero imaginary part).
pub fn complexify(a: &ArrayD<f64>) -> ArrayD<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(2.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn dtype_guards() {
        let r = Tensor::zeros_real(&[2, 2]);
        let c = Tensor::zeros_complex(&[2]);
        assert!(r.complex().is_err());
        assert!(c.real().is_err());
        assert!(!r.is_complex() && c.is_complex());
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[3], vec![1.0, 2.0]).is_err());
    }
}
