use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::float::Float;
use crate::error::{Error, Result};

/// Dense row-major tensor. Image batches are laid out NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64v(normal.sample(rng)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// NCHW dimensions; panics on tensors of other rank.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64v(v.to_f64v())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `[start, start + count)` of the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Tensor<T> {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}
