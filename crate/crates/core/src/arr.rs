//! Flat dense array with a small dynamic shape, the storage type behind
//! feature maps, vectors, and token matrices.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Arr<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Arr<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length", dims);
        Arr { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Arr {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Arr {
            dims: vec![1],
            data: vec![x],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Arr {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, name: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                name: name.to_string(),
                message: "non-finite entry".to_string(),
            })
        }
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &Arr<T>) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn map_into<U: Real>(&self) -> Arr<U> {
        Arr {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}
