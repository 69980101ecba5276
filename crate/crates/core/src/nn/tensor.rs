use serde::{Deserialize, Serialize};

use super::real::{Dual, Real};
use crate::error::{Error, Result};

/// Dense row-major batch. `shape[0]` is the batch dimension; the remaining
/// dimensions describe one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Input(format!(
                "tensor shape {:?} does not match {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        let n = self.row_len().max(1);
        self.data.chunks(n)
    }

    /// New tensor made of the selected rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let n = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Builds a batch from per-sample rows sharing `sample_shape`.
    pub fn from_rows<R: AsRef<[T]>>(sample_shape: &[usize], rows: &[R]) -> Result<Self> {
        let n: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::Input(format!(
                    "row of length {} does not fit sample shape {:?}",
                    r.len(),
                    sample_shape
                )));
            }
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Self { shape, data })
    }

    /// Row-wise concatenation of batches with identical sample shapes.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero tensors".into()))?;
        let sample = first.sample_shape().to_vec();
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.sample_shape() != sample.as_slice() {
                return Err(Error::Input(format!(
                    "sample shape mismatch in concat: {:?} vs {:?}",
                    p.sample_shape(),
                    sample
                )));
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![batch];
        shape.extend(sample);
        Ok(Self { shape, data })
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re().is_finite())
    }
}

impl Tensor<f64> {
    pub fn to_dual(&self) -> Tensor<Dual> {
        self.map(Dual::from_f64)
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
