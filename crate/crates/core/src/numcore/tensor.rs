//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// Dense N-dimensional array of 64-bit floats in row-major order.
///
/// `grad`, when present, always has the same number of elements as `data`.
/// Values are immutable once created; only `grad` is filled in later by the
/// backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Sole value of a rank-0 / single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Standard trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"
            )));
        }
    }
    Ok(out)
}

/// Strides mapping an output index of `out_shape` to a flat index of
/// `in_shape`, with zero stride on broadcast axes.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut s = vec![0usize; rank];
    for i in 0..in_shape.len() {
        s[offset + i] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    s
}

/// Map a flat output index to a flat input index given broadcast strides.
#[inline]
pub(crate) fn broadcast_index(
    mut flat: usize,
    out_shape: &[usize],
    out_strides: &[usize],
    in_strides: &[usize],
) -> usize {
    let mut idx = 0usize;
    for d in 0..out_shape.len() {
        let c = flat / out_strides[d];
        flat %= out_strides[d];
        idx += c * in_strides[d];
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_index_maps_to_source_elements() {
        // [2,3] viewed against source [3]: stride 0 on axis 0
        let out_shape = [2usize, 3];
        let os = strides_of(&out_shape);
        let s = broadcast_strides(&[3], &out_shape);
        let idx: Vec<usize> = (0..6).map(|i| broadcast_index(i, &out_shape, &os, &s)).collect();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
    }
}
