//! Dense f64 tensors and the reverse-mode tape built on them.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_check, relative_error};
pub use graph::{Gradients, Graph, NormStats, OpKind, OpStats, Var};

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut off = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < d, "index {x} out of range on axis {i}");
            off = off * d + x;
        }
        self.data[off]
    }

    /// Rows `idx` of a tensor along axis 0.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Bit-level equality (distinguishes -0.0 from 0.0, NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Left-pads `shape` with ones up to `ndim` axes.
pub(crate) fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut out = vec![1; ndim - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Whether `from` broadcasts to `to` under trailing-axis alignment.
pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let padded = pad_shape(from, to.len());
    padded.iter().zip(to).all(|(&a, &b)| a == b || a == 1)
}

/// Walks every element of `out_shape`, handing `(out_index, src_index)` to `f`
/// where the source has `src_shape` (same rank, extents 1 on broadcast axes).
fn walk_broadcast(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let src_strides: Vec<usize> = strides(src_shape)
        .into_iter()
        .zip(src_shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = out_shape.iter().product();
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut counter = vec![0usize; nd];
    let mut src_base = 0usize;
    let mut out_i = 0usize;
    while out_i < total {
        let mut s = src_base;
        for _ in 0..inner {
            f(out_i, s);
            out_i += 1;
            s += inner_stride;
        }
        // carry into the outer axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            counter[ax] += 1;
            src_base += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src_base -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_to(src: &Tensor, shape: &[usize]) -> Tensor {
    let padded = pad_shape(&src.shape, shape.len());
    let mut data = vec![0.0; shape.iter().product()];
    walk_broadcast(shape, &padded, |o, s| data[o] = src.data[s]);
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Sums `src` down to `target` (the inverse of broadcasting).
pub(crate) fn reduce_to(src: &Tensor, target: &[usize]) -> Tensor {
    let padded = pad_shape(target, src.shape.len());
    let mut data = vec![0.0; target.iter().product()];
    walk_broadcast(&src.shape, &padded, |o, s| data[s] += src.data[o]);
    Tensor {
        shape: target.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_channel_vector() {
        let v = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = broadcast_to(&v, &[2, 2, 1, 3]);
        assert_eq!(
            b.data(),
            &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]
        );
        let r = reduce_to(&b, &[1, 2, 1, 1]);
        assert_eq!(r.data(), &[6.0, 12.0]);
    }

    #[test]
    fn broadcast_rows_and_cols() {
        let col = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let b = broadcast_to(&col, &[3, 2]);
        assert_eq!(b.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let row = Tensor::from_vec(vec![1.0, 2.0]);
        let b = broadcast_to(&row, &[3, 2]);
        assert_eq!(b.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(reduce_to(&b, &[2]).data(), &[3.0, 6.0]);
    }

    #[test]
    fn broadcastable_rules() {
        assert!(broadcastable(&[3], &[2, 3]));
        assert!(broadcastable(&[1, 3, 1, 1], &[4, 3, 5, 5]));
        assert!(!broadcastable(&[2], &[2, 3]));
        assert!(!broadcastable(&[1, 2, 3], &[2, 3]));
    }
}
