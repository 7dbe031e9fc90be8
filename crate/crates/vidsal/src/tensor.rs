//! Dense row-major f32 tensors.
//!
//! Storage is a flat `Vec<f32>` with row-major (last axis fastest) layout.
//! Rank 0 is a scalar: empty shape, one element. There is no general
//! broadcasting anywhere in the crate; operations either require equal shapes
//! or take a scalar operand explicitly.

use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating that every shape entry is at least 1 and
    /// that the data length matches the shape product.
    pub fn new(shape: impl AsRef<[usize]>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.as_ref().to_vec();
        if let Some(_zero) = shape.iter().find(|&&d| d == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} has a zero entry; every axis must be >= 1",
                shape
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "shape {:?} has a zero entry", shape);
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let mut out = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..out.numel() {
            out.data[i] = f(&idx);
            bump_index(&mut idx, shape);
            let _ = i;
        }
        out
    }

    /// Samples i.i.d. normal entries via Box-Muller; deterministic for a
    /// given generator state.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let mut out = Tensor::zeros(shape);
        let mut cached: Option<f64> = None;
        for v in out.data.iter_mut() {
            let z = match cached.take() {
                Some(z) => z,
                None => {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let r = (-2.0 * u1.ln()).sqrt();
                    let theta = 2.0 * std::f64::consts::PI * u2;
                    cached = Some(r * theta.sin());
                    r * theta.cos()
                }
            };
            *v = (z * std as f64) as f32;
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a scalar (any one-element tensor).
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {} out of range for axis {} of shape {:?}", i, axis, self.shape);
            flat = flat * d + i;
        }
        flat
    }

    /// Reinterprets the flat data under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "permutation {:?} is not a permutation of {} axes",
                axes, r
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        let mut out = Tensor::zeros(&out_shape);
        let mut idx = vec![0usize; r];
        for o in 0..out.numel() {
            let mut src = 0usize;
            for (k, &i) in idx.iter().enumerate() {
                src += i * in_strides[axes[k]];
            }
            out.data[o] = self.data[src];
            bump_index(&mut idx, &out_shape);
        }
        Ok(out)
    }

    /// Reverses one axis (used for horizontal flips).
    pub fn flip_axis(&self, axis: usize) -> Tensor {
        assert!(axis < self.rank());
        let strides = self.strides();
        let n = self.shape[axis];
        let stride = strides[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.clone();
        for o in 0..outer {
            for i in 0..n {
                let src = o * n * stride + i * stride;
                let dst = o * n * stride + (n - 1 - i) * stride;
                for k in 0..inner {
                    out.data[dst + k] = self.data[src + k];
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equal-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Advances a row-major odometer index; wraps to zero at the end.
pub(crate) fn bump_index(idx: &mut [usize], shape: &[usize]) {
    for axis in (0..idx.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < shape[axis] {
            return;
        }
        idx[axis] = 0;
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// General pairwise tensor contraction:
/// `out[a_free..., b_free...] = sum over pairs of a[..] * b[..]`,
/// where `pairs` lists `(axis of a, axis of b)` to contract. Free axes keep
/// their original relative order. Accumulation is in f64.
pub fn contract(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let mut a_contr = vec![false; a.rank()];
    let mut b_contr = vec![false; b.rank()];
    for &(ax, bx) in pairs {
        if ax >= a.rank() || bx >= b.rank() {
            return Err(Error::Shape(format!(
                "contraction pair ({}, {}) out of range for ranks {} and {}",
                ax,
                bx,
                a.rank(),
                b.rank()
            )));
        }
        if a.shape()[ax] != b.shape()[bx] {
            return Err(Error::Shape(format!(
                "contracted axis size mismatch: axis {} of {:?} vs axis {} of {:?}",
                ax,
                a.shape(),
                bx,
                b.shape()
            )));
        }
        if std::mem::replace(&mut a_contr[ax], true) | std::mem::replace(&mut b_contr[bx], true) {
            return Err(Error::Shape(format!("axis contracted twice in pairs {:?}", pairs)));
        }
    }
    let a_free: Vec<usize> = (0..a.rank()).filter(|&x| !a_contr[x]).collect();
    let b_free: Vec<usize> = (0..b.rank()).filter(|&x| !b_contr[x]).collect();

    let mut out_shape: Vec<usize> = a_free.iter().map(|&x| a.shape()[x]).collect();
    out_shape.extend(b_free.iter().map(|&x| b.shape()[x]));
    let contr_dims: Vec<usize> = pairs.iter().map(|&(ax, _)| a.shape()[ax]).collect();

    let a_strides = a.strides();
    let b_strides = b.strides();
    let mut out = Tensor::zeros(&out_shape);

    let mut af_idx = vec![0usize; a_free.len()];
    let a_free_shape: Vec<usize> = a_free.iter().map(|&x| a.shape()[x]).collect();
    let b_free_shape: Vec<usize> = b_free.iter().map(|&x| b.shape()[x]).collect();
    let a_free_total: usize = a_free_shape.iter().product();
    let b_free_total: usize = b_free_shape.iter().product();
    let contr_total: usize = contr_dims.iter().product();

    let mut o = 0usize;
    for _ in 0..a_free_total {
        let a_base: usize =
            af_idx.iter().zip(&a_free).map(|(&i, &ax)| i * a_strides[ax]).sum();
        let mut bf_idx = vec![0usize; b_free.len()];
        for _ in 0..b_free_total {
            let b_base: usize =
                bf_idx.iter().zip(&b_free).map(|(&i, &bx)| i * b_strides[bx]).sum();
            let mut acc = 0f64;
            let mut c_idx = vec![0usize; pairs.len()];
            for _ in 0..contr_total {
                let mut ai = a_base;
                let mut bi = b_base;
                for (k, &i) in c_idx.iter().enumerate() {
                    ai += i * a_strides[pairs[k].0];
                    bi += i * b_strides[pairs[k].1];
                }
                acc += a.data[ai] as f64 * b.data[bi] as f64;
                bump_index(&mut c_idx, &contr_dims);
            }
            out.data[o] = acc as f32;
            o += 1;
            bump_index(&mut bf_idx, &b_free_shape);
        }
        bump_index(&mut af_idx, &a_free_shape);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_axis() {
        let err = Tensor::new(vec![2, 0, 3], vec![]).unwrap_err();
        assert!(err.to_string().contains("zero entry"), "{}", err);
    }

    #[test]
    fn rejects_data_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{}", err);
    }

    #[test]
    fn scalar_has_rank_zero_and_one_element() {
        let s = Tensor::scalar(4.25);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn reshape_keeps_flat_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(t.permute(&[0, 0]).is_err());
    }

    #[test]
    fn flip_reverses_one_axis() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = t.flip_axis(1);
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let ff = f.flip_axis(1);
        assert_eq!(ff.data(), t.data());
    }

    #[test]
    fn contract_reproduces_matrix_product() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = contract(&a, &b, &[(1, 0)]).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn contract_checks_axis_sizes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 1]);
        let err = contract(&a, &b, &[(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{}", err);
    }
}
