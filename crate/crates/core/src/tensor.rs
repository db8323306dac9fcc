//! Dense row-major n-dimensional arrays.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Converts an `f64` buffer to this element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// Uniform Glorot initialization for a `(fan_in, fan_out)` matrix.
    pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-bound..bound)))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign on mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies the axis permutation `perm` of this tensor into a new buffer.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let data = permute_data(&self.data, &self.shape, perm);
        Tensor { shape, data }
    }
}

/// Boolean array used for masks. `true` marks an allowed position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolTensor {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolTensor {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("mask shape {shape:?} does not match {} values", data.len())));
        }
        Ok(BoolTensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: bool) -> Self {
        BoolTensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Expands to `shape` under right-aligned broadcasting (extent 1 repeats).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Vec<bool>> {
        if self.shape == shape {
            return Ok(self.data.clone());
        }
        if self.shape.len() > shape.len() {
            return Err(Error::shape(format!("mask {:?} not broadcastable to {shape:?}", self.shape)));
        }
        let pad = shape.len() - self.shape.len();
        let own = strides(&self.shape);
        let mut bstrides = vec![0usize; shape.len()];
        for (k, (&m, &s)) in self.shape.iter().zip(&own).enumerate() {
            let target = shape[pad + k];
            if m == target {
                bstrides[pad + k] = s;
            } else if m != 1 {
                return Err(Error::shape(format!("mask {:?} not broadcastable to {shape:?}", self.shape)));
            }
        }
        // odometer walk over the output, tracking the source offset incrementally
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..numel {
            out.push(self.data[src]);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                src += bstrides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src -= bstrides[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the axis order `perm`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    debug_assert_eq!(perm.len(), shape.len());
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_src_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = out_src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|t| data[base + t * inner_stride]));
        }
        // odometer over all axes but the last
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += out_src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= out_src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), t.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.0f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.permute(&[]).data(), &[3.0]);
    }
}
