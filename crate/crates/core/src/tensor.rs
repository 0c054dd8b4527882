//! Dense row-major tensors over `f32` or `f64`.
//!
//! This is the value type everything else is built on: the tape records
//! `Tensor` values, the denoisers hold their weights as `Tensor`s, and the
//! generators produce them. Broadcasting follows the usual trailing-axis
//! rules (an extent of 1 stretches).

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Checkpoint dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Real scalar the engine is generic over. `f32` is the fast default,
/// `f64` is used by the finite-difference and oracle suites.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn std_normal(rng: &mut ChaCha8Rng) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn std_normal(rng: &mut ChaCha8Rng) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn std_normal(rng: &mut ChaCha8Rng) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand for `T::from_f64`, used all over the numeric code.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec".into(),
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// i.i.d. standard normal entries.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| T::std_normal(rng)).collect(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape".into(),
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise binary op with broadcasting.
    pub fn binary(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::ShapeMismatch {
                op: op.into(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: out_shape,
                data,
            });
        }
        let numel: usize = out_shape.iter().product();
        let la = BroadcastMap::new(&self.shape, &out_shape);
        let lb = BroadcastMap::new(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            data.push(f(self.data[la.offset(&idx)], other.data[lb.offset(&idx)]));
            advance(&mut idx, &out_shape);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc = acc + x;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / c(self.data.len() as f64)
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc = acc + x * x;
        }
        acc.sqrt()
    }

    /// Matrix product of rank-2 tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = rank2(&self.shape).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul".into(),
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let (k2, n) = rank2(&other.shape).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul".into(),
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul".into(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transposed rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = rank2(&self.shape).ok_or_else(|| Error::ShapeMismatch {
            op: "transpose".into(),
            lhs: self.shape.clone(),
            rhs: vec![],
        })?;
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Sum-reduce `self` onto `target_shape` (inverse of broadcasting).
    pub fn reduce_to(&self, target_shape: &[usize]) -> Result<Self> {
        if self.shape == target_shape {
            return Ok(self.clone());
        }
        if broadcast_shape(target_shape, &self.shape).as_deref() != Some(&self.shape[..]) {
            return Err(Error::ShapeMismatch {
                op: "reduce_to".into(),
                lhs: self.shape.clone(),
                rhs: target_shape.to_vec(),
            });
        }
        let map = BroadcastMap::new(target_shape, &self.shape);
        let numel_t: usize = target_shape.iter().product();
        let mut data = vec![T::zero(); numel_t];
        let mut idx = vec![0usize; self.shape.len()];
        for i in 0..self.data.len() {
            let off = map.offset(&idx);
            data[off] = data[off] + self.data[i];
            advance(&mut idx, &self.shape);
        }
        Ok(Tensor {
            shape: target_shape.to_vec(),
            data,
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    pub fn from_f64_slice(values: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(values.iter().map(|&x| c(x)).collect(), shape)
    }
}

/// `a @ b -> out`, all row-major; `out` must be zeroed by the caller.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // ikj order keeps the inner loop contiguous in both b and out.
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_ip * b_row[j];
            }
        }
    }
}

fn rank2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// Broadcast result shape, or `None` if the shapes are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Maps a multi-index in the broadcast output to a flat offset in the input.
struct BroadcastMap {
    // Stride per output axis; 0 where the input axis was broadcast.
    strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let pad = rank - in_shape.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1usize;
        for i in (0..in_shape.len()).rev() {
            strides[pad + i] = if in_shape[i] == 1 { 0 } else { s };
            s *= in_shape[i];
        }
        BroadcastMap { strides }
    }

    #[inline]
    fn offset(&self, idx: &[usize]) -> usize {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * self.strides[i];
        }
        off
    }
}

#[inline]
fn advance(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}
