//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value type. Differentiable computation is recorded
//! on a [`Tape`], which hands out [`Var`] handles; calling
//! [`Tape::backward`] on a scalar produces gradients for every recorded
//! node that (transitively) depends on a leaf created with
//! `requires_grad = true`.
//!
//! The engine is generic over [`Real`], so the same model code runs in
//! `f64` for finite-difference checks and in `f32` for training.

pub mod gradcheck;
mod mlp;
mod param;
mod tape;

pub use mlp::{mlp_forward, Activation, Linear, Mlp, MlpInit};
pub use param::{init_params, Bound, InitScheme, Parameter, ParamStore};
pub use tape::{Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor, as written to checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable by the autodiff engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = a' * b' (+ c if accumulate)` where `a'` is `a` or its transpose.
    ///
    /// `a'` is `m x k`, `b'` is `k x n`, `c` is `m x n`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite float conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

// Strides for a row-major `rows x cols` matrix, optionally viewed transposed.
fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $kernel:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(if a_transposed { m } else { k }, a_transposed);
                let (rsb, csb) = strides(if b_transposed { k } else { n }, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices were checked above to cover every element
                // addressed by the given dimensions and strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a 2-D tensor (product of trailing dims otherwise).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Plain `self * other` for 2-D tensors, outside any tape.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[m, n]);
        T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out.data, false);
        Ok(out)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Triple-loop oracle on explicitly transposed copies.
    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        (0..c).flat_map(|j| (0..r).map(move |i| x[i * c + j])).collect()
    }

    proptest! {
        #[test]
        fn gemm_matches_loops(
            m in 1usize..7, k in 1usize..7, n in 1usize..7,
            ta: bool, tb: bool, acc: bool, seed in 0u64..1000,
        ) {
            let a = init_params::<f64>(&[m, k], InitScheme::KaimingUniform, seed);
            let b = init_params::<f64>(&[k, n], InitScheme::KaimingUniform, seed + 1);
            let c0 = init_params::<f64>(&[m, n], InitScheme::KaimingUniform, seed + 2);
            let a_in = if ta { transpose(m, k, a.data()) } else { a.data().to_vec() };
            let b_in = if tb { transpose(k, n, b.data()) } else { b.data().to_vec() };
            let mut c = c0.data().to_vec();
            f64::gemm(m, k, n, &a_in, ta, &b_in, tb, &mut c, acc);
            let mut want = naive(m, k, n, a.data(), b.data());
            if acc {
                want.iter_mut().zip(c0.data()).for_each(|(w, c)| *w += c);
            }
            for (x, y) in c.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shapes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Tensor::<f64>::identity(2);
        assert_eq!(a.matmul(&i).unwrap(), a);
        assert_eq!(a.matmul(&a).unwrap().data(), &[7.0, 10.0, 15.0, 22.0]);
        assert!(matches!(a.matmul(&Tensor::zeros(&[3, 1])), Err(Error::Shape { .. })));
    }

    #[test]
    fn constructors_validate() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!((t.rows(), t.cols(), t.numel()), (2, 3, 6));
        assert!(t.clone().reshaped(vec![4]).is_err());
        assert_eq!(t.reshaped(vec![3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn little_endian_round_trip() {
        for v in [0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7] {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            assert_eq!(buf, v.to_le_bytes());
            assert_eq!(f32::read_le(&buf), v);
        }
        let mut buf = Vec::new();
        (-2.0f64).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf), -2.0);
    }

    #[test]
    fn dtype_codes() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(7), None);
        assert_eq!((DType::F32.size(), DType::F64.size()), (4, 8));
        assert_eq!(<f32 as Real>::DTYPE, DType::F32);
    }
}
