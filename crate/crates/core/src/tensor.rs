//! Dense row-major tensors and the matrix kernels everything else is built on.
//!
//! All reductions run in a fixed order so results are bit-reproducible. Matrix
//! products accumulate in the element type, strictly left to right over the
//! inner dimension; scalar reductions (sums, means, norms) accumulate in `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::real::Real;

pub const TENSOR_MAGIC: &[u8; 8] = b"RATN0001";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting empty/zero dimensions, a length mismatch, or non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} elements but data has {}", expected, data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid shape");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Convenience for small literal matrices in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Usage("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| T::of(v))).collect();
        Self::new([r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        };
        out.ensure_finite(op)?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        transpose_into(&self.data, r, c, &mut out);
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }
}

/// `max|a - b| / max(max|b|, tiny)`: the relative error measure used throughout the tests.
pub fn max_relative_error<T: Real, U: Real>(a: &Tensor<T>, b: &Tensor<U>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x.f64() - y.f64()).abs()));
    diff / b.max_abs().max(1e-30)
}

/// Relative Frobenius error `‖a - b‖ / ‖b‖`.
pub fn relative_frobenius_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_frobenius_error shape mismatch");
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum();
    num.sqrt() / b.frobenius().max(1e-30)
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    let t = Tensor::from_parts(vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_tn")?;
    let (m2, n) = b.dims2("matmul_tn")?;
    if m != m2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); k * n];
    gemm_tn(&a.data, &b.data, &mut out, m, k, n);
    let t = Tensor::from_parts(vec![k, n], out);
    t.ensure_finite("matmul_tn")?;
    Ok(t)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nt(&a.data, &b.data, &mut out, m, k, n);
    let t = Tensor::from_parts(vec![m, n], out);
    t.ensure_finite("matmul_nt")?;
    Ok(t)
}

/// `c = a[m×k] · b[k×n]`, overwriting `c`.
///
/// Each output element is accumulated over `k` in ascending order.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(T::zero());
    gemm_acc(a, b, c, m, k, n);
}

/// `c += a[m×k] · b[k×n]`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was just checked.
        return unsafe { gemm_acc_avx(a, b, c, m, k, n) };
    }
    gemm_acc_generic(a, b, c, m, k, n)
}

/// Wider registers, same per-element operation sequence: no fused multiply-add is enabled,
/// so results are bit-identical to the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_acc_avx<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc_generic(a, b, c, m, k, n)
}

const MR: usize = 4;
const NR: usize = 16;

#[inline(always)]
fn gemm_acc_generic<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    if full_cols > 0 {
        for i0 in (0..full_rows).step_by(MR) {
            let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for j0 in (0..full_cols).step_by(NR) {
                let mut acc = [[T::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for (p, brow) in b.chunks_exact(n).enumerate() {
                    let brow: &[T; NR] = brow[j0..j0 + NR].try_into().expect("tile");
                    for (row, arow) in acc.iter_mut().zip(&a_rows) {
                        let av = arow[p];
                        for (cv, &bv) in row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            }
            for (r, arow) in a_rows.iter().enumerate() {
                let crow = &mut c[(i0 + r) * n + full_cols..(i0 + r + 1) * n];
                for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                    for (cv, &bv) in crow.iter_mut().zip(&brow[full_cols..]) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
    let start = if full_cols > 0 { full_rows } else { 0 };
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)).take(m).skip(start) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = aᵀ · b` for `a[m×k]`, `b[m×n]`, `c[k×n]`; rows of `a`/`b` are folded in ascending order.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.fill(T::zero());
    gemm_tn_acc(a, b, c, m, k, n);
}

pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was just checked.
        return unsafe { gemm_tn_acc_avx(a, b, c, k, n) };
    }
    gemm_tn_acc_generic(a, b, c, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_tn_acc_avx<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    gemm_tn_acc_generic(a, b, c, k, n)
}

#[inline(always)]
fn gemm_tn_acc_generic<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let full_rows = k - k % MR;
    let full_cols = n - n % NR;
    if full_cols == 0 {
        return gemm_tn_acc_rows(a, b, c, k, n, 0);
    }
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
                let a4: &[T; MR] = arow[i0..i0 + MR].try_into().expect("tile");
                let brow: &[T; NR] = brow[j0..j0 + NR].try_into().expect("tile");
                for (row, &av) in acc.iter_mut().zip(a4) {
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
            for r in i0..i0 + MR {
                let av = arow[r];
                for (cv, &bv) in c[r * n + full_cols..(r + 1) * n].iter_mut().zip(&brow[full_cols..]) {
                    *cv += av * bv;
                }
            }
        }
    }
    gemm_tn_acc_rows(a, b, c, k, n, full_rows)
}

/// Untiled `c[first..k, :] += aᵀ b` rows.
#[inline(always)]
fn gemm_tn_acc_rows<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, first: usize) {
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, crow) in arow[first..].iter().zip(c.chunks_exact_mut(n).skip(first)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(b, n, k, &mut bt);
    gemm(a, &bt, c, m, k, n);
}

pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for (i, row) in src.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            dst[j * rows + i] = v;
        }
    }
}

impl Tensor<f32> {
    /// Writes `RATN0001`, the rank and dims as little-endian `u32`, then the `f32` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("tensor stream: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word).map_err(io)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}
