//! Dense row-major `f32` tensors and the handful of kernels the network needs.
//!
//! Image tensors use NCHW ordering throughout.

use std::fmt;

use crate::error::{Result, SenaError};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(SenaError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(SenaError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Tensor of `shape` with every element set to `fill`.
    pub fn new(shape: &[usize], fill: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(SenaError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape holds {len} elements but data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(SenaError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-dimensional index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let [rows, cols] = self.dims2()?;
        let mut out = vec![0.0; self.data.len()];
        transpose_into(rows, cols, &self.data, &mut out);
        Tensor::from_vec(&[cols, rows], out)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(SenaError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(SenaError::Shape(format!(
                "expected a rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(SenaError::Shape(format!(
                "expected a rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

/// Matrix product of `a[m,k]` and `b[k,n]`.
///
/// Each output element is accumulated in `f32`, starting from zero and adding
/// `a[i,p] * b[p,j]` for `p = 0..k` in order, so results are bit-identical to
/// a naive triple loop on every platform.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(SenaError::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, &a.data, &b.data, &mut out);
    Tensor::from_vec(&[m, n], out)
}

pub(crate) fn transpose_into(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

const MR: usize = 8;
const NR: usize = 32;

/// `c[m,n] += a[m,k] * b[k,n]`, one fused multiply-add per term in ascending `p`.
///
/// Each 32-column panel of `b` is packed contiguously and reused for every
/// row block, so the result does not depend on the blocking.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let full_cols = n - n % NR;
    let mut panel = vec![[0.0f32; NR]; if full_cols > 0 { k } else { 0 }];
    let mut j = 0;
    while j < full_cols {
        for (p, dst) in panel.iter_mut().enumerate() {
            dst.copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                unsafe { avx512::block_kernel(k, n, a, &panel, c, i, j) };
                i += MR;
                continue;
            }
            block_kernel(k, n, a, &panel, c, i, j);
            i += MR;
        }
        for r in i..m {
            row_kernel(k, n, a, &panel, c, r, j);
        }
        j += NR;
    }
    for r in 0..m {
        row_tail(k, n, a, b, c, r, full_cols);
    }
}

#[inline(always)]
fn block_kernel(k: usize, n: usize, a: &[f32], panel: &[[f32; NR]], c: &mut [f32], i0: usize, j0: usize) {
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..][..NR]);
    }
    let a = &a[i0 * k..(i0 + MR) * k];
    let (a0, a1, a2, a3) = (&a[..k], &a[k..2 * k], &a[2 * k..3 * k], &a[3 * k..4 * k]);
    let (a4, a5, a6, a7) = (&a[4 * k..5 * k], &a[5 * k..6 * k], &a[6 * k..7 * k], &a[7 * k..8 * k]);
    let panel = &panel[..k];
    for p in 0..k {
        let brow = &panel[p];
        let v = [a0[p], a1[p], a2[p], a3[p], a4[p], a5[p], a6[p], a7[p]];
        for j in 0..NR {
            acc[0][j] = v[0].mul_add(brow[j], acc[0][j]);
            acc[1][j] = v[1].mul_add(brow[j], acc[1][j]);
            acc[2][j] = v[2].mul_add(brow[j], acc[2][j]);
            acc[3][j] = v[3].mul_add(brow[j], acc[3][j]);
            acc[4][j] = v[4].mul_add(brow[j], acc[4][j]);
            acc[5][j] = v[5].mul_add(brow[j], acc[5][j]);
            acc[6][j] = v[6].mul_add(brow[j], acc[6][j]);
            acc[7][j] = v[7].mul_add(brow[j], acc[7][j]);
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..][..NR].copy_from_slice(row);
    }
}

/// The same 8x32 block with explicit 512-bit registers. Fused multiply-add is
/// correctly rounded everywhere, so this matches [`block_kernel`] bit for bit.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn block_kernel(
        k: usize,
        n: usize,
        a: &[f32],
        panel: &[[f32; NR]],
        c: &mut [f32],
        i0: usize,
        j0: usize,
    ) {
        assert!(a.len() >= (i0 + MR) * k && panel.len() >= k);
        assert!(c.len() >= (i0 + MR - 1) * n + j0 + NR);
        let cp = c.as_mut_ptr();
        let mut lo = [_mm512_setzero_ps(); MR];
        let mut hi = [_mm512_setzero_ps(); MR];
        for r in 0..MR {
            let row = cp.add((i0 + r) * n + j0);
            lo[r] = _mm512_loadu_ps(row);
            hi[r] = _mm512_loadu_ps(row.add(16));
        }
        let ap = a.as_ptr().add(i0 * k);
        for (p, brow) in panel[..k].iter().enumerate() {
            let b0 = _mm512_loadu_ps(brow.as_ptr());
            let b1 = _mm512_loadu_ps(brow.as_ptr().add(16));
            for r in 0..MR {
                let v = _mm512_set1_ps(*ap.add(r * k + p));
                lo[r] = _mm512_fmadd_ps(v, b0, lo[r]);
                hi[r] = _mm512_fmadd_ps(v, b1, hi[r]);
            }
        }
        for r in 0..MR {
            let row = cp.add((i0 + r) * n + j0);
            _mm512_storeu_ps(row, lo[r]);
            _mm512_storeu_ps(row.add(16), hi[r]);
        }
    }
}

#[inline(always)]
fn row_kernel(k: usize, n: usize, a: &[f32], panel: &[[f32; NR]], c: &mut [f32], i: usize, j0: usize) {
    let mut acc = [0.0f32; NR];
    acc.copy_from_slice(&c[i * n + j0..][..NR]);
    let arow = &a[i * k..(i + 1) * k];
    for (&v, brow) in arow.iter().zip(panel) {
        for j in 0..NR {
            acc[j] = v.mul_add(brow[j], acc[j]);
        }
    }
    c[i * n + j0..][..NR].copy_from_slice(&acc);
}

fn row_tail(k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], i: usize, j0: usize) {
    if j0 >= n {
        return;
    }
    let arow = &a[i * k..(i + 1) * k];
    let crow = &mut c[i * n + j0..(i + 1) * n];
    for (p, &v) in arow.iter().enumerate() {
        let brow = &b[p * n + j0..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv = v.mul_add(bv, *cv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let [m, k] = a.dims2().unwrap();
        let [_, n] = b.dims2().unwrap();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc = a.data()[i * k + p].mul_add(b.data()[p * n + j], acc);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    #[test]
    fn new_fills_every_element() {
        let t = Tensor::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(&[1], 3.5).unwrap();
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.data(), &[3.5]);
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(&[2, 0], 0.0),
            Err(SenaError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(&[], 1.0),
            Err(SenaError::InvalidShape { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(7);
        for &(m, k, n) in &[(5, 7, 3), (9, 13, 70), (4, 288, 64), (1, 3, 33), (8, 1, 96), (17, 40, 100), (16, 288, 64)] {
            let a = rng.uniform(&[m, k], -1.0, 1.0).unwrap();
            let b = rng.uniform(&[k, n], -1.0, 1.0).unwrap();
            assert!(matmul(&a, &b).unwrap().bit_eq(&naive(&a, &b)), "{m}x{k}x{n}");
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn vector_block_matches_portable_block() {
        if !std::arch::is_x86_feature_detected!("avx512f") {
            return;
        }
        let mut rng = Rng::new(11);
        let (k, n) = (37, 64);
        let a = rng.uniform(&[MR, k], -1.0, 1.0).unwrap();
        let b = rng.uniform(&[k, n], -1.0, 1.0).unwrap();
        let panel: Vec<[f32; NR]> = (0..k).map(|p| b.data()[p * n + NR..p * n + 2 * NR].try_into().unwrap()).collect();
        let c0 = rng.uniform(&[MR, n], -1.0, 1.0).unwrap();
        let mut portable = c0.data().to_vec();
        let mut vector = c0.data().to_vec();
        block_kernel(k, n, a.data(), &panel, &mut portable, 0, NR);
        unsafe { avx512::block_kernel(k, n, a.data(), &panel, &mut vector, 0, NR) };
        assert!(portable.iter().zip(&vector).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(SenaError::Shape(_))));
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = Rng::new(3);
        let t = rng.uniform(&[37, 45], 0.0, 1.0).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[45, 37]);
        assert_eq!(tt.at(&[4, 30]), t.at(&[30, 4]));
        assert_eq!(tt.transpose().unwrap(), t);
    }
}
