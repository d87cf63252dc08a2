//! Dense row-major tensors and the small amount of linear algebra the layers need.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks can
/// run the identical code paths in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Layout of a matrix view over a flat slice: `rows × cols` with explicit strides.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// Safe wrapper around [`Real::gemm_raw`]: `c = alpha * a·b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm row extent");
    assert_eq!(bv.cols, cv.cols, "gemm column extent");
    assert!(a.len() >= av.span() && b.len() >= bv.span() && c.len() >= cv.span());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: spans checked above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Dense N-dimensional array, row-major (last axis fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::mismatch(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor of the given shape with every element set to `value`.
    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.shape.len()
            || coords.iter().zip(&self.shape).any(|(&c, &d)| c >= d)
        {
            return Err(Error::mismatch(format!(
                "coordinate {coords:?} outside shape {:?}",
                self.shape
            )));
        }
        Ok(coords
            .iter()
            .zip(self.strides())
            .map(|(&c, s)| c * s)
            .sum())
    }

    pub fn get(&self, coords: &[usize]) -> Result<T> {
        Ok(self.data[self.flat_index(coords)?])
    }

    pub fn set(&mut self, coords: &[usize], value: T) -> Result<()> {
        let i = self.flat_index(coords)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::mismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch(format!(
                "add {:?} + {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Copy of the window `offset .. offset + size`.
    pub fn crop(&self, offset: &[usize], size: &[usize]) -> Result<Self> {
        let oob = || Error::CropOutOfBounds {
            shape: self.shape.clone(),
            offset: offset.to_vec(),
            size: size.to_vec(),
        };
        if offset.len() != self.rank() || size.len() != self.rank() {
            return Err(oob());
        }
        check_shape(size).map_err(|_| oob())?;
        if offset
            .iter()
            .zip(size)
            .zip(&self.shape)
            .any(|((&o, &s), &d)| o + s > d)
        {
            return Err(oob());
        }
        let strides = self.strides();
        let run = size[self.rank() - 1];
        let mut out = Vec::with_capacity(size.iter().product());
        let outer: usize = size[..self.rank() - 1].iter().product();
        let mut idx = vec![0usize; self.rank() - 1];
        for _ in 0..outer {
            let base: usize = idx
                .iter()
                .enumerate()
                .map(|(a, &i)| (offset[a] + i) * strides[a])
                .sum::<usize>()
                + offset[self.rank() - 1];
            out.extend_from_slice(&self.data[base..base + run]);
            // odometer increment over the outer axes
            for a in (0..idx.len()).rev() {
                idx[a] += 1;
                if idx[a] < size[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Tensor {
            shape: size.to_vec(),
            data: out,
        })
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxes(vec![axis]));
        }
        let mut offset = vec![0; self.rank()];
        let mut size = self.shape.clone();
        offset[axis] = start;
        size[axis] = len;
        self.crop(&offset, &size)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(ts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::mismatch("concat of an empty list"))?;
        if axis >= first.rank() {
            return Err(Error::InvalidAxes(vec![axis]));
        }
        for t in ts {
            let same = t.rank() == first.rank()
                && t
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !same {
                return Err(Error::mismatch(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = ts.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for t in ts {
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Channel concatenation for `[C, D, H, W]` activations (axis 0).
    pub fn concat_channels(ts: &[&Tensor<T>]) -> Result<Self> {
        Self::concat(ts, 0)
    }

    /// Inverse of [`Tensor::concat`]: split `axis` into consecutive pieces.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxes(vec![axis]));
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::mismatch(format!(
                "split sizes {sizes:?} do not cover extent {}",
                self.shape[axis]
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Mean and biased variance over `axes`; the result is indexed by the
    /// kept axes (shape `[1]` when every axis is reduced).
    pub fn reduce_moments(&self, axes: &[usize]) -> Result<(Self, Self)> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != axes.len() || sorted.iter().any(|&a| a >= self.rank())
        {
            return Err(Error::InvalidAxes(axes.to_vec()));
        }
        let kept: Vec<usize> = (0..self.rank()).filter(|a| !sorted.contains(a)).collect();
        let kept_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| self.shape[a]).collect()
        };
        let kept_strides = strides_of(&kept_shape);
        let n_kept: usize = kept_shape.iter().product();
        let count = (self.data.len() / n_kept) as f64;
        let strides = self.strides();
        let target = |flat: usize| -> usize {
            kept.iter()
                .zip(&kept_strides)
                .map(|(&a, &ks)| (flat / strides[a]) % self.shape[a] * ks)
                .sum()
        };
        let mut sums = vec![0f64; n_kept];
        for (i, v) in self.data.iter().enumerate() {
            sums[target(i)] += v.as_f64();
        }
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let mut sq = vec![0f64; n_kept];
        for (i, v) in self.data.iter().enumerate() {
            let k = target(i);
            let d = v.as_f64() - means[k];
            sq[k] += d * d;
        }
        let mean = Tensor {
            shape: kept_shape.clone(),
            data: means.iter().map(|&m| T::from_f64_lossy(m)).collect(),
        };
        let var = Tensor {
            shape: kept_shape,
            data: sq.iter().map(|&s| T::from_f64_lossy(s / count)).collect(),
        };
        Ok((mean, var))
    }

    /// Sub-tensor at `index` of the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 || index >= self.shape[0] {
            return Err(Error::mismatch(format!(
                "outer index {index} for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(ts: &[&Tensor<T>]) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::mismatch("stack of an empty list"))?;
        if ts.iter().any(|t| t.shape != first.shape) {
            return Err(Error::mismatch("stack of differently shaped tensors"));
        }
        let mut shape = vec![ts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(ts.len() * first.len());
        for t in ts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}
