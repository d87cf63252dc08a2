//! 3-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use std::ops::Range;

use rayon::prelude::*;

use super::geometry::{as_batch, spatial, unbatch, Geometry3, Padding};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Tensor};

/// Gradients of a convolution's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

const SLAB_ELEMS: usize = 1 << 16;

struct ConvShape {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    geom: Geometry3,
}

impl ConvShape {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.geom.axes.iter().all(|a| a.stride == 1 && a.pad_lo == 0)
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    /// Output depth slabs sized so one unfolded slab stays cache resident.
    fn slabs(&self) -> impl Iterator<Item = Range<usize>> {
        let [d, h, w] = self.geom.output();
        let per_slice = self.col_rows() * h * w;
        let step = (SLAB_ELEMS / per_slice.max(1)).clamp(1, d.max(1));
        (0..d).step_by(step).map(move |s| s..(s + step).min(d))
    }
}

fn conv_shape<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<ConvShape> {
    let ws = weights.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::mismatch(format!(
            "conv weights must be [C_out, C_in, k, k, k], got {ws:?}"
        )));
    }
    if x.shape()[1] != ws[1] {
        return Err(Error::mismatch(format!(
            "input has {} channels, weights expect {}",
            x.shape()[1],
            ws[1]
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::mismatch(format!(
            "bias shape {:?} for {} filters",
            bias.shape(),
            ws[0]
        )));
    }
    Ok(ConvShape {
        batch: x.shape()[0],
        c_in: ws[1],
        c_out: ws[0],
        k: ws[2],
        geom: Geometry3::new(spatial(x), ws[2], stride, padding)?,
    })
}

/// Unfold output depth slices `ods` of one sample `[C_in, D, H, W]` into
/// `[C_in·k³, |ods|·H'·W']`.
fn im2col<T: Real>(x: &[T], cs: &ConvShape, ods: Range<usize>, col: &mut [T]) {
    let [gd, gh, gw] = cs.geom.axes;
    let (ho, wo) = (gh.output, gw.output);
    let od0 = ods.start;
    let out_vol = ods.len() * ho * wo;
    let in_plane = gh.input * gw.input;
    let in_vol = gd.input * in_plane;
    let k = cs.k;
    let unit_stride = gw.stride == 1;
    for ci in 0..cs.c_in {
        let xc = &x[ci * in_vol..(ci + 1) * in_vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * out_vol..(row + 1) * out_vol];
                    let (w_lo, w_hi) = gw.valid_outputs(kw);
                    for od in ods.clone() {
                        let t = od - od0;
                        let Some(id) = gd.source(od, kd) else {
                            dst[t * ho * wo..(t + 1) * ho * wo].fill(T::zero());
                            continue;
                        };
                        for oh in 0..ho {
                            let out_row = &mut dst[(t * ho + oh) * wo..(t * ho + oh + 1) * wo];
                            let Some(ih) = gh.source(oh, kh) else {
                                out_row.fill(T::zero());
                                continue;
                            };
                            let src = &xc[id * in_plane + ih * gw.input..][..gw.input];
                            out_row[..w_lo].fill(T::zero());
                            out_row[w_hi..].fill(T::zero());
                            if unit_stride {
                                let start = w_lo + kw - gw.pad_lo;
                                out_row[w_lo..w_hi]
                                    .copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                            } else {
                                for ow in w_lo..w_hi {
                                    out_row[ow] = src[ow * gw.stride + kw - gw.pad_lo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a slab produced by [`im2col`] back onto a sample, accumulating overlaps.
fn col2im<T: Real>(col: &[T], cs: &ConvShape, ods: Range<usize>, x: &mut [T]) {
    let [gd, gh, gw] = cs.geom.axes;
    let (ho, wo) = (gh.output, gw.output);
    let od0 = ods.start;
    let out_vol = ods.len() * ho * wo;
    let in_plane = gh.input * gw.input;
    let in_vol = gd.input * in_plane;
    let k = cs.k;
    for ci in 0..cs.c_in {
        let xc = &mut x[ci * in_vol..(ci + 1) * in_vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &col[row * out_vol..(row + 1) * out_vol];
                    let (w_lo, w_hi) = gw.valid_outputs(kw);
                    for od in ods.clone() {
                        let t = od - od0;
                        let Some(id) = gd.source(od, kd) else { continue };
                        for oh in 0..ho {
                            let Some(ih) = gh.source(oh, kh) else { continue };
                            let grad_row = &src[(t * ho + oh) * wo..(t * ho + oh + 1) * wo];
                            let dst = &mut xc[id * in_plane + ih * gw.input..][..gw.input];
                            for (ow, &g) in grad_row.iter().enumerate().take(w_hi).skip(w_lo) {
                                let iw = ow * gw.stride + kw - gw.pad_lo;
                                dst[iw] = dst[iw] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Accepts `[C_in, D, H, W]` or a batch `[N, C_in, D, H, W]`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let (xb, single) = as_batch(x)?;
    let cs = conv_shape(&xb, weights, bias, padding, stride)?;
    let in_len = cs.c_in * cs.geom.input_volume();
    let out_vol = cs.geom.output_volume();
    let out_len = cs.c_out * out_vol;
    let rows = cs.col_rows();
    let [d, h, w] = cs.geom.output();
    let mut out = Tensor::zeros(&[cs.batch, cs.c_out, d, h, w])?;
    let wv = MatView::row_major(cs.c_out, rows);
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(xb.data().par_chunks(in_len))
        .for_each(|(y, xs)| {
            for (co, plane) in y.chunks_mut(out_vol).enumerate() {
                plane.fill(bias.data()[co]);
            }
            let yv = MatView::row_major(cs.c_out, out_vol);
            if cs.pointwise() {
                gemm(T::one(), weights.data(), wv, xs, MatView::row_major(rows, out_vol), T::one(), y, yv);
            } else {
                let plane = h * w;
                let mut col = Vec::new();
                for ods in cs.slabs() {
                    let cols = ods.len() * plane;
                    col.resize(rows * cols, T::zero());
                    im2col(xs, &cs, ods.clone(), &mut col);
                    let tile = MatView { cols, ..yv };
                    let y_tile = &mut y[ods.start * plane..];
                    gemm(T::one(), weights.data(), wv, &col, MatView::row_major(rows, cols), T::one(), y_tile, tile);
                }
            }
        });
    unbatch(out, single)
}

/// Backward convolution: returns the input gradient and the parameter gradients.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let (xb, single) = as_batch(x)?;
    let (gb, _) = as_batch(upstream)?;
    let cs = conv_shape(&xb, weights, bias, padding, stride)?;
    let [d, h, w] = cs.geom.output();
    if gb.shape() != [cs.batch, cs.c_out, d, h, w] {
        return Err(Error::mismatch(format!(
            "upstream gradient {:?} does not match conv output [{}, {}, {d}, {h}, {w}]",
            upstream.shape(),
            cs.batch,
            cs.c_out
        )));
    }
    let in_len = cs.c_in * cs.geom.input_volume();
    let out_vol = cs.geom.output_volume();
    let out_len = cs.c_out * out_vol;
    let rows = cs.col_rows();
    let wv = MatView::row_major(cs.c_out, rows);
    let gv = MatView::row_major(cs.c_out, out_vol);
    let colv = MatView::row_major(rows, out_vol);

    let mut grad_x = xb.zeros_like();
    // Per-sample weight/bias partials, summed afterwards in sample order so the
    // result does not depend on the thread count.
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_x
        .data_mut()
        .par_chunks_mut(in_len)
        .zip(xb.data().par_chunks(in_len))
        .zip(gb.data().par_chunks(out_len))
        .map(|((gx, xs), g)| {
            let mut gw = vec![T::zero(); cs.c_out * rows];
            let gbias: Vec<T> = g
                .chunks(out_vol)
                .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            if cs.pointwise() {
                gemm(T::one(), g, gv, xs, colv.t(), T::zero(), &mut gw, wv);
                gemm(T::one(), weights.data(), wv.t(), g, gv, T::zero(), gx, colv);
            } else {
                let plane = h * w;
                let mut col = Vec::new();
                for ods in cs.slabs() {
                    let cols = ods.len() * plane;
                    col.resize(rows * cols, T::zero());
                    im2col(xs, &cs, ods.clone(), &mut col);
                    let g_tile = &g[ods.start * plane..];
                    let gt = MatView { cols, ..gv };
                    let ct = MatView::row_major(rows, cols);
                    gemm(T::one(), g_tile, gt, &col, ct.t(), T::one(), &mut gw, wv);
                    gemm(T::one(), weights.data(), wv.t(), g_tile, gt, T::zero(), &mut col, ct);
                    col2im(&col, &cs, ods, gx);
                }
            }
            (gw, gbias)
        })
        .collect();

    let mut grad_w = weights.zeros_like();
    let mut grad_b = bias.zeros_like();
    for (gw, gbias) in &partials {
        for (a, &b) in grad_w.data_mut().iter_mut().zip(gw) {
            *a = *a + b;
        }
        for (a, &b) in grad_b.data_mut().iter_mut().zip(gbias) {
            *a = *a + b;
        }
    }
    Ok((
        unbatch(grad_x, single)?,
        ConvGrads {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::geometry::AxisGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: Padding, stride: usize) -> Tensor<f64> {
        let (ci_n, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co_n, k) = (w.dim(0), w.dim(2));
        let gd = AxisGeometry::new(d, k, stride, pad).unwrap();
        let gh = AxisGeometry::new(h, k, stride, pad).unwrap();
        let gw = AxisGeometry::new(wd, k, stride, pad).unwrap();
        let mut y = Tensor::zeros(&[co_n, gd.output, gh.output, gw.output]).unwrap();
        for co in 0..co_n {
            for od in 0..gd.output {
                for oh in 0..gh.output {
                    for ow in 0..gw.output {
                        let mut acc = b.data()[co];
                        for ci in 0..ci_n {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (od * stride + kd) as isize - gd.pad_lo as isize;
                                        let ih = (oh * stride + kh) as isize - gh.pad_lo as isize;
                                        let iw = (ow * stride + kw) as isize - gw.pad_lo as isize;
                                        if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        acc += w.get(&[co, ci, kd, kh, kw]).unwrap()
                                            * x.get(&[ci, id as usize, ih as usize, iw as usize]).unwrap();
                                    }
                                }
                            }
                        }
                        y.set(&[co, od, oh, ow], acc).unwrap();
                    }
                }
            }
        }
        y
    }

    #[test]
    fn scalar_case() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0f32]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        let y = conv3d_forward(&x, &w, &b, Padding::Valid, 1).unwrap();
        assert_eq!(y.data(), &[6.5]);
        let g = Tensor::new(vec![1, 1, 1, 1], vec![-1.5f32]).unwrap();
        let (gx, grads) = conv3d_backward(&x, &w, &b, Padding::Valid, 1, &g).unwrap();
        assert_eq!(grads.weights.data(), &[3.0 * -1.5]);
        assert_eq!(grads.bias.data(), &[-1.5]);
        assert_eq!(gx.data(), &[2.0 * -1.5]);
    }

    #[test]
    fn ones_kernel_counts_voxels() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 2], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 2, 2, 2], 1.0).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let y = conv3d_forward(&x, &w, &b, Padding::Valid, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let g = Tensor::zeros(&[3, 4, 4, 4]).unwrap();
        let (gx, grads) = conv3d_backward(&x, &w, &b, Padding::Same, 1, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, pad, stride, size) in [
            (3, Padding::Same, 1, 5),
            (1, Padding::Same, 1, 4),
            (3, Padding::Valid, 1, 5),
            (3, Padding::Same, 2, 7),
            (2, Padding::Valid, 2, 6),
            (5, Padding::Same, 1, 4),
        ] {
            let x = random(&[2, size, size, size], &mut rng);
            let w = random(&[3, 2, k, k, k], &mut rng);
            let b = random(&[3], &mut rng);
            let fast = conv3d_forward(&x, &w, &b, pad, stride).unwrap();
            let slow = naive_conv(&x, &w, &b, pad, stride);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} pad={pad:?} stride={stride}");
        }
    }

    #[test]
    fn batch_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 2, 5, 5, 5], &mut rng);
        let w = random(&[4, 2, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv3d_forward(&x, &w, &b, Padding::Same, 1).unwrap();
        for n in 0..3 {
            let yn = conv3d_forward(&x.index_outer(n).unwrap(), &w, &b, Padding::Same, 1).unwrap();
            assert_eq!(y.index_outer(n).unwrap(), yn);
        }
    }

    #[test]
    fn same_stride_one_preserves_spatial_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 5] {
            let x = random(&[1, 6, 5, 4], &mut rng);
            let w = random(&[2, 1, k, k, k], &mut rng);
            let b = random(&[2], &mut rng);
            let y = conv3d_forward(&x, &w, &b, Padding::Same, 1).unwrap();
            assert_eq!(y.shape(), &[2, 6, 5, 4]);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(matches!(
            conv3d_forward(&x, &w, &b, Padding::Valid, 1),
            Err(Error::ShapeMismatch(_))
        ));
        let y = conv3d_forward(&x, &w, &b, Padding::Same, 1).unwrap();
        let bad = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv3d_backward(&x, &w, &b, Padding::Same, 1, &bad).is_err());
        assert!(conv3d_backward(&x, &w, &b, Padding::Same, 1, &y).is_ok());
    }
}
