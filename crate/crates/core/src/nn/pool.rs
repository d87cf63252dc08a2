use rayon::prelude::*;

use super::geometry::{as_batch, spatial, unbatch, AxisGeometry, Geometry3, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// For each output along an axis: first in-bounds input index and tap count.
fn tap_ranges(axis: AxisGeometry, pool: usize) -> Vec<(usize, usize)> {
    (0..axis.output)
        .map(|o| {
            let taps: Vec<usize> = (0..pool).filter_map(|t| axis.source(o, t)).collect();
            (taps[0], taps.len())
        })
        .collect()
}

/// Elementwise running max over rows: replace where `v` is strictly larger.
#[inline]
fn max_rows<T: Real>(best: &mut [T], best_i: &mut [u32], v: &[T], vi: &[u32]) {
    for (((b, bi), &x), &xi) in best.iter_mut().zip(best_i.iter_mut()).zip(v).zip(vi) {
        if x > *b {
            *b = x;
            *bi = xi;
        }
    }
}

/// Argmax positions recorded by the forward max-pool, flat within each
/// `[D, H, W]` plane of the input.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// Window maximum; padded cells never win. Ties go to the first window
/// position in row-major order.
pub fn maxpool3d_forward<T: Real>(
    x: &Tensor<T>,
    pool: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (xb, single) = as_batch(x)?;
    let geom = Geometry3::new(spatial(&xb), pool, stride, padding)?;
    for a in &geom.axes {
        for o in 0..a.output {
            if (0..pool).all(|t| a.source(o, t).is_none()) {
                return Err(Error::mismatch("max-pool window lies entirely in padding"));
            }
        }
    }
    let [gd, gh, gw] = geom.axes;
    let [rd, rh, rw] = [gd, gh, gw].map(|a| tap_ranges(a, pool));
    let (n, c) = (xb.dim(0), xb.dim(1));
    let in_vol = geom.input_volume();
    let out_vol = geom.output_volume();
    let [od_n, oh_n, ow_n] = geom.output();
    let mut y = Tensor::zeros(&[n, c, od_n, oh_n, ow_n])?;
    let mut argmax = vec![0u32; n * c * out_vol];
    y.data_mut()
        .par_chunks_mut(out_vol)
        .zip(argmax.par_chunks_mut(out_vol))
        .zip(xb.data().par_chunks(in_vol))
        .for_each(|((out, am), xs)| {
            // Separable max: along W, then H, then D. Scanning taps in
            // ascending order with a strict comparison at every stage keeps
            // the first row-major position among ties.
            let (d_n, h_n, w_n) = (gd.input, gh.input, gw.input);
            let mut v1 = vec![T::zero(); d_n * h_n * ow_n];
            let mut i1 = vec![0u32; d_n * h_n * ow_n];
            for row in 0..d_n * h_n {
                let src = &xs[row * w_n..(row + 1) * w_n];
                for (ow, &(start, taps)) in rw.iter().enumerate() {
                    let mut best = src[start];
                    let mut at = start;
                    for (iw, &v) in src.iter().enumerate().take(start + taps).skip(start + 1) {
                        if v > best {
                            best = v;
                            at = iw;
                        }
                    }
                    v1[row * ow_n + ow] = best;
                    i1[row * ow_n + ow] = (row * w_n + at) as u32;
                }
            }
            let mut v2 = vec![T::zero(); d_n * oh_n * ow_n];
            let mut i2 = vec![0u32; d_n * oh_n * ow_n];
            for d in 0..d_n {
                for (oh, &(start, taps)) in rh.iter().enumerate() {
                    let o = (d * oh_n + oh) * ow_n;
                    for ih in start..start + taps {
                        let s = (d * h_n + ih) * ow_n;
                        if ih == start {
                            v2[o..o + ow_n].copy_from_slice(&v1[s..s + ow_n]);
                            i2[o..o + ow_n].copy_from_slice(&i1[s..s + ow_n]);
                        } else {
                            max_rows(&mut v2[o..o + ow_n], &mut i2[o..o + ow_n], &v1[s..s + ow_n], &i1[s..s + ow_n]);
                        }
                    }
                }
            }
            let plane = oh_n * ow_n;
            for (od, &(start, taps)) in rd.iter().enumerate() {
                let o = od * plane;
                for id in start..start + taps {
                    let s = id * plane;
                    if id == start {
                        out[o..o + plane].copy_from_slice(&v2[s..s + plane]);
                        am[o..o + plane].copy_from_slice(&i2[s..s + plane]);
                    } else {
                        max_rows(&mut out[o..o + plane], &mut am[o..o + plane], &v2[s..s + plane], &i2[s..s + plane]);
                    }
                }
            }
        });
    Ok((
        unbatch(y, single)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

/// Route each upstream value to its recorded argmax.
pub fn maxpool3d_backward<T: Real>(cache: &MaxPoolCache, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.len() != cache.argmax.len() {
        return Err(Error::mismatch(format!(
            "upstream {:?} does not match pooled output",
            upstream.shape()
        )));
    }
    let mut grad = Tensor::zeros(&cache.input_shape)?;
    let s = &cache.input_shape;
    let in_vol: usize = s[s.len() - 3..].iter().product();
    let planes = grad.len() / in_vol;
    let out_vol = cache.argmax.len() / planes;
    grad.data_mut()
        .par_chunks_mut(in_vol)
        .zip(cache.argmax.par_chunks(out_vol))
        .zip(upstream.data().par_chunks(out_vol))
        .for_each(|((gx, am), g)| {
            for (&i, &v) in am.iter().zip(g) {
                gx[i as usize] = gx[i as usize] + v;
            }
        });
    Ok(grad)
}

/// Mean over all spatial positions: `[N, C, D, H, W] -> [N, C]` (or `[C, D, H, W] -> [C]`).
pub fn avgpool3d_global_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (xb, single) = as_batch(x)?;
    let (n, c) = (xb.dim(0), xb.dim(1));
    let vol: usize = xb.shape()[2..].iter().product();
    let data = xb
        .data()
        .chunks(vol)
        .map(|plane| T::from_f64_lossy(plane.iter().map(|v| v.as_f64()).sum::<f64>() / vol as f64))
        .collect();
    if single {
        Tensor::new(vec![c], data)
    } else {
        Tensor::new(vec![n, c], data)
    }
}

pub fn avgpool3d_global_backward<T: Real>(input_shape: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input_shape.len() < 4 {
        return Err(Error::mismatch("global average pool needs spatial axes"));
    }
    let vol: usize = input_shape[input_shape.len() - 3..].iter().product();
    let planes: usize = input_shape[..input_shape.len() - 3].iter().product();
    if upstream.len() != planes {
        return Err(Error::mismatch(format!(
            "upstream {:?} for pooled input {input_shape:?}",
            upstream.shape()
        )));
    }
    let scale = T::from_f64_lossy(1.0 / vol as f64);
    let mut data = Vec::with_capacity(planes * vol);
    for &g in upstream.data() {
        data.extend(std::iter::repeat_n(g * scale, vol));
    }
    Tensor::new(input_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_cube_max() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f32).unwrap();
        let (y, _) = maxpool3d_forward(&x, 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn constant_input_constant_output_and_first_tie_wins() {
        let x = Tensor::<f32>::full(&[1, 4, 4, 4], 2.5).unwrap();
        let (y, cache) = maxpool3d_forward(&x, 2, 2, Padding::Valid).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        // first window position of each 2³ block
        assert_eq!(cache.argmax[0], 0);
        assert_eq!(cache.argmax[1], 2);
    }

    #[test]
    fn matches_window_scan_oracle_on_29_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::<f32>::from_fn(&[2, 29, 29, 29], |_| rng.random()).unwrap();
        let (y, _) = maxpool3d_forward(&x, 3, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 15, 15, 15]);
        let g = AxisGeometry::new(29, 3, 2, Padding::Same).unwrap();
        for c in 0..2 {
            for od in 0..15 {
                for oh in 0..15 {
                    for ow in 0..15 {
                        let mut m = f32::NEG_INFINITY;
                        for kd in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let (d, h, w) = (
                                        (od * 2 + kd) as isize - g.pad_lo as isize,
                                        (oh * 2 + kh) as isize - g.pad_lo as isize,
                                        (ow * 2 + kw) as isize - g.pad_lo as isize,
                                    );
                                    if [d, h, w].iter().all(|v| (0..29).contains(v)) {
                                        m = m.max(x.get(&[c, d as usize, h as usize, w as usize]).unwrap());
                                    }
                                }
                            }
                        }
                        assert_eq!(y.get(&[c, od, oh, ow]).unwrap(), m);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_conserves_mass_at_argmax_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::from_fn(&[2, 3, 7, 7, 7], |_| rng.random()).unwrap();
        let (y, cache) = maxpool3d_forward(&x, 3, 2, Padding::Same).unwrap();
        let g = Tensor::<f32>::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0)).unwrap();
        let gx = maxpool3d_backward(&cache, &g).unwrap();
        assert!((gx.sum_f64() - g.sum_f64()).abs() < 1e-5);
        let in_vol = 343;
        for (plane, am) in cache.argmax.chunks(64).enumerate() {
            let hits: std::collections::HashSet<u32> = am.iter().copied().collect();
            for i in 0..in_vol {
                if !hits.contains(&(i as u32)) {
                    assert_eq!(gx.data()[plane * in_vol + i], 0.0);
                }
            }
        }
    }

    #[test]
    fn global_average_examples() {
        let c = Tensor::<f32>::full(&[1, 3, 3, 3], 4.0).unwrap();
        assert_eq!(avgpool3d_global_forward(&c).unwrap().data(), &[4.0]);
        let x = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f32).unwrap();
        assert_eq!(avgpool3d_global_forward(&x).unwrap().data(), &[4.5]);
        let g = Tensor::new(vec![1], vec![8.0f32]).unwrap();
        let gx = avgpool3d_global_backward(&[1, 2, 2, 2], &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn global_average_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5, 6], |_| rng.random()).unwrap();
        let y = avgpool3d_global_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for d in 0..4 {
                    for h in 0..5 {
                        for w in 0..6 {
                            s += x.get(&[n, c, d, h, w]).unwrap();
                        }
                    }
                }
                assert!((y.get(&[n, c]).unwrap() - s / 120.0).abs() < 1e-6);
            }
        }
    }
}
