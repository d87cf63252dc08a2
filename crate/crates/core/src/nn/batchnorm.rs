//! Per-channel batch normalization over `[N, C, D, H, W]` batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Train mode uses batch statistics (and updates running stats); infer mode
/// uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable affine parameters and the running statistics of one layer.
pub struct BatchNormState<'a, T: Real> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a mut Tensor<T>,
    pub running_var: &'a mut Tensor<T>,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    pub mode: Mode,
    /// Normalized input, same shape as the forward input.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

fn layout<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 || x.dim(1) != channels {
        return Err(Error::mismatch(format!(
            "batch-norm over {channels} channels got input {:?}",
            x.shape()
        )));
    }
    Ok((x.dim(0), x.shape()[2..].iter().product()))
}

fn channel_sums<T: Real>(
    data: &[T],
    n: usize,
    c: usize,
    vol: usize,
    f: impl Fn(usize, T) -> f64 + Sync,
) -> Vec<f64> {
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut acc = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * vol;
                acc += data[base..base + vol].iter().map(|&v| f(ch, v)).sum::<f64>();
            }
            acc
        })
        .collect()
}

pub fn batchnorm3d_forward<T: Real>(
    x: &Tensor<T>,
    state: BatchNormState<'_, T>,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = state.gamma.len();
    for t in [state.beta as &Tensor<T>, &*state.running_mean, &*state.running_var] {
        if t.shape() != [c] {
            return Err(Error::mismatch("batch-norm parameter extents differ"));
        }
    }
    let (n, vol) = layout(x, c)?;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let count = n * vol;
            if count < 2 {
                return Err(Error::DegenerateBatch);
            }
            let mean: Vec<f64> = channel_sums(x.data(), n, c, vol, |_, v| v.as_f64())
                .into_iter()
                .map(|s| s / count as f64)
                .collect();
            let var: Vec<f64> = channel_sums(x.data(), n, c, vol, |ch, v| {
                let d = v.as_f64() - mean[ch];
                d * d
            })
            .into_iter()
            .map(|s| s / count as f64)
            .collect();
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = T::from_f64_lossy((1.0 - momentum) * rm.as_f64() + momentum * mean[ch]);
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = T::from_f64_lossy((1.0 - momentum) * rv.as_f64() + momentum * var[ch]);
            }
            (mean, var)
        }
        Mode::Infer => (
            state.running_mean.data().iter().map(|v| v.as_f64()).collect(),
            state.running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    xhat.data_mut()
        .par_chunks_mut(vol)
        .zip(y.data_mut().par_chunks_mut(vol))
        .zip(x.data().par_chunks(vol))
        .enumerate()
        .for_each(|(plane, ((xh, out), xs))| {
            let ch = plane % c;
            let (m, s) = (T::from_f64_lossy(mean[ch]), T::from_f64_lossy(inv_std[ch]));
            let (g, b) = (state.gamma.data()[ch], state.beta.data()[ch]);
            for ((h, o), &v) in xh.iter_mut().zip(out.iter_mut()).zip(xs) {
                *h = (v - m) * s;
                *o = g * *h + b;
            }
        });
    Ok((
        y,
        BatchNormCache {
            mode,
            xhat,
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm3d_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    if upstream.shape() != cache.xhat.shape() {
        return Err(Error::mismatch(format!(
            "upstream {:?} vs batch-norm output {:?}",
            upstream.shape(),
            cache.xhat.shape()
        )));
    }
    let (n, vol) = layout(upstream, c)?;
    let g = upstream.data();
    let xh = cache.xhat.data();
    let sum_g = channel_sums(g, n, c, vol, |_, v| v.as_f64());
    let sum_gx: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut acc = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * vol;
                acc += g[base..base + vol]
                    .iter()
                    .zip(&xh[base..base + vol])
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum::<f64>();
            }
            acc
        })
        .collect();
    let count = (n * vol) as f64;
    let mut grad_x = upstream.zeros_like();
    grad_x
        .data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(plane, gx)| {
            let ch = plane % c;
            let base = plane * vol;
            let scale = gamma.data()[ch].as_f64() * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mg = sum_g[ch] / count;
                    let mgx = sum_gx[ch] / count;
                    for (i, out) in gx.iter_mut().enumerate() {
                        let v = g[base + i].as_f64() - mg - xh[base + i].as_f64() * mgx;
                        *out = T::from_f64_lossy(scale * v);
                    }
                }
                Mode::Infer => {
                    for (i, out) in gx.iter_mut().enumerate() {
                        *out = T::from_f64_lossy(scale * g[base + i].as_f64());
                    }
                }
            }
        });
    let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::from_f64_lossy).collect());
    Ok((grad_x, to_t(sum_gx)?, to_t(sum_g)?))
}
