use rand::Rng;

use super::batchnorm::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes upstream where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::mismatch("relu backward shapes differ"));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Multiplicative inverted-dropout mask: each entry is `0` or `1/keep_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Real> {
    pub scale: Vec<T>,
}

pub fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("keep probability {keep_prob} outside (0, 1]")))
    }
}

/// Inverted dropout. Infer mode and `keep_prob == 1` are the identity and
/// return no mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    check_keep_prob(keep_prob)?;
    if mode == Mode::Infer || keep_prob == 1.0 {
        return Ok((x.clone(), None));
    }
    let kept = T::from_f64_lossy(1.0 / keep_prob);
    let scale: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < keep_prob { kept } else { T::zero() })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(DropoutMask { scale })))
}

pub fn dropout_backward<T: Real>(mask: Option<&DropoutMask<T>>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(upstream.clone()),
        Some(m) => {
            if m.scale.len() != upstream.len() {
                return Err(Error::mismatch("dropout mask does not match upstream"));
            }
            let data = upstream.data().iter().zip(&m.scale).map(|(&g, &s)| g * s).collect();
            Tensor::new(upstream.shape().to_vec(), data)
        }
    }
}
