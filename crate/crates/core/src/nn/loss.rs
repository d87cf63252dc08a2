use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower clamp on the target probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

fn row_softmax<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64_lossy(e / total);
    }
}

/// Max-subtracted softmax over the last axis of `[K]` or `[N, K]`.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *logits.shape().last().unwrap_or(&0);
    if logits.rank() > 2 || k < 2 {
        return Err(Error::mismatch(format!(
            "softmax expects [K] or [N, K] with K >= 2, got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut out = logits.zeros_like();
    for (row, o) in logits.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        row_softmax(row, o);
    }
    Ok(out)
}

fn target_index<T: Real>(target: &[T]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in target.iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return Err(Error::InvalidTarget);
            }
            hot = Some(i);
        } else if v != T::zero() {
            return Err(Error::InvalidTarget);
        }
    }
    hot.ok_or(Error::InvalidTarget)
}

/// Categorical cross-entropy of one prediction. Returns the loss and the
/// combined softmax + cross-entropy gradient w.r.t. the logits, `p - y`.
pub fn cross_entropy<T: Real>(probabilities: &Tensor<T>, one_hot: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if probabilities.shape() != one_hot.shape() || probabilities.rank() != 1 {
        return Err(Error::mismatch("cross-entropy expects matching [K] vectors"));
    }
    let t = target_index(one_hot.data())?;
    let loss = -probabilities.data()[t].as_f64().max(PROB_FLOOR).ln();
    let grad = Tensor::new(
        one_hot.shape().to_vec(),
        probabilities.data().iter().zip(one_hot.data()).map(|(&p, &y)| p - y).collect(),
    )?;
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch `[N, K]`; the gradient is `(p - y) / N`.
pub fn cross_entropy_batch<T: Real>(probabilities: &Tensor<T>, one_hot: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if probabilities.shape() != one_hot.shape() || probabilities.rank() != 2 {
        return Err(Error::mismatch("batched cross-entropy expects matching [N, K] tensors"));
    }
    let (n, k) = (probabilities.dim(0), probabilities.dim(1));
    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let mut total = 0.0;
    let mut grad = probabilities.zeros_like();
    for ((p, y), g) in probabilities
        .data()
        .chunks(k)
        .zip(one_hot.data().chunks(k))
        .zip(grad.data_mut().chunks_mut(k))
    {
        let t = target_index(y)?;
        total -= p[t].as_f64().max(PROB_FLOOR).ln();
        for ((gi, &pi), &yi) in g.iter_mut().zip(p).zip(y) {
            *gi = (pi - yi) * inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

/// One-hot encoding of class indices, `[N, K]`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidTarget);
    }
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::new(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(
            softmax(&Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let z = Tensor::<f32>::from_fn(&[5], |_| rng.random_range(-20.0..20.0)).unwrap();
            let c: f32 = rng.random_range(-50.0..50.0);
            let p = softmax(&z).unwrap();
            let q = softmax(&z.map(|v| v + c)).unwrap();
            assert!(p.max_abs_diff(&q) < 1e-6);
            assert!((p.sum_f64() - 1.0).abs() < 1e-6);
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Tensor::full(&[3], 1.0f64 / 3.0).unwrap();
        let y = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&p, &y).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let (loss, g) = cross_entropy(&y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::new(vec![3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(cross_entropy(&p, &bad), Err(Error::InvalidTarget)));
        let zero_p = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&zero_p, &y).unwrap().0.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let z = Tensor::<f64>::from_fn(&[4], |_| rng.random_range(-3.0..3.0)).unwrap();
            let y = one_hot::<f64>(&[rng.random_range(0..4)], 4).unwrap().reshape(&[4]).unwrap();
            let (_, g) = cross_entropy(&softmax(&z).unwrap(), &y).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let mut zp = z.clone();
                zp.data_mut()[i] += h;
                let mut zm = z.clone();
                zm.data_mut()[i] -= h;
                let lp = cross_entropy(&softmax(&zp).unwrap(), &y).unwrap().0;
                let lm = cross_entropy(&softmax(&zm).unwrap(), &y).unwrap().0;
                assert!(((lp - lm) / (2.0 * h) - g.data()[i]).abs() < 1e-6);
            }
        }
    }
}
