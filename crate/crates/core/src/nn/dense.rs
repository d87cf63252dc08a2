use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Tensor};

fn rows_of<T: Real>(x: &Tensor<T>, f_in: usize) -> Result<usize> {
    match x.shape() {
        [f] if *f == f_in => Ok(1),
        [n, f] if *f == f_in => Ok(*n),
        s => Err(Error::mismatch(format!("dense layer expects {f_in} features, got {s:?}"))),
    }
}

fn check_params<T: Real>(weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    match weights.shape() {
        [o, i] if bias.shape() == [*o] => Ok((*o, *i)),
        s => Err(Error::mismatch(format!(
            "dense weights {s:?} with bias {:?}",
            bias.shape()
        ))),
    }
}

/// `y = W·x + b` for `x` of shape `[F_in]` or `[N, F_in]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (f_out, f_in) = check_params(weights, bias)?;
    let n = rows_of(x, f_in)?;
    let mut data: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        T::one(),
        x.data(),
        MatView::row_major(n, f_in),
        weights.data(),
        MatView::row_major(f_out, f_in).t(),
        T::one(),
        &mut data,
        MatView::row_major(n, f_out),
    );
    let shape = if x.rank() == 1 { vec![f_out] } else { vec![n, f_out] };
    Tensor::new(shape, data)
}

/// Returns `(grad_x, grad_weights, grad_bias)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (f_out, f_in) = check_params(weights, bias)?;
    let n = rows_of(x, f_in)?;
    if upstream.len() != n * f_out {
        return Err(Error::mismatch(format!(
            "upstream {:?} for dense output [{n}, {f_out}]",
            upstream.shape()
        )));
    }
    let gv = MatView::row_major(n, f_out);
    let mut gw = weights.zeros_like();
    gemm(
        T::one(),
        upstream.data(),
        gv.t(),
        x.data(),
        MatView::row_major(n, f_in),
        T::zero(),
        gw.data_mut(),
        MatView::row_major(f_out, f_in),
    );
    let mut gx = x.zeros_like();
    gemm(
        T::one(),
        upstream.data(),
        gv,
        weights.data(),
        MatView::row_major(f_out, f_in),
        T::zero(),
        gx.data_mut(),
        MatView::row_major(n, f_in),
    );
    let mut gb = bias.zeros_like();
    for row in upstream.data().chunks(f_out) {
        for (a, &g) in gb.data_mut().iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::new(vec![3], vec![1.0f32, -2.0, 3.0]).unwrap();
        let eye = Tensor::<f32>::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let zero_b = Tensor::<f32>::zeros(&[3]).unwrap();
        assert_eq!(dense_forward(&x, &eye, &zero_b).unwrap(), x);
        let zero_w = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap();
        assert_eq!(dense_forward(&x, &zero_w, &b).unwrap(), b);
    }

    #[test]
    fn matches_matrix_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = Tensor::<f64>::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let b = Tensor::<f64>::from_fn(&[3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        for n in 0..4 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for i in 0..5 {
                    acc += w.get(&[o, i]).unwrap() * x.get(&[n, i]).unwrap();
                }
                assert!((y.get(&[n, o]).unwrap() - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::<f32>::zeros(&[4]).unwrap();
        let w = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::ShapeMismatch(_))));
    }
}
