//! Central finite-difference checks of every layer's backward pass and of a
//! small two-pipeline network.
//!
//! Analytic gradients are computed at precision `A`, numeric ones at
//! precision `N`; the loss is always accumulated in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_conv_block, build_inception_block, BlockSpec, NetworkSpec, PipelineSpec};
use crate::error::Result;
use crate::model::{Network, ParamRole, ParamStore};
use crate::nn::{self, BatchNormState, Mode, Padding};
use crate::tensor::{Real, Tensor};
use crate::train::xavier_init;

/// Outcome for one tensor of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub case: String,
    pub tensor: String,
    pub rel_error: f64,
}

/// `max|a − n| / max(‖a‖∞, ‖n‖∞)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-300 {
        return 0.0;
    }
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Central differences of `f` with respect to every entry of `x`. The step
/// actually taken is measured after rounding to `T`.
pub fn numeric_gradient<T: Real>(
    x: &Tensor<T>,
    h: f64,
    f: impl FnMut(&Tensor<T>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..x.len()).collect();
    numeric_gradient_at(x, &all, h, f)
}

/// Central differences at the listed flat indices only.
pub fn numeric_gradient_at<T: Real>(
    x: &Tensor<T>,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let v = x.data()[i];
        let up = T::from_f64_lossy(v.as_f64() + h);
        let down = T::from_f64_lossy(v.as_f64() - h);
        probe.data_mut()[i] = up;
        let fp = f(&probe)?;
        probe.data_mut()[i] = down;
        let fm = f(&probe)?;
        probe.data_mut()[i] = v;
        out.push((fp - fm) / (up.as_f64() - down.as_f64()));
    }
    Ok(out)
}

/// Loss `Σ r·y`, whose gradient w.r.t. `y` is `r`.
fn project<T: Real>(y: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b).sum()
}

fn as_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

/// Values bounded away from zero by `gap`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

/// Distinct values spaced `step` apart, in random order.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize], step: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("valid shape")
}

fn record(case: &str, tensor: &str, analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    GradCheck {
        case: case.to_string(),
        tensor: tensor.to_string(),
        rel_error: relative_error(&analytic, &numeric),
    }
}

fn conv_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let padding = [Padding::Same, Padding::Valid][rng.random_range(0..2)];
    let s = rng.random_range(4..7);
    let x = uniform(&mut rng, &[2, ci, s, s, s], -1.0, 1.0);
    let w = uniform(&mut rng, &[co, ci, k, k, k], -1.0, 1.0);
    let b = uniform(&mut rng, &[co], -1.0, 1.0);
    let y = nn::conv3d_forward(&x, &w, &b, padding, stride)?;
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let (gx, g) = nn::conv3d_backward(&x.cast::<A>(), &w.cast(), &b.cast(), padding, stride, &r.cast())?;
    let (xn, wn, bn) = (x.cast::<N>(), w.cast::<N>(), b.cast::<N>());
    let f = |x: &Tensor<N>, w: &Tensor<N>, b: &Tensor<N>| -> Result<f64> {
        Ok(project(&nn::conv3d_forward(x, w, b, padding, stride)?, &r))
    };
    let case = format!("conv3d k{k} s{stride} {padding:?} {ci}->{co}");
    Ok(vec![
        record(&case, "input", as_f64(&gx), numeric_gradient(&xn, h, |t| f(t, &wn, &bn))?),
        record(&case, "weights", as_f64(&g.weights), numeric_gradient(&wn, h, |t| f(&xn, t, &bn))?),
        record(&case, "bias", as_f64(&g.bias), numeric_gradient(&bn, h, |t| f(&xn, &wn, t))?),
    ])
}

fn batchnorm_case<A: Real, N: Real>(seed: u64, h: f64, mode: Mode) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..4);
    let x = uniform(&mut rng, &[3, c, 2, 3, 2], -2.0, 3.0);
    let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
    let beta = uniform(&mut rng, &[c], -0.5, 0.5);
    let rm = uniform(&mut rng, &[c], -0.5, 0.5);
    let rv = uniform(&mut rng, &[c], 0.5, 2.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    fn run<T: Real>(
        x: &Tensor<T>,
        g: &Tensor<T>,
        b: &Tensor<T>,
        rm: &Tensor<f64>,
        rv: &Tensor<f64>,
        mode: Mode,
    ) -> Result<(Tensor<T>, nn::BatchNormCache<T>)> {
        let (mut m, mut v) = (rm.cast::<T>(), rv.cast::<T>());
        let state = BatchNormState {
            gamma: g,
            beta: b,
            running_mean: &mut m,
            running_var: &mut v,
        };
        nn::batchnorm3d_forward(x, state, mode, nn::BN_MOMENTUM, nn::BN_EPSILON)
    }
    let ga = gamma.cast::<A>();
    let (_, cache) = run(&x.cast::<A>(), &ga, &beta.cast(), &rm, &rv, mode)?;
    let (gx, gg, gb) = nn::batchnorm3d_backward(&cache, &ga, &r.cast())?;
    let (xn, gn, bn) = (x.cast::<N>(), gamma.cast::<N>(), beta.cast::<N>());
    let f = |x: &Tensor<N>, g: &Tensor<N>, b: &Tensor<N>| -> Result<f64> {
        Ok(project(&run(x, g, b, &rm, &rv, mode)?.0, &r))
    };
    let case = format!("batchnorm3d {mode:?}");
    Ok(vec![
        record(&case, "input", as_f64(&gx), numeric_gradient(&xn, h, |t| f(t, &gn, &bn))?),
        record(&case, "gamma", as_f64(&gg), numeric_gradient(&gn, h, |t| f(&xn, t, &bn))?),
        record(&case, "beta", as_f64(&gb), numeric_gradient(&bn, h, |t| f(&xn, &gn, t))?),
    ])
}

fn relu_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, &[2, 3, 3, 3, 3], 0.05);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let gx = nn::relu_backward(&x.cast::<A>(), &r.cast())?;
    let num = numeric_gradient(&x.cast::<N>(), h, |t| Ok(project(&nn::relu(t), &r)))?;
    Ok(vec![record("relu", "input", as_f64(&gx), num)])
}

fn maxpool_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pool, stride, padding) = [(3, 2, Padding::Same), (3, 1, Padding::Same), (2, 2, Padding::Valid)][rng.random_range(0..3)];
    let s = rng.random_range(4..7);
    let x = well_separated(&mut rng, &[2, 2, s, s, s], 0.01);
    let (y, cache) = nn::maxpool3d_forward(&x.cast::<A>(), pool, stride, padding)?;
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let gx = nn::maxpool3d_backward(&cache, &r.cast::<A>())?;
    let num = numeric_gradient(&x.cast::<N>(), h, |t| {
        Ok(project(&nn::maxpool3d_forward(t, pool, stride, padding)?.0, &r))
    })?;
    Ok(vec![record(&format!("maxpool3d p{pool} s{stride} {padding:?}"), "input", as_f64(&gx), num)])
}

fn avgpool_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 3, 3, 4, 2], -1.0, 1.0);
    let r = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let gx = nn::avgpool3d_global_backward(x.shape(), &r.cast::<A>())?;
    let num = numeric_gradient(&x.cast::<N>(), h, |t| Ok(project(&nn::avgpool3d_global_forward(t)?, &r)))?;
    Ok(vec![record("global_avgpool3d", "input", as_f64(&gx), num)])
}

fn dense_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fi, fo) = (rng.random_range(1..8), rng.random_range(1..6));
    let x = uniform(&mut rng, &[3, fi], -1.0, 1.0);
    let w = uniform(&mut rng, &[fo, fi], -1.0, 1.0);
    let b = uniform(&mut rng, &[fo], -1.0, 1.0);
    let r = uniform(&mut rng, &[3, fo], -1.0, 1.0);
    let (gx, gw, gb) = nn::dense_backward(&x.cast::<A>(), &w.cast(), &b.cast(), &r.cast())?;
    let (xn, wn, bn) = (x.cast::<N>(), w.cast::<N>(), b.cast::<N>());
    let f = |x: &Tensor<N>, w: &Tensor<N>, b: &Tensor<N>| -> Result<f64> { Ok(project(&nn::dense_forward(x, w, b)?, &r)) };
    let case = format!("dense {fi}->{fo}");
    Ok(vec![
        record(&case, "input", as_f64(&gx), numeric_gradient(&xn, h, |t| f(t, &wn, &bn))?),
        record(&case, "weights", as_f64(&gw), numeric_gradient(&wn, h, |t| f(&xn, t, &bn))?),
        record(&case, "bias", as_f64(&gb), numeric_gradient(&bn, h, |t| f(&xn, &wn, t))?),
    ])
}

fn dropout_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let keep = rng.random_range(0.3..1.0);
    let mask_seed: u64 = rng.random();
    let (_, mask) = nn::dropout(&x.cast::<A>(), keep, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    let gx = nn::dropout_backward(mask.as_ref(), &r.cast::<A>())?;
    let num = numeric_gradient(&x.cast::<N>(), h, |t| {
        let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
        Ok(project(&nn::dropout(t, keep, Mode::Train, &mut m)?.0, &r))
    })?;
    Ok(vec![record("dropout", "input", as_f64(&gx), num)])
}

fn softmax_ce_case<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..5));
    let z = uniform(&mut rng, &[n, k], -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let y = nn::one_hot::<f64>(&labels, k)?;
    let (_, g) = nn::cross_entropy_batch(&nn::softmax(&z.cast::<A>())?, &y.cast())?;
    let yn = y.cast::<N>();
    let num = numeric_gradient(&z.cast::<N>(), h, |t| Ok(nn::cross_entropy_batch(&nn::softmax(t)?, &yn)?.0))?;
    Ok(vec![record("softmax+cross_entropy", "logits", as_f64(&g), num)])
}

/// Every layer kind once for `seed`.
pub fn layer_checks<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    out.extend(conv_case::<A, N>(seed, h)?);
    out.extend(batchnorm_case::<A, N>(seed, h, Mode::Train)?);
    out.extend(batchnorm_case::<A, N>(seed, h, Mode::Infer)?);
    out.extend(relu_case::<A, N>(seed, h)?);
    out.extend(maxpool_case::<A, N>(seed, h)?);
    out.extend(avgpool_case::<A, N>(seed, h)?);
    out.extend(dense_case::<A, N>(seed, h)?);
    out.extend(dropout_case::<A, N>(seed, h)?);
    out.extend(softmax_ce_case::<A, N>(seed, h)?);
    Ok(out)
}

/// Two pipelines on `[1, 5, 5, 5]`: conv block, inception block, max-pool,
/// global average pool; fused by concat, dropout and a dense layer.
pub fn tiny_network_spec() -> Result<NetworkSpec> {
    let blocks = vec![
        build_conv_block(3, 1, 4)?,
        build_inception_block(4)?,
        BlockSpec::MaxPool {
            pool: 3,
            stride: 2,
            padding: Padding::Same,
        },
        BlockSpec::GlobalAvgPool,
    ];
    let pipelines = ["a", "b"]
        .iter()
        .map(|n| PipelineSpec {
            input: n.to_string(),
            blocks: blocks.clone(),
        })
        .collect();
    NetworkSpec::new(
        "tiny",
        [1, 5, 5, 5],
        pipelines,
        vec![
            BlockSpec::Concat,
            BlockSpec::Dropout { keep_prob: 0.7 },
            BlockSpec::Dense { inputs: 12, outputs: 3 },
            BlockSpec::Softmax,
        ],
        3,
    )
}

/// Convolution biases are followed by batch-norm, which cancels them: their
/// true gradient is zero, so they are measured against the largest gradient
/// entry of the whole network instead of their own magnitude.
fn ahead_of_batchnorm(name: &str) -> bool {
    name.ends_with(".conv.b")
}

/// Coordinates probed per parameter tensor of the tiny network.
pub const NETWORK_PROBES: usize = 6;

fn network_loss<T: Real>(
    net: &mut Network<T>,
    inputs: &[Tensor<f64>],
    targets: &Tensor<f64>,
    drop_seed: u64,
) -> Result<(f64, crate::model::ForwardPass<T>, Tensor<T>)> {
    let xs: Vec<Tensor<T>> = inputs.iter().map(|x| x.cast()).collect();
    let pass = net.forward(&xs, Mode::Train, &mut ChaCha8Rng::seed_from_u64(drop_seed))?;
    let (l, g) = nn::cross_entropy_batch(&pass.probs, &targets.cast())?;
    Ok((l, pass, g))
}

/// Cross-entropy of the tiny network against every trainable tensor, probed
/// at up to [`NETWORK_PROBES`] random coordinates per tensor.
pub fn network_check<A: Real, N: Real>(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let spec = tiny_network_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Network::<f64>::new(spec.clone())?.params;
    xavier_init(&mut base, seed);
    for p in base.iter_mut() {
        let range = match p.role {
            ParamRole::Gamma => 0.5..1.5,
            ParamRole::Beta | ParamRole::Bias => -0.3..0.3,
            _ => continue,
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
    }
    let batch = 3;
    let inputs: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, &[batch, 1, 5, 5, 5], -1.0, 1.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let targets = nn::one_hot::<f64>(&labels, 3)?;
    let drop_seed: u64 = rng.random();

    let mut net_a = Network::<A>::new(spec.clone())?;
    net_a.set_params(base.cast())?;
    let (_, pass, g) = network_loss(&mut net_a, &inputs, &targets, drop_seed)?;
    let analytic = net_a.backward(&pass, &g)?;

    let mut net_n = Network::<N>::new(spec)?;
    net_n.set_params(base.cast())?;
    let scale = (0..base.len())
        .filter(|&i| base.get(i).role.trainable())
        .flat_map(|i| analytic.grads[i].data().iter().map(|v| v.as_f64().abs()))
        .fold(0.0f64, f64::max);
    let mut out = Vec::new();
    for i in 0..base.len() {
        let param = base.get(i);
        if !param.role.trainable() {
            continue;
        }
        let mut idx: Vec<usize> = (0..param.value.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(NETWORK_PROBES);
        let value: Tensor<N> = param.value.cast();
        let fresh: ParamStore<N> = base.cast();
        let num = numeric_gradient_at(&value, &idx, h, |t| {
            let mut p = fresh.clone();
            p.get_mut(i).value = t.clone();
            net_n.set_params(p)?;
            Ok(network_loss(&mut net_n, &inputs, &targets, drop_seed)?.0)
        })?;
        let ana: Vec<f64> = idx.iter().map(|&j| analytic.grads[i].data()[j].as_f64()).collect();
        if ahead_of_batchnorm(&param.name) {
            let diff = ana.iter().zip(&num).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            out.push(GradCheck {
                case: "tiny network (vanishing)".to_string(),
                tensor: param.name.clone(),
                rel_error: if scale > 0.0 { diff / scale } else { diff },
            });
        } else {
            out.push(record("tiny network", &param.name, ana, num));
        }
    }
    Ok(out)
}

/// Largest error in a set of checks.
pub fn worst(checks: &[GradCheck]) -> Option<&GradCheck> {
    checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}
