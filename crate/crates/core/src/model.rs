//! Parameter storage and the graph executor that runs a [`NetworkSpec`]
//! forward and backward over batches.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::arch::{BlockSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormCache, BatchNormState, DropoutMask, MaxPoolCache, Mode, Padding};
use crate::tensor::{Real, Tensor};

/// What a stored tensor is for; decides initialization and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ParamRole {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// Every tensor a network owns, trainable or not, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    fn push(&mut self, name: String, role: ParamRole, shape: &[usize]) -> Result<usize> {
        let fill = match role {
            ParamRole::Gamma | ParamRole::RunningVar => T::one(),
            _ => T::zero(),
        };
        self.entries.push(Param {
            name,
            role,
            value: Tensor::full(shape, fill)?,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.entries[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.entries[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Same names, roles and shapes.
    pub fn congruent<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.value.shape() == b.value.shape())
    }

    fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }
}

/// One gradient per stored tensor (zeros for running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<T: Real> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    fn zeros_for(store: &ParamStore<T>) -> Self {
        GradStore {
            grads: store.entries.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    fn accumulate(&mut self, index: usize, g: &Tensor<T>) -> Result<()> {
        self.grads[index].add_assign(g)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}

// ---------------------------------------------------------------------------
// runtime graph

#[derive(Debug, Clone)]
struct ConvUnit {
    kernel: usize,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
enum Unit {
    Conv(ConvUnit),
    Inception { bands: Vec<Vec<Unit>>, widths: Vec<usize> },
    MaxPool { pool: usize, stride: usize, padding: Padding },
    GlobalAvg,
    Flatten,
}

#[derive(Debug, Clone)]
enum TailUnit {
    Dropout(f64),
    Dense { weight: usize, bias: usize },
    Relu,
}

enum UnitCache<T: Real> {
    Conv(BatchNormCache<T>),
    Inception(Vec<SeqTape<T>>),
    MaxPool(MaxPoolCache),
    None,
}

/// Outputs and caches of a unit sequence; `acts[i]` is the output of unit `i`.
struct SeqTape<T: Real> {
    acts: Vec<Tensor<T>>,
    caches: Vec<UnitCache<T>>,
}

impl<T: Real> SeqTape<T> {
    fn output<'a>(&'a self, input: &'a Tensor<T>) -> &'a Tensor<T> {
        self.acts.last().unwrap_or(input)
    }
}

enum TailCache<T: Real> {
    Dropout(Option<DropoutMask<T>>),
    None,
}

/// Running-statistic updates collected during a train-mode forward pass.
type StatUpdates<T> = Vec<(usize, Tensor<T>)>;

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Unit> {
        let k3 = kernel * kernel * kernel;
        let s = &mut self.store;
        Ok(Unit::Conv(ConvUnit {
            kernel,
            weight: s.push(
                format!("{prefix}.conv.w"),
                ParamRole::Weight {
                    fan_in: c_in * k3,
                    fan_out: c_out * k3,
                },
                &[c_out, c_in, kernel, kernel, kernel],
            )?,
            bias: s.push(format!("{prefix}.conv.b"), ParamRole::Bias, &[c_out])?,
            gamma: s.push(format!("{prefix}.bn.gamma"), ParamRole::Gamma, &[c_out])?,
            beta: s.push(format!("{prefix}.bn.beta"), ParamRole::Beta, &[c_out])?,
            mean: s.push(format!("{prefix}.bn.running_mean"), ParamRole::RunningMean, &[c_out])?,
            var: s.push(format!("{prefix}.bn.running_var"), ParamRole::RunningVar, &[c_out])?,
        }))
    }

    fn block(&mut self, prefix: &str, block: &BlockSpec) -> Result<Unit> {
        Ok(match *block {
            BlockSpec::ConvBlock {
                kernel,
                in_channels,
                filters,
            } => self.conv(prefix, in_channels, filters, kernel)?,
            BlockSpec::InceptionBlock {
                in_channels: n,
                bottleneck: b,
                band_widths: [w1, w2, w3, w4],
            } => {
                let band1 = vec![
                    self.conv(&format!("{prefix}/band1.0"), n, b, 1)?,
                    self.conv(&format!("{prefix}/band1.1"), b, w1, 3)?,
                    self.conv(&format!("{prefix}/band1.2"), w1, w1, 3)?,
                ];
                let band2 = vec![
                    self.conv(&format!("{prefix}/band2.0"), n, b, 1)?,
                    self.conv(&format!("{prefix}/band2.1"), b, w2, 3)?,
                ];
                let band3 = vec![
                    Unit::MaxPool {
                        pool: 3,
                        stride: 1,
                        padding: Padding::Same,
                    },
                    self.conv(&format!("{prefix}/band3.1"), n, w3, 1)?,
                ];
                let band4 = vec![self.conv(&format!("{prefix}/band4.0"), n, w4, 1)?];
                Unit::Inception {
                    bands: vec![band1, band2, band3, band4],
                    widths: vec![w1, w2, w3, w4],
                }
            }
            BlockSpec::MaxPool {
                pool,
                stride,
                padding,
            } => Unit::MaxPool {
                pool,
                stride,
                padding,
            },
            BlockSpec::GlobalAvgPool => Unit::GlobalAvg,
            BlockSpec::Flatten => Unit::Flatten,
            ref other => {
                return Err(Error::config(format!(
                    "{} cannot appear inside a pipeline",
                    other.kind()
                )))
            }
        })
    }
}

impl Unit {
    fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        bn: (f64, f64),
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, UnitCache<T>)> {
        match self {
            Unit::Conv(c) => {
                let y = nn::conv3d_forward(x, params.value(c.weight), params.value(c.bias), Padding::Same, 1)?;
                let mut mean = params.value(c.mean).clone();
                let mut var = params.value(c.var).clone();
                let (mut z, cache) = nn::batchnorm3d_forward(
                    &y,
                    BatchNormState {
                        gamma: params.value(c.gamma),
                        beta: params.value(c.beta),
                        running_mean: &mut mean,
                        running_var: &mut var,
                    },
                    mode,
                    bn.0,
                    bn.1,
                )?;
                if mode == Mode::Train {
                    updates.push((c.mean, mean));
                    updates.push((c.var, var));
                }
                for v in z.data_mut() {
                    *v = v.max(T::zero());
                }
                Ok((z, UnitCache::Conv(cache)))
            }
            Unit::Inception { bands, .. } => {
                let tapes = bands
                    .iter()
                    .map(|band| run_sequence(band, params, x, mode, bn, updates))
                    .collect::<Result<Vec<_>>>()?;
                let outs: Vec<&Tensor<T>> = tapes.iter().map(|t| t.output(x)).collect();
                Ok((Tensor::concat(&outs, 1)?, UnitCache::Inception(tapes)))
            }
            Unit::MaxPool {
                pool,
                stride,
                padding,
            } => {
                let (y, cache) = nn::maxpool3d_forward(x, *pool, *stride, *padding)?;
                Ok((y, UnitCache::MaxPool(cache)))
            }
            Unit::GlobalAvg => Ok((nn::avgpool3d_global_forward(x)?, UnitCache::None)),
            Unit::Flatten => {
                let n = x.dim(0);
                let f = x.len() / n;
                Ok((x.clone().reshape(&[n, f])?, UnitCache::None))
            }
        }
    }

    fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        input: &Tensor<T>,
        output: &Tensor<T>,
        cache: &UnitCache<T>,
        upstream: Tensor<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Unit::Conv(c), UnitCache::Conv(bn_cache)) => {
                let mut g = upstream;
                for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                let (g_conv, g_gamma, g_beta) = nn::batchnorm3d_backward(bn_cache, params.value(c.gamma), &g)?;
                drop(g);
                let (gx, cg) = nn::conv3d_backward(
                    input,
                    params.value(c.weight),
                    params.value(c.bias),
                    Padding::Same,
                    1,
                    &g_conv,
                )?;
                grads.accumulate(c.weight, &cg.weights)?;
                grads.accumulate(c.bias, &cg.bias)?;
                grads.accumulate(c.gamma, &g_gamma)?;
                grads.accumulate(c.beta, &g_beta)?;
                debug_assert_eq!(c.kernel, params.value(c.weight).dim(2));
                Ok(gx)
            }
            (Unit::Inception { bands, widths }, UnitCache::Inception(tapes)) => {
                let pieces = upstream.split(1, widths)?;
                let mut gx = input.zeros_like();
                for ((band, tape), g) in bands.iter().zip(tapes).zip(pieces) {
                    gx.add_assign(&backward_sequence(band, params, grads, input, tape, g)?)?;
                }
                Ok(gx)
            }
            (Unit::MaxPool { .. }, UnitCache::MaxPool(cache)) => nn::maxpool3d_backward(cache, &upstream),
            (Unit::GlobalAvg, _) => nn::avgpool3d_global_backward(input.shape(), &upstream),
            (Unit::Flatten, _) => upstream.reshape(input.shape()),
            _ => Err(Error::mismatch("cache does not belong to this unit")),
        }
    }
}

fn run_sequence<T: Real>(
    units: &[Unit],
    params: &ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
    bn: (f64, f64),
    updates: &mut StatUpdates<T>,
) -> Result<SeqTape<T>> {
    let mut tape = SeqTape {
        acts: Vec::with_capacity(units.len()),
        caches: Vec::with_capacity(units.len()),
    };
    for unit in units {
        let x = tape.acts.last().unwrap_or(input);
        let (y, cache) = unit.forward(params, x, mode, bn, updates)?;
        tape.acts.push(y);
        tape.caches.push(cache);
    }
    Ok(tape)
}

fn backward_sequence<T: Real>(
    units: &[Unit],
    params: &ParamStore<T>,
    grads: &mut GradStore<T>,
    input: &Tensor<T>,
    tape: &SeqTape<T>,
    upstream: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = upstream;
    for i in (0..units.len()).rev() {
        let x = if i == 0 { input } else { &tape.acts[i - 1] };
        g = units[i].backward(params, grads, x, &tape.acts[i], &tape.caches[i], g)?;
    }
    Ok(g)
}

/// Everything a backward pass needs from one forward pass.
pub struct ForwardPass<T: Real> {
    pub mode: Mode,
    inputs: Vec<Tensor<T>>,
    pipelines: Vec<SeqTape<T>>,
    features: Tensor<T>,
    tail_acts: Vec<Tensor<T>>,
    tail_caches: Vec<TailCache<T>>,
    /// Pre-softmax scores `[N, K]`.
    pub logits: Tensor<T>,
    /// Class probabilities `[N, K]`.
    pub probs: Tensor<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Per-pipeline feature widths of the fused vector.
    pub fn feature_widths(&self) -> Vec<usize> {
        self.pipelines
            .iter()
            .zip(&self.inputs)
            .map(|(t, x)| t.output(x).dim(1))
            .collect()
    }
}

/// An executable network: its description, runtime graph and parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    pipelines: Vec<Vec<Unit>>,
    tail: Vec<TailUnit>,
    pub params: ParamStore<T>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl<T: Real> Network<T> {
    /// Instantiate with zero weights and biases, unit gamma and unit running variance.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore { entries: vec![] };
        let mut builder = Builder { store: &mut store };
        let mut pipelines = Vec::new();
        for p in &spec.pipelines {
            let units = p
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| builder.block(&format!("{}/{}{i}", p.input, b.kind()), b))
                .collect::<Result<Vec<_>>>()?;
            pipelines.push(units);
        }
        let mut tail = Vec::new();
        for (i, block) in spec.tail.iter().enumerate() {
            match *block {
                BlockSpec::Concat | BlockSpec::Softmax => {}
                BlockSpec::Dropout { keep_prob } => tail.push(TailUnit::Dropout(keep_prob)),
                BlockSpec::Relu => tail.push(TailUnit::Relu),
                BlockSpec::Dense { inputs, outputs } => {
                    let weight = store.push(
                        format!("fusion/dense{i}.w"),
                        ParamRole::Weight {
                            fan_in: inputs,
                            fan_out: outputs,
                        },
                        &[outputs, inputs],
                    )?;
                    let bias = store.push(format!("fusion/dense{i}.b"), ParamRole::Bias, &[outputs])?;
                    tail.push(TailUnit::Dense { weight, bias });
                }
                ref other => {
                    return Err(Error::config(format!("{} cannot appear in the tail", other.kind())))
                }
            }
        }
        Ok(Network {
            spec,
            pipelines,
            tail,
            params: store,
            bn_momentum: nn::BN_MOMENTUM,
            bn_epsilon: nn::BN_EPSILON,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Replace the parameters with a congruent store.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if !self.params.congruent(&params) {
            return Err(Error::Format(format!(
                "parameter store does not match network {:?}",
                self.spec.name
            )));
        }
        self.params = params;
        Ok(())
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<usize> {
        if inputs.len() != self.pipelines.len() {
            return Err(Error::mismatch(format!(
                "{} inputs for {} pipelines",
                inputs.len(),
                self.pipelines.len()
            )));
        }
        let n = inputs[0].shape().first().copied().unwrap_or(0);
        for x in inputs {
            if x.rank() != 5 || x.dim(0) != n || x.shape()[1..] != self.spec.input_shape {
                return Err(Error::mismatch(format!(
                    "pipeline input {:?} does not match [{n}, {:?}]",
                    x.shape(),
                    self.spec.input_shape
                )));
            }
        }
        Ok(n)
    }

    fn run(
        &self,
        inputs: &[Tensor<T>],
        mode: Mode,
        rng: &mut dyn RngCore,
        updates: &mut StatUpdates<T>,
    ) -> Result<ForwardPass<T>> {
        self.check_inputs(inputs)?;
        let bn = (self.bn_momentum, self.bn_epsilon);
        let tapes = self
            .pipelines
            .iter()
            .zip(inputs)
            .map(|(units, x)| run_sequence(units, &self.params, x, mode, bn, updates))
            .collect::<Result<Vec<_>>>()?;
        let outs: Vec<&Tensor<T>> = tapes.iter().zip(inputs).map(|(t, x)| t.output(x)).collect();
        let features = Tensor::concat(&outs, 1)?;
        let mut tail_acts: Vec<Tensor<T>> = Vec::new();
        let mut tail_caches = Vec::new();
        for unit in &self.tail {
            let x = tail_acts.last().unwrap_or(&features);
            let (y, cache) = match unit {
                TailUnit::Dropout(keep) => {
                    let (y, mask) = nn::dropout(x, *keep, mode, rng)?;
                    (y, TailCache::Dropout(mask))
                }
                TailUnit::Dense { weight, bias } => (
                    nn::dense_forward(x, self.params.value(*weight), self.params.value(*bias))?,
                    TailCache::None,
                ),
                TailUnit::Relu => (nn::relu(x), TailCache::None),
            };
            tail_acts.push(y);
            tail_caches.push(cache);
        }
        let logits = tail_acts.last().unwrap_or(&features).clone();
        let probs = nn::softmax(&logits)?;
        Ok(ForwardPass {
            mode,
            inputs: inputs.to_vec(),
            pipelines: tapes,
            features,
            tail_acts,
            tail_caches,
            logits,
            probs,
        })
    }

    /// Batched forward pass over `[N, C, D, H, W]` inputs, one per pipeline.
    /// Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, inputs: &[Tensor<T>], mode: Mode, rng: &mut dyn RngCore) -> Result<ForwardPass<T>> {
        let mut updates = Vec::new();
        let pass = self.run(inputs, mode, rng, &mut updates)?;
        for (i, t) in updates {
            self.params.entries[i].value = t;
        }
        Ok(pass)
    }

    /// Inference-mode forward; never touches the parameters.
    pub fn infer(&self, inputs: &[Tensor<T>]) -> Result<ForwardPass<T>> {
        let mut updates = Vec::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.run(inputs, Mode::Infer, &mut rng, &mut updates)
    }

    /// Class probabilities `[K]` for a single subject given `[C, D, H, W]` inputs.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let batched = inputs
            .iter()
            .map(|x| {
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                x.clone().reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let probs = self.infer(&batched)?.probs;
        let k = probs.len();
        probs.reshape(&[k])
    }

    /// Gradients of the loss given its gradient w.r.t. the logits.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<GradStore<T>> {
        if pass.mode != Mode::Train {
            return Err(Error::InvalidMode);
        }
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::mismatch("logit gradient shape differs from logits"));
        }
        let mut grads = GradStore::zeros_for(&self.params);
        let mut g = grad_logits.clone();
        for i in (0..self.tail.len()).rev() {
            let x = if i == 0 { &pass.features } else { &pass.tail_acts[i - 1] };
            g = match (&self.tail[i], &pass.tail_caches[i]) {
                (TailUnit::Dropout(_), TailCache::Dropout(mask)) => nn::dropout_backward(mask.as_ref(), &g)?,
                (TailUnit::Dense { weight, bias }, _) => {
                    let (gx, gw, gb) =
                        nn::dense_backward(x, self.params.value(*weight), self.params.value(*bias), &g)?;
                    grads.accumulate(*weight, &gw)?;
                    grads.accumulate(*bias, &gb)?;
                    gx
                }
                (TailUnit::Relu, _) => nn::relu_backward(x, &g)?,
                _ => return Err(Error::mismatch("tail cache mismatch")),
            };
        }
        let pieces = g.split(1, &pass.feature_widths())?;
        for (((units, tape), x), gp) in self.pipelines.iter().zip(&pass.pipelines).zip(&pass.inputs).zip(pieces) {
            backward_sequence(units, &self.params, &mut grads, x, tape, gp)?;
        }
        Ok(grads)
    }
}
