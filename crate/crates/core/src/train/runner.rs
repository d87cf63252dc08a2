use serde::{Deserialize, Serialize};

use super::config::{Monitor, TrainConfig};
use super::optim::{rmsprop_step, scale_lr, xavier_init, OptimizerState, PlateauState};
use crate::arch::NetworkSpec;
use crate::data::{balanced_batch, epoch_plan, reshuffle_train_val, BalancedSampler, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{argmax, score};
use crate::model::{Network, ParamStore};
use crate::nn::{cross_entropy_batch, Mode};
use crate::seed::{rng_for, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc,lr";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt(r.val_loss),
            opt(r.val_acc),
            opt(r.test_loss),
            opt(r.test_acc),
            r.lr
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub loss: f64,
    pub params: ParamStore<f32>,
}

/// Everything needed to continue training after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState,
    pub scheduler: PlateauState,
    /// Train/validation partition for the next epoch.
    pub split: DatasetSplit,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
}

impl TrainState {
    /// Xavier-initialized parameters and a fresh optimizer.
    pub fn initial(spec: &NetworkSpec, split: &DatasetSplit, config: &TrainConfig) -> Result<Self> {
        let mut params = Network::<f32>::new(spec.clone())?.params;
        xavier_init(&mut params, config.seed);
        let lr = if config.lr0 == 0.0 {
            0.0
        } else {
            scale_lr(config.lr0, config.eta0, config.eta)?
        };
        Ok(TrainState {
            epoch: 0,
            optimizer: OptimizerState::new(&params, lr),
            params,
            scheduler: PlateauState::new(lr),
            split: split.clone(),
            history: Vec::new(),
            best: None,
        })
    }
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (initial parameters when no epoch ran).
    pub best_params: ParamStore<f32>,
    pub best_epoch: Option<usize>,
    pub state: TrainState,
}

fn flatten(members: Vec<Vec<usize>>) -> Vec<usize> {
    members.into_iter().flatten().collect()
}

/// Run epochs `state.epoch + 1 ..= config.max_epochs`. `on_epoch` sees the
/// state after every completed epoch.
pub fn train_loop(
    spec: &NetworkSpec,
    data: &Dataset,
    split: &DatasetSplit,
    config: &TrainConfig,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let columns: Vec<&str> = data.inputs.iter().map(|r| r.column()).collect();
    if spec.input_names() != columns {
        return Err(Error::config(format!(
            "network inputs {:?} differ from dataset inputs {columns:?}",
            spec.input_names()
        )));
    }
    if spec.classes != data.task.classes().len() {
        return Err(Error::config("network class count differs from the task"));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::initial(spec, split, config)?,
    };
    let mut net = Network::<f32>::new(spec.clone())?;
    net.set_params(state.params.clone())?;
    let test = flatten(data.members(&split.test)?);
    let plateau = config.plateau();

    for epoch in state.epoch + 1..=config.max_epochs {
        let sampler = BalancedSampler::new(data.members(&state.split.train)?)?;
        let (_, iterations) = epoch_plan(sampler.subjects(), config.tau, config.eta)?;
        let lr = state.scheduler.lr;
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for it in 0..iterations {
            let stream = ((epoch as u64) << 32) | it as u64;
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} iteration {it}: {m}")),
                other => other,
            };
            let mut batch_rng = rng_for(config.seed, Role::Batch, stream);
            let batch = balanced_batch(data, &sampler, config.eta, &mut batch_rng)?;
            let mut drop_rng = rng_for(config.seed, Role::Dropout, stream);
            let pass = net.forward(&batch.inputs, Mode::Train, &mut drop_rng).map_err(context)?;
            let (loss, grad) = cross_entropy_batch(&pass.probs, &batch.targets)?;
            if !loss.is_finite() {
                return Err(context(Error::Numeric(format!("training loss is {loss}"))));
            }
            let k = batch.targets.dim(1);
            let hits = pass
                .probs
                .data()
                .chunks(k)
                .zip(&batch.labels)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
            let grads = net.backward(&pass, &grad)?;
            rmsprop_step(&mut net.params, &grads, &mut state.optimizer, lr, config.rho, config.epsilon)
                .map_err(context)?;
            loss_sum += loss;
            acc_sum += hits as f64 / batch.labels.len() as f64;
        }
        let n = iterations.max(1) as f64;
        let val_members = flatten(data.members(&state.split.validation)?);
        let val = (!val_members.is_empty()).then(|| score(&net, data, &val_members)).transpose()?;
        let tst = (!test.is_empty()).then(|| score(&net, data, &test)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: acc_sum / n,
            val_loss: val.as_ref().map(|s| s.mean_loss),
            val_acc: val.as_ref().map(|s| s.accuracy()),
            test_loss: tst.as_ref().map(|s| s.mean_loss),
            test_acc: tst.as_ref().map(|s| s.accuracy()),
            lr,
        };
        let monitored = match config.monitor {
            Monitor::Validation => record.val_loss,
            Monitor::Test => record.test_loss,
        }
        .unwrap_or(record.train_loss);
        state.scheduler.step(&plateau, monitored)?;
        let selection = record.val_loss.unwrap_or(record.train_loss);
        if state.best.as_ref().is_none_or(|b| selection < b.loss) {
            state.best = Some(BestModel {
                epoch,
                loss: selection,
                params: net.params.clone(),
            });
        }
        state.epoch = epoch;
        state.params = net.params.clone();
        state.split = reshuffle_train_val(&state.split, config.seed.wrapping_add(epoch as u64));
        state.history.push(record.clone());
        on_epoch(&state, &record)?;
    }
    let (best_params, best_epoch) = match &state.best {
        Some(b) => (b.params.clone(), Some(b.epoch)),
        None => (state.params.clone(), None),
    };
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        state,
    })
}
