//! Training loop with a one-time learning-rate reduction and early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dosimetry::{Dataset, Split, TissueClass};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::{Mode, Network};
use crate::optim::{apply_regularization, Optimizer};
use crate::tensor::Tensor;
use crate::unet::checkpoint::{norm_array, Checkpoint};
use crate::unet::config::TrainConfig;
use crate::unet::eval::{evaluate_predictions, predict_all};
use crate::unet::{build_unet, UNetSpec};

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,train_loss,val_loss,train_iou,val_iou,train_mae,val_mae,train_mse,val_mse";

/// Metrics after an epoch, both sets evaluated in inference mode. Epoch 0 is the
/// untrained network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_iou: f64,
    pub val_iou: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_loss,
            self.train_iou,
            self.val_iou,
            self.train_mae,
            self.val_mae,
            self.train_mse,
            self.val_mse
        )
    }
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauAction {
    Continue,
    ReduceLr,
    Stop,
}

/// Watches the validation loss. After `patience` epochs without an improvement of at
/// least `min_delta` it asks for one learning-rate reduction; afterwards the same rule
/// with the early-stop settings ends training.
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    min_delta: f64,
    stop_patience: usize,
    stop_min_delta: f64,
    best: f64,
    wait: usize,
    reduced: bool,
}

impl Plateau {
    pub fn new(patience: usize, min_delta: f64, stop_patience: usize, stop_min_delta: f64) -> Self {
        Plateau {
            patience,
            min_delta,
            stop_patience,
            stop_min_delta,
            best: f64::INFINITY,
            wait: 0,
            reduced: false,
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.patience, c.min_delta, c.early_stop_patience, c.early_stop_min_delta)
    }

    pub fn reduced(&self) -> bool {
        self.reduced
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauAction {
        let delta = if self.reduced { self.stop_min_delta } else { self.min_delta };
        if self.best - val_loss >= delta || (self.best.is_infinite() && val_loss.is_finite()) {
            self.best = val_loss;
            self.wait = 0;
            return PlateauAction::Continue;
        }
        self.wait += 1;
        if !self.reduced && self.wait >= self.patience {
            self.reduced = true;
            self.wait = 0;
            PlateauAction::ReduceLr
        } else if self.reduced && self.wait >= self.stop_patience {
            PlateauAction::Stop
        } else {
            PlateauAction::Continue
        }
    }
}

/// One optimizer step on a batch; returns the data loss before the update.
pub fn train_step(net: &mut Network, opt: &mut Optimizer, x: &Tensor, target: &Tensor, loss: LossKind) -> Result<f64> {
    net.set_mode(Mode::Train);
    let (y, trace) = net.forward(x)?;
    let l = loss.evaluate(&y, target)?;
    if !l.value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss is {}", loss, l.value)));
    }
    net.zero_grads();
    net.backward(trace, l.grad())?;
    for p in net.params_mut() {
        apply_regularization(p.grad.data_mut(), p.value.data(), p.reg)?;
    }
    opt.step(net.params_mut())?;
    Ok(l.value)
}

type Pairs = [(Tensor, Tensor, TissueClass)];

/// `(loss, iou, mae, mse)` over a whole set in inference mode.
fn score(net: &mut Network, set: &Pairs, loss: LossKind, batch: usize) -> Result<(f64, f64, f64, f64)> {
    let inputs: Vec<&Tensor> = set.iter().map(|s| &s.0).collect();
    let preds = predict_all(net, &inputs, batch)?;
    let targets: Vec<Tensor> = set.iter().map(|s| s.1.clone()).collect();
    let classes: Vec<TissueClass> = set.iter().map(|s| s.2).collect();
    let l = loss.evaluate(&Tensor::stack(&preds)?, &Tensor::stack(&targets)?)?.value;
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("evaluation {loss} loss is {l}")));
    }
    let m = evaluate_predictions(&preds, &targets, &classes)?.total;
    Ok((l, m.iou, m.mae, m.mse))
}

fn record(net: &mut Network, train: &Pairs, val: &Pairs, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<EpochRecord> {
    let (tl, ti, ta, ts) = score(net, train, cfg.loss, cfg.batch_size)?;
    let (vl, vi, va, vs) = score(net, val, cfg.loss, cfg.batch_size)?;
    Ok(EpochRecord {
        epoch,
        lr,
        train_loss: tl,
        val_loss: vl,
        train_iou: ti,
        val_iou: vi,
        train_mae: ta,
        val_mae: va,
        train_mse: ts,
        val_mse: vs,
    })
}

fn batch_of(set: &Pairs, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let x: Vec<Tensor> = idx.iter().map(|&i| set[i].0.clone()).collect();
    let t: Vec<Tensor> = idx.iter().map(|&i| set[i].1.clone()).collect();
    Ok((Tensor::stack(&x)?, Tensor::stack(&t)?))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Snapshot with the lowest validation loss.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub lr_reduced_at: Option<usize>,
}

const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const DROPOUT_STREAM: u64 = 0x5eed_0002;

/// Trains `net` on normalized `(input, target, class)` triples. Before the first
/// evaluation, a train-mode pass over one shuffled batch seeds the batch-norm running
/// statistics; it does not touch the weights.
pub fn train(net: &mut Network, spec: &UNetSpec, train_set: &Pairs, val_set: &Pairs, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::arg("training and validation sets must be non-empty"));
    }
    let mut opt = Optimizer::new(cfg.optimizer_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    net.reseed(cfg.seed ^ DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    order.shuffle(&mut rng);
    let (x, _) = batch_of(train_set, &order[..cfg.batch_size.min(order.len())])?;
    net.set_mode(Mode::Train);
    net.forward(&x)?;

    let mut lr = cfg.lr;
    let mut plateau = Plateau::from_config(cfg);
    let r0 = record(net, train_set, val_set, cfg, 0, lr)?;
    plateau.observe(r0.val_loss);
    let mut records = vec![r0];
    let mut best = Checkpoint::capture(net, spec, Some(&opt), 0);
    best.header.best_val_loss = Some(r0.val_loss);
    best.header.record = Some(r0);
    let (mut best_epoch, mut best_val) = (0, r0.val_loss);
    let mut stopped_early = false;
    let mut lr_reduced_at = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        opt.config.lr = lr;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = batch_of(train_set, chunk)?;
            train_step(net, &mut opt, &x, &t, cfg.loss)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
        }
        let r = record(net, train_set, val_set, cfg, epoch, lr)?;
        records.push(r);
        if r.val_loss < best_val {
            best_val = r.val_loss;
            best_epoch = epoch;
            best = Checkpoint::capture(net, spec, Some(&opt), epoch);
            best.header.best_val_loss = Some(best_val);
            best.header.record = Some(r);
        }
        match plateau.observe(r.val_loss) {
            PlateauAction::Continue => {}
            PlateauAction::ReduceLr => {
                lr *= cfg.lr_factor;
                lr_reduced_at = Some(epoch);
            }
            PlateauAction::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    net.set_mode(Mode::Infer);
    Ok(TrainOutcome {
        records,
        best,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        lr_reduced_at,
    })
}

/// Builds the network from `cfg` and trains it on a generated dataset. The dataset's
/// train fraction must equal `cfg.split`.
pub fn train_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainOutcome)> {
    if (data.train_fraction - cfg.split).abs() > 1e-12 {
        return Err(Error::Format(format!(
            "dataset was split at {} but the config asks for {}",
            data.train_fraction, cfg.split
        )));
    }
    let spec = cfg.unet_spec();
    let mut net = build_unet(&spec)?;
    let train_set = data.pairs(Split::Train);
    let val_set = data.pairs(Split::Val);
    let mut out = train(&mut net, &spec, &train_set, &val_set, cfg)?;
    out.best.header.density_norm = Some(norm_array(&data.train_norm.density));
    out.best.header.dose_norm = Some(norm_array(&data.train_norm.dose));
    Ok((net, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{OptimizerConfig, OptimizerKind};

    #[test]
    fn constant_loss_halves_once_then_stops() {
        let mut p = Plateau::new(3, 1e-6, 2, 1e-6);
        let actions: Vec<PlateauAction> = (0..10).map(|_| p.observe(1.0)).collect();
        use PlateauAction::*;
        assert_eq!(&actions[..6], &[Continue, Continue, Continue, ReduceLr, Continue, Stop]);
        assert_eq!(actions.iter().filter(|a| **a == ReduceLr).count(), 1);
    }

    #[test]
    fn small_improvements_do_not_count() {
        let mut p = Plateau::new(2, 0.1, 5, 0.1);
        assert_eq!(p.observe(1.0), PlateauAction::Continue);
        assert_eq!(p.observe(0.95), PlateauAction::Continue);
        assert_eq!(p.observe(0.91), PlateauAction::ReduceLr);
        assert_eq!(p.observe(0.5), PlateauAction::Continue);
    }

    fn tiny_set(n: usize, seed: u64) -> Vec<(Tensor, Tensor, TissueClass)> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        (0..n)
            .map(|_| {
                let x = Tensor::from_fn(vec![9, 9, 9], |_| r.random_range(0.1..0.9));
                let t = x.map(|v| 0.2 + 0.5 * v);
                (x, t, TissueClass::Liver)
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let spec = UNetSpec {
            filter_divisor: 8,
            ..Default::default()
        };
        let mut net = build_unet(&spec).unwrap();
        let set = tiny_set(2, 1);
        let (x, t) = batch_of(&set, &[0, 1]).unwrap();
        let before: Vec<Tensor> = net.params().map(|p| p.value.clone()).collect();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Nadam, 0.0)).unwrap();
        train_step(&mut net, &mut opt, &x, &t, LossKind::Iou).unwrap();
        for (a, p) in before.iter().zip(net.params()) {
            assert!(a.data().iter().zip(p.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()), "{}", p.name);
        }
    }

    #[test]
    fn short_run_records_every_epoch() {
        let cfg = TrainConfig {
            filter_divisor: 8,
            batch_size: 4,
            max_epochs: 2,
            lr: 1e-3,
            ..Default::default()
        };
        let spec = cfg.unet_spec();
        let mut net = build_unet(&spec).unwrap();
        let out = train(&mut net, &spec, &tiny_set(6, 2), &tiny_set(3, 3), &cfg).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(epoch_csv(&out.records).lines().count(), 4);
        assert!(out.best.header.record.is_some());
    }
}
