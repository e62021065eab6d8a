//! Training loop: Adam with bias correction, plateau learning-rate decay,
//! seeded shuffling, validation-driven best-checkpoint tracking and early
//! stopping.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::label::{argmax_channels, one_hot, LabelMap};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{Evaluator, MetricReport};
use crate::network::{self, NetworkSpec, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_epochs: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    /// Size every sample is resized to before training and inference.
    pub resize_height: usize,
    pub resize_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            plateau_epochs: 5,
            lr_decay: 0.1,
            batch_size: 2,
            max_epochs: 500,
            early_stop_patience: 15,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            resize_height: crate::data::TARGET_HEIGHT,
            resize_width: crate::data::TARGET_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "need lr0 > 0 and lr_decay in (0, 1], got {} and {}",
                self.lr0, self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.plateau_epochs == 0 {
            return Err(Error::Config(
                "batch_size and plateau_epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "Adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
            ));
        }
        if !(self.loss.epsilon > 0.0) {
            return Err(Error::Config("dice epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub current_lr: f64,
    pub best_val_loss: f64,
    /// Epochs since the validation loss last improved; drives early stopping.
    pub epochs_since_improve: usize,
    /// Non-improving epochs since the last improvement or decay; drives the schedule.
    pub plateau_counter: usize,
    pub plateau_triggers: u32,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            current_lr: cfg.lr0,
            best_val_loss: f64::INFINITY,
            epochs_since_improve: 0,
            plateau_counter: 0,
            plateau_triggers: 0,
            history: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train state serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad train state: {e}")))
    }
}

/// One Adam update of every entry, then zeroes the gradients.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, e)| !e.grad.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter {name}"
        )));
    }
    let t = params.step() + 1;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for (_, e) in params.iter_mut() {
        let (value, grad, m, v) = (
            e.value.data_mut(),
            e.grad.data(),
            e.m.data_mut(),
            e.v.data_mut(),
        );
        for i in 0..value.len() {
            let g = grad[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            value[i] = (value[i] as f64 - update) as f32;
        }
    }
    params.set_step(t);
    params.zero_grads();
    Ok(())
}

/// Updates the plateau schedule with one epoch's validation loss. Returns
/// whether the loss improved (strictly).
pub fn schedule_lr(state: &mut TrainState, val_loss: f64, cfg: &TrainConfig) -> bool {
    let improved = val_loss < state.best_val_loss;
    if improved {
        state.best_val_loss = val_loss;
        state.epochs_since_improve = 0;
        state.plateau_counter = 0;
    } else {
        state.epochs_since_improve += 1;
        state.plateau_counter += 1;
        if state.plateau_counter >= cfg.plateau_epochs {
            state.plateau_triggers += 1;
            state.plateau_counter = 0;
            state.current_lr = cfg.lr0 * cfg.lr_decay.powi(state.plateau_triggers as i32);
            info!(
                "validation loss flat for {} epochs, lr -> {:e}",
                cfg.plateau_epochs, state.current_lr
            );
        }
    }
    improved
}

/// Images stacked into `[n, 1, h, w]` and their one-hot targets.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let images: Vec<Tensor4<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor4::stack_batch(&images)?, one_hot(&masks)?))
}

/// Deterministic sample order for `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

/// Loss and predicted masks (fused head argmax) for one batch, without gradients.
pub fn evaluate_batch(
    params: &ParamStore<f32>,
    spec: &NetworkSpec,
    samples: &[&Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<LabelMap>)> {
    let (x, y) = make_batch(samples)?;
    let mut tape = Tape::new();
    let bound = params.record(&mut tape);
    let xv = tape.leaf(x);
    let out = network::forward(&mut tape, xv, &bound, spec)?;
    let (_, breakdown) = total_loss(&mut tape, &out, &y, loss_cfg)?;
    Ok((breakdown.total, argmax_channels(tape.value(out.fused))))
}

/// Mean loss and pooled metrics of the fused head over `samples`.
pub fn evaluate(
    params: &ParamStore<f32>,
    spec: &NetworkSpec,
    samples: &[Sample],
    loss_cfg: &LossConfig,
    batch_size: usize,
) -> Result<(f64, MetricReport)> {
    let mut ev = Evaluator::new();
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (loss, preds) = evaluate_batch(params, spec, &refs, loss_cfg)?;
        for (p, s) in preds.iter().zip(chunk) {
            ev.add(p, &s.mask)?;
        }
        loss_sum += loss;
        batches += 1;
    }
    Ok((loss_sum / batches.max(1) as f64, ev.report()?))
}

/// Owns the parameters and schedule state of one training run.
pub struct Trainer {
    pub spec: NetworkSpec,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub state: TrainState,
    /// Parameters at the best validation loss so far.
    pub best: Option<ParamStore<f32>>,
}

impl Trainer {
    pub fn new(spec: NetworkSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = network::build(&spec, cfg.seed)?;
        let state = TrainState::new(&cfg);
        Ok(Trainer {
            spec,
            cfg,
            params,
            state,
            best: None,
        })
    }

    /// Continues from saved parameters (including optimizer moments) and state.
    pub fn resume(
        spec: NetworkSpec,
        cfg: TrainConfig,
        params: ParamStore<f32>,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&spec)?;
        if params.step() != state.step {
            return Err(Error::Checkpoint(format!(
                "checkpoint step {} disagrees with train state step {}",
                params.step(),
                state.step
            )));
        }
        Ok(Trainer {
            spec,
            cfg,
            params,
            state,
            best: None,
        })
    }

    /// One pass over `train` followed by validation and the schedule update.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let lr = self.state.current_lr;
        let order = epoch_order(train.len(), self.cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = make_batch(&samples)?;
            let mut tape = Tape::new();
            let bound = self.params.record(&mut tape);
            let xv = tape.leaf(x);
            let out = network::forward(&mut tape, xv, &bound, &self.spec)?;
            let (loss, breakdown) = total_loss(&mut tape, &out, &y, &self.cfg.loss)?;
            if !breakdown.total.is_finite() {
                let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "loss is {} at epoch {epoch}, batch {b} ({})",
                    breakdown.total,
                    ids.join(", ")
                )));
            }
            let grads = tape.backward(loss)?;
            self.params.accumulate_grads(&bound, &grads);
            adam_step(
                &mut self.params,
                lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.adam_eps,
            )?;
            loss_sum += breakdown.total;
            batches += 1;
            debug!("epoch {epoch} batch {b}: loss {:.5}", breakdown.total);
        }
        let (val_loss, report) = evaluate(
            &self.params,
            &self.spec,
            val,
            &self.cfg.loss,
            self.cfg.batch_size,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            val_miou: report.miou,
            lr,
        };
        if schedule_lr(&mut self.state, val_loss, &self.cfg) {
            self.best = Some(self.params.clone());
        }
        self.state.epoch += 1;
        self.state.step = self.params.step();
        self.state.history.push(record.clone());
        info!(
            "epoch {epoch}: train {:.5} val {:.5} miou {:.4} lr {:e}",
            record.train_loss, record.val_loss, record.val_miou, lr
        );
        Ok(record)
    }

    pub fn should_stop(&self) -> bool {
        self.state.epoch >= self.cfg.max_epochs
            || (self.cfg.early_stop_patience > 0
                && self.state.epochs_since_improve >= self.cfg.early_stop_patience)
    }

    /// Runs epochs until [`should_stop`](Self::should_stop), calling
    /// `on_epoch` after each one.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(
                "training and validation sets must both be non-empty".into(),
            ));
        }
        while !self.should_stop() {
            let record = self.run_epoch(train, val)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

/// Builds a network and trains it to completion.
pub fn train(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<Trainer> {
    let mut t = Trainer::new(spec.clone(), cfg.clone())?;
    t.fit(train, val, |_, _| Ok(()))?;
    Ok(t)
}
