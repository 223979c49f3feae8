//! Mini-batch training with Nesterov momentum, global-norm clipping and early
//! stopping on dev accuracy.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Dev, DialogInstance, GlobalPool, GlobalSource, Instances, Train};
use crate::encoding::BagOfWords;
use crate::error::{Error, Result};
use crate::model::{predict, Accumulator, Gradients, ModelConfig, ModelParameters, Prepared};
use crate::numerics::{clip_global_norm_in_place, nesterov_update_in_place, SeedRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// epochs without dev improvement before stopping
    pub patience: usize,
    pub seed: u64,
    /// redraw training global memories every epoch
    pub resample_global: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            clip_threshold: 10.0,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            resample_global: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.clip_threshold > 0.0) {
            return Err(Error::invalid(
                "learning_rate and clip_threshold must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid(
                "batch_size, max_epochs and patience must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Stagnant,
    Stop,
}

/// Tracks the best dev accuracy; ties keep the earlier epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> Observation {
        if self.best.is_none_or(|b| accuracy > b) {
            self.best = Some(accuracy);
            self.best_epoch = epoch;
            self.since_best = 0;
            return Observation::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Observation::Stop
        } else {
            Observation::Stagnant
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// `epoch,train_loss,dev_acc`
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,dev_acc")?;
        for r in &self.history {
            writeln!(w, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.dev_accuracy)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Everything needed to continue training where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParameters,
    pub velocities: Gradients,
    pub best_params: ModelParameters,
    pub epochs_done: usize,
    pub early: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ModelParameters, patience: usize) -> Self {
        TrainState {
            velocities: params.zeros_like(),
            best_params: params.clone(),
            params,
            epochs_done: 0,
            early: EarlyStopping::new(patience),
            history: Vec::new(),
        }
    }
}

/// Source for redrawing training global memories each epoch.
pub struct GlobalResample<'a> {
    pub pool: &'a GlobalPool,
    pub cap: usize,
    pub source: GlobalSource,
    pub seed: u64,
}

pub struct TrainingData<'a> {
    pub train: &'a Instances<Train>,
    pub dev: &'a Instances<Dev>,
    pub candidates: &'a CandidateSet,
    pub global_table: &'a [BagOfWords],
    pub resample: Option<GlobalResample<'a>>,
}

/// One optimizer step on `batch`; returns the mean loss. The gradient is the
/// batch mean evaluated at the lookahead point, clipped by global norm.
/// `position` (epoch, batch) only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParameters,
    velocities: &mut Gradients,
    batch: &[&DialogInstance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    candidates: &CandidateSet,
    global_table: &[BagOfWords],
    position: (usize, usize),
) -> Result<f64> {
    let (epoch, batch_index) = position;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut ahead = params.clone();
    if train_cfg.momentum > 0.0 {
        for (p, v) in ahead.matrices_mut().into_iter().zip(velocities.matrices()) {
            p.add_scaled(-train_cfg.learning_rate * train_cfg.momentum, v)?;
        }
    }
    let prepared = Prepared::new(&ahead, model_cfg, candidates, global_table)?;
    let mut acc = Accumulator::new(&prepared);
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for inst in batch {
        let trace = prepared.forward(inst)?;
        loss_sum += prepared.backward(inst, &trace, &mut acc, scale)?;
    }
    let mut grads = acc.finish(&prepared);
    let mean = loss_sum * scale;
    if !mean.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_index,
        });
    }
    clip_global_norm_in_place(&mut grads.matrices_mut(), train_cfg.clip_threshold)?;
    for ((p, v), g) in params
        .matrices_mut()
        .into_iter()
        .zip(velocities.matrices_mut())
        .zip(grads.matrices())
    {
        nesterov_update_in_place(p, v, g, train_cfg.learning_rate, train_cfg.momentum)?;
    }
    Ok(mean)
}

/// Trains from scratch; returns the best-dev parameters.
pub fn train(
    params: ModelParameters,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainingData<'_>,
) -> Result<(ModelParameters, TrainReport)> {
    let state = TrainState::new(params, train_cfg.patience);
    let (state, report) = resume(state, model_cfg, train_cfg, data, |_| Ok(()))?;
    Ok((state.best_params, report))
}

/// Continues training from `state` until early stopping or `max_epochs`
/// (counted from the first epoch ever run). `on_epoch` sees the state after
/// every epoch, e.g. to write a checkpoint.
pub fn resume(
    mut state: TrainState,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainingData<'_>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<(TrainState, TrainReport)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("no training instances"));
    }
    if data.dev.is_empty() {
        log::warn!("dev split is empty; early stopping sees accuracy 0");
    }
    state.early.patience = train_cfg.patience;
    let started = Instant::now();
    let base = SeedRng::new(train_cfg.seed);
    let mut stop_reason = StopReason::MaxEpochs;

    while state.epochs_done < train_cfg.max_epochs {
        let epoch = state.epochs_done + 1;
        let resampled = data.resample.as_ref().map(|r| {
            let mut fresh = data.train.clone();
            fresh.fill_global(r.pool, r.cap, r.source, r.seed.wrapping_add(epoch as u64));
            fresh
        });
        let train_items = resampled.as_ref().unwrap_or(data.train).items();

        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut base.fork(epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&DialogInstance> = chunk.iter().map(|&i| &train_items[i]).collect();
            let mean = train_step(
                &mut state.params,
                &mut state.velocities,
                &batch,
                model_cfg,
                train_cfg,
                data.candidates,
                data.global_table,
                (epoch, b),
            )?;
            loss_sum += mean * batch.len() as f64;
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let dev_accuracy = evaluate(
            &state.params,
            model_cfg,
            data.dev.items(),
            data.candidates,
            data.global_table,
        )?;
        state.epochs_done = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            dev_accuracy,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev acc {dev_accuracy:.4}");
        let obs = state.early.observe(epoch, dev_accuracy);
        if obs == Observation::Improved {
            state.best_params = state.params.clone();
        }
        on_epoch(&state)?;
        if obs == Observation::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let report = TrainReport {
        history: state.history.clone(),
        best_epoch: state.early.best_epoch,
        best_dev_accuracy: state.early.best.unwrap_or(0.0),
        stop_reason,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Predicted candidate index for every instance.
pub fn predictions(
    params: &ModelParameters,
    model_cfg: &ModelConfig,
    instances: &[DialogInstance],
    candidates: &CandidateSet,
    global_table: &[BagOfWords],
) -> Result<Vec<usize>> {
    let prepared = Prepared::new(params, model_cfg, candidates, global_table)?;
    instances
        .iter()
        .map(|inst| prepared.forward(inst).map(|t| predict(&t)))
        .collect()
}

/// Per-response accuracy; an empty list scores 0 with a warning.
pub fn evaluate(
    params: &ModelParameters,
    model_cfg: &ModelConfig,
    instances: &[DialogInstance],
    candidates: &CandidateSet,
    global_table: &[BagOfWords],
) -> Result<f64> {
    if instances.is_empty() {
        log::warn!("evaluating on an empty instance list; accuracy reported as 0");
        return Ok(0.0);
    }
    let preds = predictions(params, model_cfg, instances, candidates, global_table)?;
    Ok(accuracy(&preds, instances))
}

pub fn accuracy(predictions: &[usize], instances: &[DialogInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(instances)
        .filter(|(p, i)| **p == i.true_index)
        .count();
    correct as f64 / instances.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_contract() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(1, 0.5), Observation::Improved);
        assert_eq!(es.observe(2, 0.5), Observation::Stagnant);
        assert_eq!(es.observe(3, 0.5), Observation::Stagnant);
        assert_eq!(es.observe(4, 0.5), Observation::Stop);
        assert_eq!(es.best_epoch, 1);

        let mut es = EarlyStopping::new(2);
        es.observe(1, 0.2);
        es.observe(2, 0.1);
        assert_eq!(es.observe(3, 0.3), Observation::Improved);
        assert_eq!(es.since_best, 0);
        assert_eq!(es.best_epoch, 3);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig {
                patience: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn report_csv_layout() {
        let report = TrainReport {
            history: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 2.5,
                    dev_accuracy: 0.25,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 1.0,
                    dev_accuracy: 0.5,
                },
            ],
            best_epoch: 2,
            best_dev_accuracy: 0.5,
            stop_reason: StopReason::MaxEpochs,
            wall_clock_secs: 0.0,
        };
        assert_eq!(
            report.to_csv(),
            "epoch,train_loss,dev_acc\n1,2.500000,0.250000\n2,1.000000,0.500000\n"
        );
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[], &[]), 0.0);
    }
}
