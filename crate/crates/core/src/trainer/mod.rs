//! Certified training: the three-phase kappa/epsilon schedule, mini-batch
//! optimization, per-epoch validation and checkpoints.
//!
//! Phases: `warmup_epochs` at `kappa_start` with `epsilon = 0`, then
//! `ramp_epochs` moving kappa linearly to `kappa_end` (and epsilon to its
//! target in linear mode), then the remaining epochs at the end values.

mod checkpoint;
mod optim;

pub use checkpoint::{
    checkpoint_from_reader, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{Optimizer, OptimizerKind};

use crate::bounds::{NormKind, PerturbationSpec};
use crate::datagen::Sample;
use crate::error::{BtnError, Result};
use crate::loss::{total_loss_with_workers, LossWeights};
use crate::metrics::{clean_metrics, evaluate_with_workers};
use crate::model::{build_mcnn_micro, ModelConfig, MultiColumnModel, Network};
use crate::rng::{CounterRng, Stream};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const EPOCH_CSV_HEADER: &str = "epoch,kappa,epsilon,natural,certify,reg,total,val_mae,val_ct_mae";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonRamp {
    /// `0` in warmup, then the target.
    None,
    /// `0` in warmup, linear to the target across the ramp, then constant.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub kappa_start: f64,
    pub kappa_end: f64,
    pub epsilon_target: f64,
    pub epsilon_ramp: EpsilonRamp,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub norm: NormKind,
    pub lambda_l1: f64,
    pub beta_l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 80,
            warmup_epochs: 10,
            ramp_epochs: 30,
            kappa_start: 1.0,
            kappa_end: 0.5,
            epsilon_target: 1.0 / 255.0,
            epsilon_ramp: EpsilonRamp::Linear,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            norm: NormKind::Linf,
            lambda_l1: 1e-3,
            beta_l2: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: &str| Err(BtnError::config(format!("train.{f}"), r));
        if self.total_epochs == 0 {
            return err("total_epochs", "must be positive");
        }
        if self.warmup_epochs + self.ramp_epochs > self.total_epochs {
            return err("ramp_epochs", "warmup_epochs + ramp_epochs exceeds total_epochs");
        }
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.kappa_start) {
            return err("kappa_start", "must lie in [0, 1]");
        }
        if !unit(self.kappa_end) || self.kappa_end > self.kappa_start {
            return err("kappa_end", "must lie in [0, kappa_start]");
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.epsilon_target) {
            return err("epsilon_target", "must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err("learning_rate", "must be positive");
        }
        if !unit(self.momentum) || self.momentum == 1.0 {
            return err("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !nonneg(self.lambda_l1) {
            return err("lambda_l1", "must be finite and non-negative");
        }
        if !nonneg(self.beta_l2) {
            return err("beta_l2", "must be finite and non-negative");
        }
        Ok(())
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if epoch >= self.total_epochs {
            return Err(BtnError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        Ok(())
    }

    /// Fraction of the ramp completed at the start of `epoch`, clamped to [0, 1].
    fn ramp_fraction(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else if epoch >= self.warmup_epochs + self.ramp_epochs {
            1.0
        } else {
            (epoch - self.warmup_epochs) as f64 / self.ramp_epochs as f64
        }
    }
}

pub fn kappa_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.check_epoch(epoch)?;
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.kappa_start);
    }
    let f = cfg.ramp_fraction(epoch);
    Ok(cfg.kappa_start + (cfg.kappa_end - cfg.kappa_start) * f)
}

pub fn epsilon_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.check_epoch(epoch)?;
    if epoch < cfg.warmup_epochs {
        return Ok(0.0);
    }
    Ok(match cfg.epsilon_ramp {
        EpsilonRamp::None => cfg.epsilon_target,
        EpsilonRamp::Linear => cfg.epsilon_target * cfg.ramp_fraction(epoch),
    })
}

/// One line of the epoch log. Loss columns are epoch means of the batch
/// breakdowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub kappa: f64,
    pub epsilon: f64,
    pub natural: f64,
    pub certify: f64,
    pub reg: f64,
    pub total: f64,
    pub val_mae: f64,
    pub val_ct_mae: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.kappa,
            self.epsilon,
            self.natural,
            self.certify,
            self.reg,
            self.total,
            self.val_mae,
            self.val_ct_mae
        )
    }
}

pub fn write_epoch_csv<W: Write>(mut w: W, rows: &[EpochRow]) -> std::io::Result<()> {
    writeln!(w, "{EPOCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Best-so-far parameters under the selection score.
#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub score: f64,
    pub params: Vec<f64>,
}

/// Complete, resumable training state.
pub struct Trainer {
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    model: MultiColumnModel<f64>,
    optimizer: Optimizer,
    rng: CounterRng,
    log: Vec<EpochRow>,
    best: Option<BestState>,
    workers: usize,
}

impl Trainer {
    /// Fresh run: builds the model from `model_cfg` (its seed drives init).
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_mcnn_micro::<f64>(&model_cfg)?;
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|p| p.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, &shape_refs);
        Ok(Trainer {
            rng: CounterRng::new(cfg.seed, Stream::Shuffle),
            model_cfg,
            cfg,
            model,
            optimizer,
            log: Vec::new(),
            best: None,
            workers: crate::par::worker_count(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let mut model = build_mcnn_micro::<f64>(&ck.model)?;
        let params = model.parameters_mut();
        if params.len() != ck.params.len() {
            return Err(BtnError::Malformed {
                what: "checkpoint parameters".into(),
                reason: format!("model has {} tensors, checkpoint {}", params.len(), ck.params.len()),
            });
        }
        for (p, t) in params.into_iter().zip(ck.params) {
            if p.shape() != t.shape() {
                return Err(BtnError::Malformed {
                    what: "checkpoint parameters".into(),
                    reason: format!("shape {:?} where {:?} expected", t.shape(), p.shape()),
                });
            }
            *p = t;
        }
        let n = model.parameters().len();
        let optimizer = Optimizer::restore(ck.train.optimizer, ck.train.momentum, ck.optimizer_step, ck.optimizer_state, n)?;
        Ok(Trainer {
            model_cfg: ck.model,
            cfg: ck.train,
            model,
            optimizer,
            rng: ck.rng,
            log: ck.log,
            best: ck.best,
            workers: crate::par::worker_count(),
        })
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn model(&self) -> &MultiColumnModel<f64> {
        &self.model
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[EpochRow] {
        &self.log
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.log.len()
    }

    pub fn is_done(&self) -> bool {
        self.epoch() >= self.cfg.total_epochs
    }

    pub fn best(&self) -> Option<&BestState> {
        self.best.as_ref()
    }

    /// The model at the best validation score (the current model before the
    /// first epoch).
    pub fn best_model(&self) -> MultiColumnModel<f64> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.load_flat_parameters(&b.params);
        }
        m
    }

    /// Selection score: validation certify-tight MAE when training for a
    /// positive epsilon, clean validation MAE otherwise.
    fn score(&self, row: &EpochRow) -> f64 {
        if self.cfg.epsilon_target > 0.0 {
            row.val_ct_mae
        } else {
            row.val_mae
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            train: self.cfg.clone(),
            params: self.model.parameters().into_iter().cloned().collect(),
            optimizer_step: self.optimizer.step_count(),
            optimizer_state: self.optimizer.state().into_iter().cloned().collect(),
            rng: self.rng.clone(),
            log: self.log.clone(),
            best: self.best.clone(),
        }
    }

    /// Runs the next epoch and returns its log row.
    pub fn run_epoch(&mut self, train: &[Sample<f64>], val: &[Sample<f64>]) -> Result<EpochRow> {
        if train.is_empty() {
            return Err(BtnError::Empty("training split"));
        }
        if val.is_empty() {
            return Err(BtnError::Empty("validation split"));
        }
        let epoch = self.epoch();
        let kappa = kappa_at(epoch, &self.cfg)?;
        let epsilon = epsilon_at(epoch, &self.cfg)?;
        let w = LossWeights {
            kappa,
            lambda_l1: self.cfg.lambda_l1,
            beta_l2: self.cfg.beta_l2,
            norm: self.cfg.norm,
            epsilon,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);

        let (mut natural, mut certify, mut reg, mut total) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<_> = idx.iter().map(|&i| (&train[i].image, &train[i].gt_density)).collect();
            let (b, grads) = total_loss_with_workers(&self.model, &batch, &w, self.workers)?;
            if !b.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(BtnError::Diverged { epoch, value: b.total });
            }
            self.optimizer
                .apply(self.model.parameters_mut(), &grads, self.cfg.learning_rate)?;
            natural += b.natural;
            certify += b.certify;
            reg += b.reg;
            total += b.total;
            batches += 1;
        }
        if self.model.parameters().iter().any(|p| !p.all_finite()) {
            return Err(BtnError::Diverged {
                epoch,
                value: f64::NAN,
            });
        }
        let nb = batches as f64;
        let (val_mae, val_ct_mae) = if self.cfg.epsilon_target > 0.0 {
            let spec = PerturbationSpec::new(self.cfg.norm, self.cfg.epsilon_target);
            let (r, _) = evaluate_with_workers(&self.model, val, &spec, self.workers)?;
            (r.clean_mae, r.ct_mae)
        } else {
            let (mae, _) = clean_metrics(&self.model, val)?;
            (mae, mae)
        };
        let row = EpochRow {
            epoch,
            kappa,
            epsilon,
            natural: natural / nb,
            certify: certify / nb,
            reg: reg / nb,
            total: total / nb,
            val_mae,
            val_ct_mae,
        };
        let score = self.score(&row);
        if !score.is_finite() {
            return Err(BtnError::Diverged { epoch, value: score });
        }
        if self.best.as_ref().is_none_or(|b| score < b.score) {
            self.best = Some(BestState {
                epoch,
                score,
                params: self.model.flat_parameters(),
            });
        }
        self.log.push(row.clone());
        Ok(row)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: MultiColumnModel<f64>,
    pub best_model: MultiColumnModel<f64>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRow>,
}

/// Runs a full schedule from scratch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &[Sample<f64>],
    val_data: &[Sample<f64>],
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model_cfg.clone(), cfg.clone())?;
    while !t.is_done() {
        t.run_epoch(train_data, val_data)?;
    }
    Ok(TrainOutcome {
        best_model: t.best_model(),
        best_epoch: t.best().map(|b| b.epoch),
        model: t.model,
        log: t.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn long_schedule() -> TrainConfig {
        TrainConfig {
            total_epochs: 400,
            warmup_epochs: 50,
            ramp_epochs: 150,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn kappa_examples() {
        let c = long_schedule();
        assert_eq!(kappa_at(0, &c).unwrap(), 1.0);
        assert_eq!(kappa_at(125, &c).unwrap(), 0.75);
        assert_eq!(kappa_at(399, &c).unwrap(), 0.5);
        assert!(matches!(kappa_at(400, &c), Err(BtnError::EpochOutOfRange { .. })));
    }

    #[test]
    fn epsilon_examples() {
        let mut c = long_schedule();
        c.epsilon_target = 0.02;
        for mode in [EpsilonRamp::None, EpsilonRamp::Linear] {
            c.epsilon_ramp = mode;
            assert_eq!(epsilon_at(10, &c).unwrap(), 0.0);
            assert_eq!(epsilon_at(300, &c).unwrap(), 0.02);
        }
        c.epsilon_ramp = EpsilonRamp::Linear;
        assert_eq!(epsilon_at(125, &c).unwrap(), 0.01);
        c.epsilon_ramp = EpsilonRamp::None;
        assert_eq!(epsilon_at(50, &c).unwrap(), 0.02);
    }

    #[test]
    fn schedules_are_monotone() {
        let mut c = TrainConfig {
            total_epochs: 20,
            warmup_epochs: 3,
            ramp_epochs: 7,
            ..TrainConfig::default()
        };
        for mode in [EpsilonRamp::None, EpsilonRamp::Linear] {
            c.epsilon_ramp = mode;
            for e in 1..20 {
                assert!(kappa_at(e, &c).unwrap() <= kappa_at(e - 1, &c).unwrap());
                assert!(epsilon_at(e, &c).unwrap() >= epsilon_at(e - 1, &c).unwrap());
            }
        }
    }

    #[test]
    fn zero_ramp_jumps_to_end_values() {
        let c = TrainConfig {
            total_epochs: 4,
            warmup_epochs: 2,
            ramp_epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(kappa_at(1, &c).unwrap(), 1.0);
        assert_eq!(kappa_at(2, &c).unwrap(), 0.5);
        assert_eq!(epsilon_at(2, &c).unwrap(), c.epsilon_target);
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig {
            warmup_epochs: 50,
            ramp_epochs: 50,
            total_epochs: 60,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(BtnError::InvalidConfig { .. })));
        let bad = TrainConfig {
            kappa_end: 0.9,
            kappa_start: 0.5,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(BtnError::InvalidConfig { field, .. }) => assert_eq!(field, "train.kappa_end"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_header_and_row() {
        let row = EpochRow {
            epoch: 3,
            kappa: 0.75,
            epsilon: 0.5,
            natural: 1.0,
            certify: 0.0,
            reg: 0.25,
            total: 1.25,
            val_mae: 2.0,
            val_ct_mae: 3.5,
        };
        let mut out = Vec::new();
        write_epoch_csv(&mut out, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,kappa,epsilon,natural,certify,reg,total,val_mae,val_ct_mae\n3,0.75,0.5,1,0,0.25,1.25,2,3.5\n"
        );
    }
}
