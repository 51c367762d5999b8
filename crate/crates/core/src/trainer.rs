//! Mini-batch training with Adam, validation-driven learning-rate decay and
//! early stopping.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Var};
use crate::data::{tail_count, Dataset};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::index::SmlRecommender;
use crate::losses::{batch_mean, example_objective, LossConfig};
use crate::sampling::{build_epoch, SamplerConfig, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Relative validation gain below which the learning rate is lowered.
    pub min_relative_improvement: f64,
    pub validation_fraction: f64,
    /// Training stops once the learning rate has been lowered this often.
    pub max_lr_reductions: usize,
    pub validation_cutoff: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 150,
            lr: 0.001,
            lr_decay_factor: 0.1,
            min_relative_improvement: 0.005,
            validation_fraction: 0.05,
            max_lr_reductions: 3,
            validation_cutoff: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!(
                "lr_decay_factor must be in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.validation_cutoff == 0 {
            return bad("validation_cutoff must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rec20: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation recall.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_rec: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in history {
        out.serialize(r)
            .map_err(|e| Error::Malformed(format!("history csv: {e}")))?;
    }
    out.flush().map_err(|e| Error::Malformed(format!("history csv: {e}")))?;
    Ok(())
}

/// Chronological `(fit, validation)` split of the training sessions.
pub fn validation_split(train: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    let mut sessions = train.sessions.clone();
    sessions.sort_by_key(|s| s.start_time());
    let n_val = tail_count(sessions.len(), fraction);
    if n_val == 0 || n_val >= sessions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} training sessions are too few for a {fraction} validation split",
            sessions.len()
        )));
    }
    let val = sessions.split_off(sessions.len() - n_val);
    let part = |sessions| Dataset {
        sessions,
        vocab: train.vocab.clone(),
        max_session_length: train.max_session_length,
    };
    Ok((part(sessions), part(val)))
}

/// REC@cutoff of `model` on `val`.
pub fn validate(model: &Model<f32>, val: &Dataset, cutoff: usize) -> Result<f64> {
    let rec = SmlRecommender::new(model.clone())?;
    let cfg = EvalConfig {
        cutoff,
        ..EvalConfig::default()
    };
    Ok(evaluate(&rec, val, &cfg, "validation")?.recall)
}

fn tail(prefix: &[usize], max: usize) -> &[usize] {
    &prefix[prefix.len().saturating_sub(max)..]
}

/// Forward pass for one mini-batch. Every distinct positive or negative item
/// is encoded once and gathered per example.
fn batch_loss(
    tape: &mut Tape<'_, f32>,
    model: &Model<f32>,
    batch: &[TrainingExample],
    cfg: &LossConfig,
) -> Result<Var> {
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut unique = Vec::new();
    for ex in batch {
        for &i in ex.positives.iter().chain(&ex.negatives) {
            slot.entry(i).or_insert_with(|| {
                unique.push(i);
                unique.len() - 1
            });
        }
    }
    let encoded = model.encode_items(tape, &unique)?;
    let max = model.config().max_session_length;
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let s = model.encode_session(tape, tail(&ex.prefix, max))?;
        let p_rows: Vec<usize> = ex.positives.iter().map(|i| slot[i]).collect();
        let n_rows: Vec<usize> = ex.negatives.iter().map(|i| slot[i]).collect();
        let p = tape.gather(encoded, &p_rows)?;
        let n = tape.gather(encoded, &n_rows)?;
        losses.push(example_objective(tape, s, p, n, &ex.positives, &ex.negatives, cfg)?);
    }
    batch_mean(tape, &losses)
}

/// Runs one optimizer step on `batch` and returns its loss.
pub fn train_step(model: &mut Model<f32>, batch: &[TrainingExample], loss_cfg: &LossConfig, lr: f64) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new(model.params());
        let loss = batch_loss(&mut tape, model, batch, loss_cfg)?;
        (tape.scalar(loss) as f64, tape.backward(loss)?)
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    let params = model.params_mut();
    params.accumulate(&grads);
    params.adam_step(&Adam::with_lr(lr));
    Ok(loss)
}

/// Trains `model` on `train`. The last `validation_fraction` of sessions (by
/// start time) is held out for the learning-rate schedule and never
/// contributes gradient.
pub fn train(
    train: &Dataset,
    mut model: Model<f32>,
    loss_cfg: &LossConfig,
    sampler_cfg: &SamplerConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    sampler_cfg.validate()?;
    train_cfg.validate()?;
    if train.sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.vocab_size() != train.vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} items, dataset has {}",
            model.vocab_size(),
            train.vocab.len()
        )));
    }
    if train_cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: None,
            best_val_rec: 0.0,
        });
    }
    let (fit, val) = validation_split(train, train_cfg.validation_fraction)?;

    let mut lr = train_cfg.lr;
    let mut reductions = 0;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;

    for epoch in 1..=train_cfg.max_epochs {
        let knn_model = sampler_cfg.knn_augment.then_some(&model);
        let examples = build_epoch(&fit, sampler_cfg, knn_model, epoch as u64)?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in examples.chunks(train_cfg.batch_size) {
            let loss = train_step(&mut model, batch, loss_cfg, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = if count > 0 { loss_sum / count as f64 } else { 0.0 };
        let val_rec = validate(&model, &val, train_cfg.validation_cutoff)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_rec20: val_rec,
            lr,
        });
        log::info!("epoch {epoch}: loss {train_loss:.6} val REC {val_rec:.4} lr {lr:e}");

        let improved = match &best {
            None => true,
            Some((_, b, _)) if *b > 0.0 => (val_rec - b) / b >= train_cfg.min_relative_improvement,
            Some(_) => val_rec > 0.0,
        };
        if best.as_ref().is_none_or(|(_, b, _)| val_rec > *b) {
            best = Some((epoch, val_rec, model.params().snapshot()));
        }
        if !improved {
            reductions += 1;
            if reductions >= train_cfg.max_lr_reductions {
                log::info!("stopping after {reductions} learning-rate reductions");
                break;
            }
            lr *= train_cfg.lr_decay_factor;
        }
    }

    let (best_epoch, best_val_rec) = match best {
        Some((e, v, snap)) => {
            model.params_mut().restore(&snap);
            (Some(e), v)
        }
        None => (None, 0.0),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_rec,
    })
}
