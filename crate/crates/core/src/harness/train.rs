use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion, metrics};
use super::HarnessError;
use crate::dataio::{Label, Window};
use crate::layers::Mode;
use crate::models::Model;
use crate::numerics::{AdamConfig, AdamState, Element, Precision, Tape, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    pub adam: AdamConfig,
    pub precision: Precision,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            patience: 20,
            adam: AdamConfig::default(),
            precision: Precision::F64,
            train_fraction: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(HarnessError::Invalid("batch size and patience must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HarnessError::Invalid("train fraction must lie in (0, 1)".into()));
        }
        self.adam.validate().map_err(|e| HarnessError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_f_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,val_f_score\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.val_f_score
            ));
        }
        out
    }
}

/// Stacks windows into a `[n, 4, length]` tensor.
pub fn batch_tensor<T: Element>(windows: &[&Window]) -> Result<Tensor<T>, HarnessError> {
    let first = windows.first().ok_or_else(|| HarnessError::Invalid("empty batch".into()))?;
    let per = first.data.len();
    let mut data = Vec::with_capacity(per * windows.len());
    for w in windows {
        if w.data.len() != per || w.length != first.length {
            return Err(HarnessError::Invalid("windows of different shapes in one batch".into()));
        }
        data.extend(w.data.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(vec![windows.len(), per / first.length, first.length], data)?)
}

fn labels_of(windows: &[&Window]) -> Vec<usize> {
    windows.iter().map(|w| w.label.index()).collect()
}

/// Predicted label and the two class scores of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub scores: [f64; 2],
}

/// One eval-mode pass: mean loss (accumulated in f64) and predictions.
/// The predicted label is the argmax of the two scores, ties going to normal.
pub fn evaluate<T: Element>(
    model: &mut Model<T>,
    windows: &[Window],
    batch_size: usize,
) -> Result<(f64, Vec<Prediction>), HarnessError> {
    if windows.is_empty() {
        return Err(HarnessError::EmptyEvaluation);
    }
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let mut rng = seed::rng(0);
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(windows.len());
    let refs: Vec<&Window> = windows.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let x = batch_tensor::<T>(chunk)?;
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let logits = model.logits(&mut tape, v, &mut rng)?;
        let loss = model.loss(&mut tape, logits, &labels_of(chunk))?;
        total += tape.value(loss)[0].as_f64() * chunk.len() as f64;
        let scores = model.scores(&mut tape, logits)?;
        for row in tape.value(scores).chunks(2) {
            let s = [row[0].as_f64(), row[1].as_f64()];
            preds.push(Prediction {
                label: if s[1] > s[0] { Label::Broken } else { Label::Normal },
                scores: s,
            });
        }
    }
    model.set_mode(previous);
    Ok((total / windows.len() as f64, preds))
}

pub fn evaluate_loss<T: Element>(
    model: &mut Model<T>,
    windows: &[Window],
    batch_size: usize,
) -> Result<f64, HarnessError> {
    Ok(evaluate(model, windows, batch_size)?.0)
}

/// Eval-mode inference; empty input gives no predictions.
pub fn predict<T: Element>(
    model: &mut Model<T>,
    windows: &[Window],
    batch_size: usize,
) -> Result<Vec<Prediction>, HarnessError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    Ok(evaluate(model, windows, batch_size)?.1)
}

/// Mini-batch Adam on `train`, keeping the parameters with the lowest
/// validation loss. Shuffling and dropout draw from streams derived from
/// `seed`.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train: &[Window],
    validation: &[Window],
    config: &TrainConfig,
    seed: u64,
) -> Result<History, HarnessError> {
    config.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Invalid("empty training set".into()));
    }
    if validation.is_empty() {
        return Err(HarnessError::Invalid("empty validation set".into()));
    }
    let mut history = History::default();
    if config.epochs == 0 {
        log::warn!("zero epochs requested; returning the initialized model");
        return Ok(history);
    }
    let mut adam = AdamState::new(config.adam, model.store().tensors())?;
    let mut shuffle_rng = seed::derived_rng(seed, "shuffle", 0);
    let mut dropout_rng = seed::derived_rng(seed, "dropout", 0);
    let val_labels: Vec<Label> = validation.iter().map(|w| w.label).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let x = batch_tensor::<T>(&batch)?;
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let step = (|| -> Result<f64, HarnessError> {
                let logits = model.logits(&mut tape, v, &mut dropout_rng)?;
                let loss = model.loss(&mut tape, logits, &labels_of(&batch))?;
                let value = tape.value(loss)[0].as_f64();
                let grads = tape.backward(loss)?;
                grads.accumulate_into(model.store_mut().tensors_mut())?;
                adam.step(model.store_mut().tensors_mut())?;
                Ok(value)
            })();
            match step {
                Ok(value) => loss_sum += value * batch.len() as f64,
                Err(e) => {
                    return Err(HarnessError::Diverged {
                        epoch,
                        batch: b,
                        detail: e.to_string(),
                    })
                }
            }
        }
        let (val_loss, preds) = evaluate(model, validation, config.batch_size)?;
        let preds: Vec<Label> = preds.iter().map(|p| p.label).collect();
        let m = metrics(&confusion(&preds, &val_labels)?)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy: m.accuracy,
            val_f_score: m.f_score,
        };
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} acc {:.4} f {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_f_score
        );
        history.epochs.push(record);
        if best.as_ref().map_or(true, |(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, model.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("no validation improvement for {} epochs; stopping at epoch {epoch}", config.patience);
                break;
            }
        }
    }
    let (loss, epoch, snapshot) = best.expect("at least one epoch ran");
    model.restore(&snapshot);
    model.set_mode(Mode::Eval);
    history.best_epoch = Some(epoch);
    history.best_val_loss = Some(loss);
    Ok(history)
}
