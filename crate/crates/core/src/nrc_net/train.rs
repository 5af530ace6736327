use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{batch_tensor, NrcNet};
use crate::autodiff::{Adam, AdamConfig, BatchNormState, ParamSet, Scalar};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Flat H x W x C images with class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_val_acc: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 60,
            adam: AdamConfig::default(),
            seed: 0,
            stop_at_val_acc: None,
            eval_batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches, in training mode.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc));
        }
        s
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

impl<T: Scalar> NrcNet<T> {
    /// Evaluation-mode mean loss, class predictions, and probabilities.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize) -> Result<(f64, Vec<usize>, Vec<Vec<f64>>)> {
        let (size, ch) = (self.config.input_size, self.config.input_channels);
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(data.len());
        let mut probs = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(data.len());
            let imgs: Vec<&[f32]> = data.images[start..end].iter().map(|v| v.as_slice()).collect();
            let batch = batch_tensor::<T>(&imgs, size, ch)?;
            let mut f = self.forward_eval(&batch)?;
            let l = f.graph.softmax_cross_entropy(f.logits, &data.labels[start..end])?;
            loss += f.graph.value(l).data[0].as_f64() * (end - start) as f64;
            let p = f.graph.softmax(f.logits)?;
            for row in f.graph.value(p).data.chunks(self.config.n_classes) {
                preds.push(argmax(row));
                probs.push(row.iter().map(|v| v.as_f64()).collect());
            }
        }
        let n = data.len().max(1) as f64;
        Ok((loss / n, preds, probs))
    }
}

/// Adam training with a seeded shuffle per epoch. The weights with the best
/// validation accuracy (earliest on ties) are restored before returning.
pub fn train<T: Scalar>(model: &mut NrcNet<T>, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress<T: Scalar>(
    model: &mut NrcNet<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(&bad) = train_set.labels.iter().chain(&val_set.labels).find(|&&l| l >= model.config.n_classes) {
        return Err(Error::Class(bad));
    }
    let (size, ch) = (model.config.input_size, model.config.input_channels);
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = rng_for(derive_seed(cfg.seed, 2));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, ParamSet<T>, Vec<BatchNormState<T>>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|&i| train_set.images[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let batch = batch_tensor::<T>(&imgs, size, ch)?;
            let (loss, grads, logits) = model.loss_and_grads(&batch, &labels, true)?;
            adam.update(&mut model.params, &grads)?;
            loss_sum += loss * chunk.len() as f64;
            correct += logits
                .data
                .chunks(model.config.n_classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        let (val_loss, preds, _) = model.evaluate(val_set, cfg.eval_batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerics(format!("non-finite validation loss at epoch {epoch}")));
        }
        let val_acc = accuracy(&preds, &val_set.labels);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        });
        on_epoch(history.epochs.last().expect("just pushed"));
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, model.params.clone(), model.bn.clone()));
            history.best_epoch = Some(epoch);
            history.best_val_acc = Some(val_acc);
        }
        if cfg.stop_at_val_acc.is_some_and(|t| val_acc >= t) {
            break;
        }
    }
    if let Some((_, params, bn)) = best {
        model.params = params;
        model.bn = bn;
    }
    Ok(history)
}
