//! Confusion matrices, one-vs-rest metrics, stratified fold plans, per-noise
//! evaluation reports, and inference timing.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nrc_net::{accuracy, Dataset, NrcNet};
use crate::rng::{derive_seed, rng_for};
use crate::tf_transforms::VIRIDIS;

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!("{} labels but {} predictions", labels.len(), predictions.len())));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= n_classes {
            return Err(Error::Class(t));
        }
        if p >= n_classes {
            return Err(Error::Class(p));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// One-vs-rest counts and rates for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub accuracy: f64,
    /// `None` when the class has no true samples.
    pub sensitivity: Option<f64>,
    /// `None` when every sample belongs to the class.
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    /// `trace / total`.
    pub overall_accuracy: f64,
    pub macro_accuracy: f64,
    /// Mean over classes where the rate is defined.
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub micro_sensitivity: f64,
    pub micro_specificity: f64,
    /// Classes left out of the macro sensitivity for lack of samples.
    pub undefined_sensitivity: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Config("metrics of an empty confusion matrix".into()));
    }
    let k = cm.n_classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
            let fp = (0..k).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
            let tn = total - tp - fn_ - fp;
            ClassMetrics {
                tp,
                fn_,
                fp,
                tn,
                accuracy: (tp + tn) as f64 / total as f64,
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect();
    let sum = |f: fn(&ClassMetrics) -> u64| per_class.iter().map(f).sum::<u64>();
    let (tp, fn_, fp, tn) = (sum(|m| m.tp), sum(|m| m.fn_), sum(|m| m.fp), sum(|m| m.tn));
    Ok(Metrics {
        overall_accuracy: cm.trace() as f64 / total as f64,
        macro_accuracy: mean(per_class.iter().map(|m| m.accuracy)),
        macro_sensitivity: mean(per_class.iter().filter_map(|m| m.sensitivity)),
        macro_specificity: mean(per_class.iter().filter_map(|m| m.specificity)),
        micro_sensitivity: ratio(tp, tp + fn_).unwrap_or(f64::NAN),
        micro_specificity: ratio(tn, tn + fp).unwrap_or(f64::NAN),
        undefined_sensitivity: (0..k).filter(|&c| per_class[c].sensitivity.is_none()).collect(),
        per_class,
    })
}

/// Stratified assignment of samples to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold index of every sample.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold(&self, i: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&s| self.assignments[s] == i).collect()
    }

    /// Every sample outside fold `i`.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&s| self.assignments[s] != i).collect()
    }
}

/// Shuffles each class, concatenates the classes, and deals the result
/// round-robin, so fold sizes and per-class counts differ by at most one.
pub fn kfold_plan(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2 folds, got {k}")));
    }
    let order = stratified_order(labels, seed)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..n_classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n > 0 && n < k {
            return Err(Error::Stratify(format!("class {c} has {n} samples, fewer than {k} folds")));
        }
    }
    let mut assignments = vec![0; labels.len()];
    for (pos, &s) in order.iter().enumerate() {
        assignments[s] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignments })
}

fn stratified_order(labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(labels.len());
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng_for(derive_seed(seed, c as u64)));
        order.extend(members);
    }
    Ok(order)
}

/// Stratified split of `indices` into (kept, held out), holding out
/// `round(fraction * n_c)` samples of each class `c`.
pub fn holdout_split(indices: &[usize], labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let sub: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let n_classes = sub.iter().max().map_or(0, |m| m + 1);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng_for(derive_seed(seed, 1000 + c as u64)));
        let n_out = (fraction * members.len() as f64).round() as usize;
        held.extend_from_slice(&members[..n_out]);
        keep.extend_from_slice(&members[n_out..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((keep, held))
}

/// One labelled test set, e.g. clean frames or a single SNR level.
#[derive(Debug, Clone)]
pub struct TestCondition {
    pub name: String,
    pub snr_db: Option<f64>,
    pub data: Dataset,
}

/// Display name of a test condition.
pub fn condition_name(snr_db: Option<f64>) -> String {
    match snr_db {
        None => "clean".to_string(),
        Some(s) => format!("{s}dB"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub snr_db: Option<f64>,
    pub samples: usize,
    pub accuracy: f64,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n_samples: usize,
    pub repetitions: usize,
    /// Seconds per sample of every repetition.
    pub raw: Vec<f64>,
    pub median_seconds_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ConditionResult>,
    /// Unweighted mean of the row accuracies.
    pub mean_accuracy: f64,
    /// Unweighted mean over the noisy rows only.
    pub noisy_mean_accuracy: Option<f64>,
    pub training_condition: String,
    pub param_count: usize,
    pub timing: Option<Timing>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    /// Accuracy table, one line per condition plus the average.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,snr_db,samples,accuracy,macro_sensitivity,macro_specificity\n");
        for r in &self.rows {
            let snr = r.snr_db.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                r.condition, snr, r.samples, r.accuracy, r.metrics.macro_sensitivity, r.metrics.macro_specificity
            ));
        }
        s.push_str(&format!("average,,,{:.6},,\n", self.mean_accuracy));
        s
    }

    pub fn row(&self, condition: &str) -> Option<&ConditionResult> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

/// Evaluation-mode inference over each condition. Rows come out clean first,
/// then by decreasing SNR.
pub fn evaluate<T: Scalar>(
    model: &NrcNet<T>,
    conditions: &[TestCondition],
    training_condition: &str,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(conditions.len());
    for c in conditions {
        if c.data.is_empty() {
            return Err(Error::Config(format!("test condition {} is empty", c.name)));
        }
        let (_, preds, _) = model.evaluate(&c.data, 16)?;
        let cm = confusion(&c.data.labels, &preds, model.config.n_classes)?;
        rows.push(ConditionResult {
            condition: c.name.clone(),
            snr_db: c.snr_db,
            samples: c.data.len(),
            accuracy: accuracy(&preds, &c.data.labels),
            metrics: metrics(&cm)?,
            confusion: cm,
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &ConditionResult| r.snr_db.unwrap_or(f64::INFINITY);
        key(b).total_cmp(&key(a))
    });
    let noisy: Vec<f64> = rows.iter().filter(|r| r.snr_db.is_some()).map(|r| r.accuracy).collect();
    Ok(EvalReport {
        mean_accuracy: mean(rows.iter().map(|r| r.accuracy)),
        noisy_mean_accuracy: (!noisy.is_empty()).then(|| mean(noisy.into_iter())),
        rows,
        training_condition: training_condition.to_string(),
        param_count: model.count_params(),
        timing: None,
        config_hash: config_hash.to_string(),
        seed,
    })
}

/// Median wall time per sample over `repetitions` runs of `n_samples`
/// single-image evaluation-mode forward passes.
pub fn time_inference<T: Scalar>(model: &NrcNet<T>, n_samples: usize, repetitions: usize, seed: u64) -> Result<Timing> {
    if n_samples == 0 || repetitions == 0 {
        return Err(Error::Config("time_inference needs n_samples > 0 and repetitions > 0".into()));
    }
    let (size, ch) = (model.config.input_size, model.config.input_channels);
    let mut rng = rng_for(seed);
    let inputs: Vec<Tensor<T>> = (0..n_samples)
        .map(|_| Tensor {
            shape: vec![1, size, size, ch],
            data: (0..size * size * ch).map(|_| T::from_f64(rng.random::<f64>())).collect(),
        })
        .collect();
    let mut raw = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for x in &inputs {
            model.predict(x)?;
        }
        raw.push(start.elapsed().as_secs_f64() / n_samples as f64);
    }
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if repetitions % 2 == 1 {
        sorted[repetitions / 2]
    } else {
        0.5 * (sorted[repetitions / 2 - 1] + sorted[repetitions / 2])
    };
    Ok(Timing {
        n_samples,
        repetitions,
        raw,
        median_seconds_per_sample: median,
    })
}

/// Heatmap of row-normalized counts, one 48 px square per cell.
pub fn write_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    const CELL: u32 = 48;
    let k = cm.n_classes() as u32;
    let mut img = image::RgbImage::new(k * CELL, k * CELL);
    for r in 0..k as usize {
        let row_total: u64 = cm.counts[r].iter().sum();
        for c in 0..k as usize {
            let v = if row_total == 0 { 0.0 } else { cm.counts[r][c] as f64 / row_total as f64 };
            let rgb = VIRIDIS[(v * 255.0).round() as usize];
            let px = image::Rgb(rgb.map(|x| (x * 255.0).round() as u8));
            for y in 0..CELL {
                for x in 0..CELL {
                    img.put_pixel(c as u32 * CELL + x, r as u32 * CELL + y, px);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
