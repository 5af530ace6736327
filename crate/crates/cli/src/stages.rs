use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nrc_core::autodiff::{load_checkpoint, save_checkpoint, Checkpoint};
use nrc_core::eval_harness::{
    evaluate, holdout_split, kfold_plan, time_inference, write_confusion_png, EvalReport, TestCondition, Timing,
};
use nrc_core::noise_lab::{mix_one, synth_corpus, MixSpec, NoisyLevel, SynthCorpus};
use nrc_core::nrc_net::{train_with_progress, Dataset, NrcNet, TrainConfig, TrainHistory};
use nrc_core::preprocess::{prepare_lung, prepare_pcg, Frame, FRAME_LEN, FRAME_RATE};
use nrc_core::rng::derive_seed;
use nrc_core::signal_io::{load_manifest, read_wav, write_wav_f32, Label, Manifest};
use nrc_core::tf_transforms::{render_indices, transform_matrix, IMAGE_CHANNELS, IMAGE_SIZE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Experiment;
use crate::error::{CliError, Result};
use crate::plot::{history_png, indices_png};
use crate::store::{
    canonical_json, condition_file, read_frames, read_images, read_json, sha256_file, sha256_hex, write_frames,
    write_images, write_json, Artifact, FrameItem, FrameSet, ImageSet, StageManifest,
};

// Seed streams derived from the experiment seed.
const MIX_STREAM: u64 = 10;
const HOLDOUT_STREAM: u64 = 20;
const FOLD_STREAM: u64 = 21;
const MODEL_STREAM: u64 = 100;
const SHUFFLE_STREAM: u64 = 200;
const TIMING_STREAM: u64 = 300;

const MANIFEST: &str = "manifest.json";
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Mix,
    Transform,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Prepare, Stage::Mix, Stage::Transform, Stage::Train, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Mix => "mix",
            Stage::Transform => "transform",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// The stage whose config hash this one chains onto.
    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Prepare => None,
            Stage::Mix => Some(Stage::Prepare),
            Stage::Transform => Some(Stage::Mix),
            Stage::Train => Some(Stage::Transform),
            Stage::Eval => Some(Stage::Train),
            Stage::Report => Some(Stage::Eval),
        }
    }

    /// Every stage whose artifacts this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Prepare => &[],
            Stage::Mix => &[Stage::Prepare],
            Stage::Transform => &[Stage::Prepare, Stage::Mix],
            Stage::Train => &[Stage::Transform],
            Stage::Eval => &[Stage::Transform, Stage::Train],
            Stage::Report => &[Stage::Transform, Stage::Train, Stage::Eval],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// Items produced by this run; 0 on a cache hit.
    pub rebuilt: usize,
    pub cached: bool,
    pub manifest: StageManifest,
}

impl fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.cached {
            write!(f, "{}: 0 rebuilt (up to date, config {})", self.stage, &self.manifest.config_hash[..12])
        } else {
            write!(f, "{}: {} rebuilt (config {})", self.stage, self.rebuilt, &self.manifest.config_hash[..12])
        }
    }
}

struct Built {
    /// Relative path and whether the content is deterministic.
    artifacts: Vec<(PathBuf, bool)>,
    summary: serde_json::Value,
    rebuilt: usize,
}

/// Runs stages of one experiment, memoizing config hashes.
pub struct Pipeline<'a> {
    exp: &'a Experiment,
    hashes: RefCell<HashMap<Stage, String>>,
}

/// Hash of every input file named by a manifest; missing files hash as such
/// and fail later, in the stage itself.
fn manifest_digest(path: &Path) -> Result<String> {
    let manifest = load_manifest(path)?;
    let mut text = sha256_file(path)?;
    for e in &manifest.entries {
        let p = manifest.resolve(e);
        let h = if p.is_file() { sha256_file(&p)? } else { "missing".into() };
        text.push_str(&format!("\n{}={h}", e.path.display()));
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn frames_from(set: &FrameSet) -> Result<Vec<Frame>> {
    set.items
        .iter()
        .zip(&set.samples)
        .map(|(it, s)| Frame::new(s.clone(), it.label, it.origin.clone()).map_err(CliError::from))
        .collect()
}

fn class_of(label: Label) -> usize {
    label.class_index().expect("heart frames carry class labels")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub fold: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFile {
    pub config_hash: String,
    pub selected_fold: usize,
    pub folds: Vec<FoldHistory>,
}

fn dataset(set: &ImageSet, idx: &[usize]) -> Dataset {
    Dataset {
        images: idx.par_iter().map(|&i| set.pixels(i)).collect(),
        labels: idx.iter().map(|&i| class_of(set.items[i].label)).collect(),
    }
}

fn split_indices(set: &ImageSet, split: &str) -> Vec<usize> {
    (0..set.items.len()).filter(|&i| set.items[i].split == split).collect()
}

impl<'a> Pipeline<'a> {
    pub fn new(exp: &'a Experiment) -> Self {
        Self {
            exp,
            hashes: RefCell::new(HashMap::new()),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.exp.work_dir.join(stage.name())
    }

    /// The configuration a stage depends on, echoed in its manifest.
    pub fn params(&self, stage: Stage) -> Result<serde_json::Value> {
        let cfg = &self.exp.config;
        Ok(match stage {
            Stage::Prepare => json!({
                "preprocess": cfg.preprocess,
                "skip_bad": self.exp.options.skip_bad,
                "heart_inputs": manifest_digest(&self.exp.heart_manifest)?,
                "lung_inputs": self.exp.lung_manifest.as_deref().map(manifest_digest).transpose()?,
            }),
            Stage::Mix => json!({
                "snr_levels": cfg.mix.snr_levels,
                "noise_kind": cfg.mix.noise_kind,
                "mix_seed": derive_seed(cfg.seed, MIX_STREAM),
            }),
            Stage::Transform => json!({ "transform": cfg.transform }),
            Stage::Train => {
                let t = &cfg.train;
                json!({
                    "hyperparameters": {
                        "batch_size": t.batch_size,
                        "learning_rate": t.learning_rate,
                        "epochs": t.epochs,
                        "optimizer": t.optimizer,
                        "loss_function": t.loss,
                    },
                    "adam": t.adam(),
                    "validation_fraction": t.validation_fraction,
                    "training_condition": t.training_condition,
                    "folds": cfg.folds,
                    "model": cfg.model,
                })
            }
            Stage::Eval => json!({
                "conditions": cfg.conditions().into_iter().map(|(n, _)| n).collect::<Vec<_>>(),
                "timing": cfg.timing,
            }),
            Stage::Report => json!({}),
        })
    }

    /// Hash of (stage, params, seed, upstream hash).
    pub fn config_hash(&self, stage: Stage) -> Result<String> {
        if let Some(h) = self.hashes.borrow().get(&stage) {
            return Ok(h.clone());
        }
        let upstream = stage.upstream().map(|u| self.config_hash(u)).transpose()?;
        let text = format!(
            "{}\n{}\n{}\n{}",
            stage.name(),
            canonical_json(&self.params(stage)?),
            self.exp.config.seed,
            upstream.unwrap_or_default()
        );
        let h = sha256_hex(text.as_bytes());
        self.hashes.borrow_mut().insert(stage, h.clone());
        Ok(h)
    }

    pub fn read_manifest(&self, stage: Stage) -> Option<StageManifest> {
        read_json(&self.stage_dir(stage).join(MANIFEST)).ok()
    }

    /// Checks that `input` has current, intact outputs for `stage` to read.
    fn require(&self, stage: Stage, input: Stage) -> Result<String> {
        let order = |reason: &str| CliError::StageOrder {
            stage: stage.name(),
            missing: input.name(),
            reason: reason.to_string(),
        };
        let m = self.read_manifest(input).ok_or_else(|| order("no outputs found"))?;
        let expected = self.config_hash(input)?;
        if m.config_hash != expected {
            return Err(order("its outputs were built from a different config"));
        }
        if !m.artifacts_intact(&self.stage_dir(input))? {
            return Err(order("its artifacts are missing or modified"));
        }
        Ok(expected)
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        for &input in stage.inputs() {
            self.require(stage, input)?;
        }
        let hash = self.config_hash(stage)?;
        let dir = self.stage_dir(stage);
        if let Some(m) = self.read_manifest(stage) {
            if m.config_hash == hash && m.artifacts_intact(&dir)? {
                return Ok(StageOutcome {
                    stage,
                    rebuilt: 0,
                    cached: true,
                    manifest: m,
                });
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let built = match stage {
            Stage::Prepare => self.prepare(&dir, &hash)?,
            Stage::Mix => self.mix(&dir, &hash)?,
            Stage::Transform => self.transform(&dir, &hash)?,
            Stage::Train => self.train(&dir, &hash)?,
            Stage::Eval => self.eval(&dir, &hash)?,
            Stage::Report => self.report(&dir, &hash)?,
        };
        let artifacts = built
            .artifacts
            .iter()
            .map(|(p, deterministic)| {
                Ok(Artifact {
                    path: p.to_string_lossy().into_owned(),
                    sha256: sha256_file(&dir.join(p))?,
                    deterministic: *deterministic,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = StageManifest {
            stage: stage.name().into(),
            config_hash: hash,
            upstream: stage.upstream().map(|u| self.config_hash(u)).transpose()?,
            seed: self.exp.config.seed,
            params: self.params(stage)?,
            artifacts,
            summary: built.summary,
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(StageOutcome {
            stage,
            rebuilt: built.rebuilt,
            cached: false,
            manifest,
        })
    }

    fn load_frames(&self, manifest: &Manifest, heart: bool, frames: &mut FrameSet, failures: &mut Vec<String>) -> Result<()> {
        let pre = &self.exp.config.preprocess;
        if heart {
            if let Some((i, e)) = manifest.entries.iter().enumerate().find(|(_, e)| e.label.class_index().is_none()) {
                return Err(CliError::Core(nrc_core::Error::Manifest {
                    row: i + 2,
                    message: format!("label {} is not a heart-sound class", e.label),
                }));
            }
        }
        let results: Vec<std::result::Result<Frame, String>> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let clip = read_wav(&path, e.label).map_err(|err| match err {
                    nrc_core::Error::Io { .. } => err.to_string(),
                    other => format!("{}: {other}", path.display()),
                })?;
                let frame = if heart { prepare_pcg(&clip, pre) } else { prepare_lung(&clip, pre) };
                frame.map_err(|err| format!("{}: {err}", path.display()))
            })
            .collect();
        for (e, r) in manifest.entries.iter().zip(results) {
            match r {
                Ok(f) => {
                    frames.items.push(FrameItem {
                        origin: e.path.to_string_lossy().into_owned(),
                        label: e.label,
                        split: e.split.clone(),
                    });
                    frames.samples.push(f.samples);
                }
                Err(msg) => failures.push(msg),
            }
        }
        Ok(())
    }

    fn prepare(&self, dir: &Path, hash: &str) -> Result<Built> {
        let mut failures = Vec::new();
        let empty = FrameSet {
            snr_db: None,
            items: Vec::new(),
            samples: Vec::new(),
        };
        let (mut heart, mut lung) = (empty.clone(), empty);
        self.load_frames(&load_manifest(&self.exp.heart_manifest)?, true, &mut heart, &mut failures)?;
        if let Some(p) = &self.exp.lung_manifest {
            self.load_frames(&load_manifest(p)?, false, &mut lung, &mut failures)?;
        }
        for f in &failures {
            eprintln!("prepare: failed {f}");
        }
        if !failures.is_empty() && !self.exp.options.skip_bad {
            return Err(CliError::BadInputs { failures });
        }
        if heart.items.is_empty() {
            return Err(CliError::Config("no heart recordings could be prepared".into()));
        }
        write_frames(&dir.join("heart.frames"), hash, &heart, FRAME_LEN, FRAME_RATE)?;
        let mut artifacts = vec![(PathBuf::from("heart.frames"), true)];
        if self.exp.lung_manifest.is_some() {
            write_frames(&dir.join("lung.frames"), hash, &lung, FRAME_LEN, FRAME_RATE)?;
            artifacts.push((PathBuf::from("lung.frames"), true));
        }
        Ok(Built {
            artifacts,
            summary: json!({
                "heart_frames": heart.items.len(),
                "lung_frames": lung.items.len(),
                "failed": failures,
            }),
            rebuilt: heart.items.len() + lung.items.len(),
        })
    }

    fn mix(&self, dir: &Path, hash: &str) -> Result<Built> {
        let cfg = &self.exp.config;
        let prep = self.config_hash(Stage::Prepare)?;
        let pdir = self.stage_dir(Stage::Prepare);
        let heart_set = read_frames(&pdir.join("heart.frames"), &prep)?;
        let heart = frames_from(&heart_set)?;
        let lung = match &self.exp.lung_manifest {
            Some(_) => frames_from(&read_frames(&pdir.join("lung.frames"), &prep)?)?,
            None => Vec::new(),
        };
        let specs = MixSpec::levels(&cfg.mix.snr_levels, cfg.mix.noise_kind, derive_seed(cfg.seed, MIX_STREAM));
        let mut artifacts = Vec::new();
        for ((name, _), spec) in cfg.conditions().into_iter().skip(1).zip(&specs) {
            let mixed = (0..heart.len())
                .into_par_iter()
                .map(|i| mix_one(&heart[i], i, &lung, spec))
                .collect::<nrc_core::Result<Vec<_>>>()?;
            let (frames, records): (Vec<_>, Vec<_>) = mixed.into_iter().unzip();
            let level = NoisyLevel {
                spec: *spec,
                frames,
                records,
            };
            let set = FrameSet {
                snr_db: Some(spec.snr_db),
                items: heart_set.items.clone(),
                samples: level.frames.iter().map(|f| f.samples.clone()).collect(),
            };
            let frames_path = condition_file(&name, "frames");
            let sidecar_path = condition_file(&name, "json");
            write_frames(&dir.join(&frames_path), hash, &set, FRAME_LEN, FRAME_RATE)?;
            write_json(&dir.join(&sidecar_path), &json!({ "config_hash": hash, "mix": level.sidecar() }))?;
            artifacts.push((frames_path, true));
            artifacts.push((sidecar_path, true));
        }
        Ok(Built {
            artifacts,
            summary: json!({ "levels": specs.len(), "frames_per_level": heart.len() }),
            rebuilt: specs.len() * heart.len(),
        })
    }

    fn condition_frames(&self, name: &str) -> Result<FrameSet> {
        if name == "clean" {
            read_frames(&self.stage_dir(Stage::Prepare).join("heart.frames"), &self.config_hash(Stage::Prepare)?)
        } else {
            read_frames(&self.stage_dir(Stage::Mix).join(condition_file(name, "frames")), &self.config_hash(Stage::Mix)?)
        }
    }

    fn condition_images(&self, name: &str) -> Result<ImageSet> {
        read_images(
            &self.stage_dir(Stage::Transform).join(condition_file(name, "images")),
            &self.config_hash(Stage::Transform)?,
        )
    }

    fn transform(&self, dir: &Path, hash: &str) -> Result<Built> {
        let tc = &self.exp.config.transform;
        let mut artifacts = Vec::new();
        let mut rebuilt = 0;
        for (name, snr_db) in self.exp.config.conditions() {
            let frames = self.condition_frames(&name)?;
            let indices = frames
                .samples
                .par_iter()
                .map(|s| render_indices(&transform_matrix(s, FRAME_RATE, tc.kind, &tc.params)?, tc.kind))
                .collect::<nrc_core::Result<Vec<_>>>()?;
            rebuilt += indices.len();
            let set = ImageSet {
                condition: name.clone(),
                snr_db,
                transform: tc.kind,
                items: frames.items,
                indices,
            };
            let path = condition_file(&name, "images");
            write_images(&dir.join(&path), hash, &set)?;
            artifacts.push((path, true));
        }
        Ok(Built {
            artifacts,
            summary: json!({ "transform": tc.kind, "images": rebuilt }),
            rebuilt,
        })
    }

    fn train(&self, dir: &Path, hash: &str) -> Result<Built> {
        let cfg = &self.exp.config;
        let t = &cfg.train;
        let set = self.condition_images(&t.training_condition)?;
        let train_idx = split_indices(&set, "train");
        if train_idx.is_empty() {
            return Err(CliError::Config("the heart manifest has no `train` rows".into()));
        }
        let data = dataset(&set, &train_idx);
        let local: Vec<usize> = (0..data.len()).collect();
        let runs: Vec<(Vec<usize>, Vec<usize>)> = if cfg.folds == 1 {
            let (fit, val) = holdout_split(&local, &data.labels, t.validation_fraction, derive_seed(cfg.seed, HOLDOUT_STREAM))?;
            if val.is_empty() || fit.is_empty() {
                return Err(CliError::Config("validation_fraction leaves an empty training or validation set".into()));
            }
            vec![(fit, val)]
        } else {
            let plan = kfold_plan(&data.labels, cfg.folds, derive_seed(cfg.seed, FOLD_STREAM))?;
            (0..cfg.folds).map(|i| (plan.complement(i), plan.fold(i))).collect()
        };

        let mut folds = Vec::with_capacity(runs.len());
        let mut best: Option<(f64, usize, NrcNet<f32>)> = None;
        for (i, (fit, val)) in runs.iter().enumerate() {
            let mut model = NrcNet::<f32>::new(cfg.model.clone(), derive_seed(cfg.seed, MODEL_STREAM + i as u64))?;
            let tcfg = TrainConfig {
                batch_size: t.batch_size,
                epochs: t.epochs,
                adam: t.adam(),
                seed: derive_seed(cfg.seed, SHUFFLE_STREAM + i as u64),
                stop_at_val_acc: None,
                eval_batch_size: EVAL_BATCH,
            };
            let history = train_with_progress(&mut model, &data.subset(fit), &data.subset(val), &tcfg, |e| {
                eprintln!(
                    "train: fold {}/{} epoch {}/{} loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
                    i + 1,
                    runs.len(),
                    e.epoch,
                    t.epochs,
                    e.train_loss,
                    e.train_acc,
                    e.val_loss,
                    e.val_acc
                );
            })?;
            let score = history.best_val_acc.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, i, model));
            }
            folds.push(FoldHistory {
                fold: i,
                train_samples: fit.len(),
                val_samples: val.len(),
                history,
            });
        }
        let (_, selected, model) = best.expect("at least one run");

        let mut ckpt = model.to_checkpoint(0);
        if let serde_json::Value::Object(meta) = &mut ckpt.meta {
            meta.insert("config_hash".into(), json!(hash));
        }
        save_checkpoint(&dir.join("model.ckpt"), &ckpt)?;
        std::fs::write(dir.join("history.csv"), folds[selected].history.to_csv()).map_err(|e| CliError::io(dir.join("history.csv"), e))?;
        let fold_acc: Vec<Option<f64>> = folds.iter().map(|f| f.history.best_val_acc).collect();
        let summary = json!({
            "training_data_shape": [runs[selected].0.len(), IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS],
            "param_count": model.count_params(),
            "selected_fold": selected,
            "best_epoch": folds[selected].history.best_epoch,
            "fold_best_val_acc": fold_acc,
        });
        write_json(
            &dir.join("history.json"),
            &HistoryFile {
                config_hash: hash.to_string(),
                selected_fold: selected,
                folds,
            },
        )?;
        Ok(Built {
            artifacts: vec![("model.ckpt".into(), true), ("history.json".into(), true), ("history.csv".into(), true)],
            summary,
            rebuilt: runs.len(),
        })
    }

    fn load_model(&self) -> Result<NrcNet<f32>> {
        let path = self.stage_dir(Stage::Train).join("model.ckpt");
        let ckpt: Checkpoint<f32> = load_checkpoint(&path)?;
        let expected = self.config_hash(Stage::Train)?;
        let found = ckpt.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if found != expected {
            return Err(CliError::Provenance {
                path,
                expected,
                found: found.to_string(),
            });
        }
        Ok(NrcNet::from_checkpoint(&ckpt)?)
    }

    fn eval(&self, dir: &Path, hash: &str) -> Result<Built> {
        let cfg = &self.exp.config;
        let model = self.load_model()?;
        let mut conditions = Vec::new();
        for (name, snr_db) in cfg.conditions() {
            let set = self.condition_images(&name)?;
            let test = split_indices(&set, "test");
            if test.is_empty() {
                return Err(CliError::Config("the heart manifest has no `test` rows".into()));
            }
            conditions.push(TestCondition {
                name,
                snr_db,
                data: dataset(&set, &test),
            });
        }
        let report = evaluate(&model, &conditions, &cfg.train.training_condition, hash, cfg.seed)?;
        let mut artifacts: Vec<(PathBuf, bool)> = Vec::new();
        std::fs::write(dir.join("metrics.json"), report.to_json()? + "\n").map_err(|e| CliError::io(dir.join("metrics.json"), e))?;
        artifacts.push(("metrics.json".into(), true));
        std::fs::write(dir.join("accuracy_vs_snr.csv"), report.to_csv()).map_err(|e| CliError::io(dir.join("accuracy_vs_snr.csv"), e))?;
        artifacts.push(("accuracy_vs_snr.csv".into(), true));
        for row in &report.rows {
            let p = PathBuf::from(format!("confusion_{}.png", row.condition));
            write_confusion_png(&row.confusion, &dir.join(&p))?;
            artifacts.push((p, true));
        }
        if cfg.timing.enabled {
            let timing = time_inference(&model, cfg.timing.n_samples, cfg.timing.repetitions, derive_seed(cfg.seed, TIMING_STREAM))?;
            write_json(&dir.join("timing.json"), &json!({ "config_hash": hash, "timing": timing }))?;
            artifacts.push(("timing.json".into(), false));
        }
        let samples: usize = conditions.iter().map(|c| c.data.len()).sum();
        Ok(Built {
            artifacts,
            summary: json!({
                "rows": report.rows.iter().map(|r| json!({ "condition": r.condition, "accuracy": r.accuracy })).collect::<Vec<_>>(),
                "mean_accuracy": report.mean_accuracy,
            }),
            rebuilt: samples,
        })
    }

    fn report(&self, dir: &Path, hash: &str) -> Result<Built> {
        let cfg = &self.exp.config;
        let edir = self.stage_dir(Stage::Eval);
        let mut report = EvalReport::from_json(
            &std::fs::read_to_string(edir.join("metrics.json")).map_err(|e| CliError::io(edir.join("metrics.json"), e))?,
        )?;
        if cfg.timing.enabled {
            #[derive(Deserialize)]
            struct TimingFile {
                timing: Timing,
            }
            report.timing = Some(read_json::<TimingFile>(&edir.join("timing.json"))?.timing);
        }
        let history: HistoryFile = read_json(&self.stage_dir(Stage::Train).join("history.json"))?;
        let selected = &history.folds[history.selected_fold];

        let mut artifacts: Vec<(PathBuf, bool)> = Vec::new();
        std::fs::write(dir.join("report.json"), report.to_json()? + "\n").map_err(|e| CliError::io(dir.join("report.json"), e))?;
        artifacts.push(("report.json".into(), !cfg.timing.enabled));
        std::fs::write(dir.join("accuracy_vs_snr.csv"), report.to_csv()).map_err(|e| CliError::io(dir.join("accuracy_vs_snr.csv"), e))?;
        artifacts.push(("accuracy_vs_snr.csv".into(), true));
        history_png(&selected.history, &dir.join("history.png"))?;
        artifacts.push(("history.png".into(), true));

        let samples_dir = dir.join("samples");
        std::fs::create_dir_all(&samples_dir).map_err(|e| CliError::io(&samples_dir, e))?;
        for (name, _) in cfg.conditions() {
            let set = self.condition_images(&name)?;
            for label in Label::CLASSES {
                if let Some(i) = (0..set.items.len()).find(|&i| set.items[i].label == label && set.items[i].split == "test") {
                    let p = PathBuf::from("samples").join(format!("{name}_{label}.png"));
                    indices_png(&set.indices[i], &dir.join(&p))?;
                    artifacts.push((p, true));
                }
            }
        }

        let train_manifest = self.read_manifest(Stage::Train).expect("checked by require");
        let summary = json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "transform": cfg.transform.kind,
            "training_condition": cfg.train.training_condition,
            "hyperparameters": train_manifest.params["hyperparameters"],
            "param_count": report.param_count,
            "selected_fold": history.selected_fold,
            "best_epoch": selected.history.best_epoch,
            "fold_best_val_acc": history.folds.iter().map(|f| f.history.best_val_acc).collect::<Vec<_>>(),
            "rows": report.rows.iter().map(|r| json!({
                "condition": r.condition,
                "snr_db": r.snr_db,
                "accuracy": r.accuracy,
                "macro_sensitivity": r.metrics.macro_sensitivity,
                "macro_specificity": r.metrics.macro_specificity,
            })).collect::<Vec<_>>(),
            "mean_accuracy": report.mean_accuracy,
            "noisy_mean_accuracy": report.noisy_mean_accuracy,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        artifacts.push(("summary.json".into(), true));
        Ok(Built {
            rebuilt: artifacts.len(),
            artifacts,
            summary: json!({ "rows": report.rows.len() }),
        })
    }
}

/// Runs `f` on a pool of `workers` threads, or the default pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::Config("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOutcome {
    pub heart_files: usize,
    pub lung_files: usize,
}

/// Writes a synthetic corpus as 32-bit float WAVs, `heart.csv`, `lung.csv`,
/// and a starter `experiment.json` under `out_dir`.
pub fn run_synth(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<SynthOutcome> {
    let corpus = synth_corpus(n_per_class, seed)?;
    for sub in ["heart", "lung"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
    }
    let write = |path: PathBuf, f: &Frame| write_wav_f32(out_dir.join(path), &f.to_clip());
    corpus.heart.par_iter().try_for_each(|f| write(SynthCorpus::heart_path(f), f))?;
    corpus.lung.par_iter().try_for_each(|f| write(SynthCorpus::lung_path(f), f))?;
    corpus.heart_manifest(out_dir)?.write(out_dir.join("heart.csv"))?;
    corpus.lung_manifest(out_dir)?.write(out_dir.join("lung.csv"))?;
    write_json(
        &out_dir.join("experiment.json"),
        &json!({
            "heart_manifest": "heart.csv",
            "lung_manifest": "lung.csv",
            "work_dir": "work",
            "seed": seed,
        }),
    )?;
    Ok(SynthOutcome {
        heart_files: corpus.heart.len(),
        lung_files: corpus.lung.len(),
    })
}
