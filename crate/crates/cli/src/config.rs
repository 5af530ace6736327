use std::path::{Path, PathBuf};

use nrc_core::autodiff::AdamConfig;
use nrc_core::eval_harness::condition_name;
use nrc_core::noise_lab::{NoiseKind, DEFAULT_SNR_LEVELS};
use nrc_core::nrc_net::NrcNetConfig;
use nrc_core::preprocess::PreprocessConfig;
use nrc_core::tf_transforms::{TransformKind, TransformParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that overrides `work_dir`.
pub const WORK_DIR_ENV: &str = "NRC_WORK_DIR";

/// One experiment, read from JSON. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub heart_manifest: PathBuf,
    /// Required when mixing lung noise.
    #[serde(default)]
    pub lung_manifest: Option<PathBuf>,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub model: NrcNetConfig,
    #[serde(default)]
    pub train: TrainSettings,
    /// 1 trains once on a stratified holdout; k >= 2 runs k-fold
    /// cross-validation and keeps the best fold's model.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub timing: TimingConfig,
    pub seed: u64,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

fn default_folds() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub snr_levels: Vec<f64>,
    pub noise_kind: NoiseKind,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            snr_levels: DEFAULT_SNR_LEVELS.to_vec(),
            noise_kind: NoiseKind::Lung,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub kind: TransformKind,
    pub params: TransformParams,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            kind: TransformKind::Cwt,
            params: TransformParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub loss: String,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Share of the training split held out for validation when `folds` is 1.
    pub validation_fraction: f64,
    /// `clean` or one of the mixed conditions, e.g. `5dB`.
    pub training_condition: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 16,
            epochs: 60,
            learning_rate: adam.lr,
            optimizer: "Adam".into(),
            loss: "categorical_crossentropy".into(),
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.eps,
            validation_fraction: 0.1,
            training_condition: "clean".into(),
        }
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub enabled: bool,
    pub n_samples: usize,
    pub repetitions: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_samples: 10,
            repetitions: 5,
        }
    }
}

/// Options given on the command line rather than in the config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub skip_bad: bool,
}

/// A validated config with every path resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub heart_manifest: PathBuf,
    pub lung_manifest: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub options: RunOptions,
}

impl ExperimentConfig {
    /// Names of the test conditions, clean first.
    pub fn conditions(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![(condition_name(None), None)];
        out.extend(self.mix.snr_levels.iter().map(|&s| (condition_name(Some(s)), Some(s))));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let levels = &self.mix.snr_levels;
        if levels.iter().any(|s| !s.is_finite()) {
            return bad("SNR levels must be finite".into());
        }
        for (i, a) in levels.iter().enumerate() {
            if levels[..i].contains(a) {
                return bad(format!("SNR level {a} listed twice"));
            }
        }
        if self.mix.noise_kind == NoiseKind::Lung && self.lung_manifest.is_none() {
            return bad("lung noise needs `lung_manifest`".into());
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !t.optimizer.eq_ignore_ascii_case("adam") {
            return bad(format!("unsupported optimizer {:?}; only Adam is implemented", t.optimizer));
        }
        if t.loss != "categorical_crossentropy" {
            return bad(format!("unsupported loss {:?}", t.loss));
        }
        if !(t.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.folds == 1 && !(t.validation_fraction > 0.0 && t.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)".into());
        }
        if !self.conditions().iter().any(|(name, _)| *name == t.training_condition) {
            return bad(format!("training_condition {:?} is not clean or a configured SNR level", t.training_condition));
        }
        if self.timing.enabled && (self.timing.n_samples == 0 || self.timing.repetitions == 0) {
            return bad("timing needs n_samples > 0 and repetitions > 0".into());
        }
        self.model.validate()?;
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads and validates a config, applying `--seed` and [`WORK_DIR_ENV`].
pub fn load_experiment(path: &Path, options: RunOptions) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad_json = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(bad_json)?;
    // `--seed` also satisfies a config that omits the seed.
    if let (Some(seed), Some(obj)) = (options.seed, value.as_object_mut()) {
        obj.insert("seed".into(), seed.into());
    }
    let config: ExperimentConfig = serde_json::from_value(value).map_err(bad_json)?;
    config.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let heart_manifest = resolve(base, &config.heart_manifest);
    let lung_manifest = config.lung_manifest.as_deref().map(|p| resolve(base, p));
    for p in std::iter::once(&heart_manifest).chain(lung_manifest.as_ref()) {
        if !p.is_file() {
            return Err(CliError::Config(format!("manifest not found: {}", p.display())));
        }
    }
    let work_dir = match std::env::var_os(WORK_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => resolve(base, &config.work_dir),
    };
    Ok(Experiment {
        config,
        heart_manifest,
        lung_manifest,
        work_dir,
        options,
    })
}
