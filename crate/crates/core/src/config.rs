//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{Ablation, AdaptConfig, Method};
use crate::augment::PseudoLabelMenu;
use crate::data::{ShapegridConfig, StreamSetting, StreamSpec};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::selection::{EmConfig, Perturbation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub position_jitter: f64,
    pub hue_jitter: f64,
    pub scale_jitter: f64,
    pub train_size: usize,
    pub val_size: usize,
    /// Test pool size; defaults to exactly what the stream consumes.
    pub test_size: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = ShapegridConfig::default();
        Self {
            classes: g.classes,
            position_jitter: g.position_jitter,
            hue_jitter: g.hue_jitter,
            scale_jitter: g.scale_jitter,
            train_size: 4000,
            val_size: 1000,
            test_size: None,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn shapegrid(&self) -> ShapegridConfig {
        ShapegridConfig {
            classes: self.classes,
            position_jitter: self.position_jitter,
            hue_jitter: self.hue_jitter,
            scale_jitter: self.scale_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random horizontal flips of training images.
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            flip_augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub gamma: f64,
    pub perturbation: Perturbation,
    pub em: EmConfig,
    /// Number of training images used as the source set.
    pub source_size: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.75,
            perturbation: Perturbation::default(),
            em: EmConfig::default(),
            source_size: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleSampleConfig {
    /// Buffer size `b`.
    pub buffer: usize,
    /// Update frequency `k`: one update every `round(b / k)` samples.
    pub freq: f64,
    /// Batch size the learning rates were tuned for.
    pub base_batch: usize,
}

impl Default for SingleSampleConfig {
    fn default() -> Self {
        Self {
            buffer: 64,
            freq: 1.0,
            base_batch: 64,
        }
    }
}

impl SingleSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer == 0 {
            return Err(Error::Config("single_sample.buffer must be at least 1".into()));
        }
        if !(self.freq > 0.0 && self.freq.is_finite()) {
            return Err(Error::Config(format!("single_sample.freq = {} must be positive", self.freq)));
        }
        if self.base_batch == 0 {
            return Err(Error::Config("single_sample.base_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Samples between updates, `round(b / k)`, at least 1.
    pub fn cadence(&self) -> usize {
        ((self.buffer as f64 / self.freq).round() as usize).max(1)
    }

    /// Learning-rate multiplier `b / base_batch`.
    pub fn lr_scale(&self) -> f64 {
        self.buffer as f64 / self.base_batch as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Ablation>,
    pub gammas: Vec<f64>,
    pub menus: Vec<PseudoLabelMenu>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Ablation::ALL.to_vec(),
            gammas: vec![0.999, 0.95, 0.9, 0.75, 0.5, 0.25, 0.0],
            menus: PseudoLabelMenu::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cached datasets (`train`, `val`, `test` subdirectories).
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// Record wall-clock milliseconds per batch; off keeps metrics files
    /// byte-reproducible.
    pub wall_clock: bool,
    /// Clean source batches of consistency-only warm-up before deployment.
    pub warmup_batches: usize,
    /// Batches per evaluation chunk for the clean-error measurements.
    pub eval_batch: usize,
    pub arch: Option<ArchSpec>,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub selection: SelectionConfig,
    pub adapt: AdaptConfig,
    pub stream: StreamSpec,
    pub single_sample: SingleSampleConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Dplot,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            precision: Precision::F32,
            wall_clock: false,
            warmup_batches: 0,
            eval_batch: 256,
            arch: None,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            selection: SelectionConfig::default(),
            adapt: AdaptConfig::default(),
            stream: StreamSpec {
                setting: StreamSetting::Gradual,
                kinds: crate::data::CorruptionKind::ALL.to_vec(),
                batches_per_segment: 20,
                batch_size: 64,
                seed: 0,
            },
            single_sample: SingleSampleConfig::default(),
            ablation: AblationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
            .clone()
            .unwrap_or_else(|| ArchSpec::desk(self.data.classes))
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.single_sample.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.selection.gamma) {
            return Err(Error::Config(format!("selection.gamma = {} outside [0, 1]", self.selection.gamma)));
        }
        if let Some(g) = self.ablation.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::Config(format!("ablation.gammas contains {g}, outside [0, 1]")));
        }
        if self.stream.batch_size == 0 || self.stream.batches_per_segment == 0 || self.stream.kinds.is_empty() {
            return Err(Error::Config(
                "stream.batch_size, stream.batches_per_segment and stream.kinds must be non-empty".into(),
            ));
        }
        if self.pretrain.batch_size < 2 || self.selection.em.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive (pretrain.batch_size >= 2)".into()));
        }
        if let Some(a) = &self.arch {
            if a.num_classes != self.data.classes {
                return Err(Error::Config(format!(
                    "arch.num_classes = {} but data.classes = {}",
                    a.num_classes, self.data.classes
                )));
            }
        }
        Ok(())
    }

    /// Test pool size actually generated.
    pub fn test_size(&self) -> usize {
        self.data.test_size.unwrap_or_else(|| self.stream.num_images())
    }
}
