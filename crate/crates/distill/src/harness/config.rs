//! Run configuration: experiment presets, term gating, and the TOML schema
//! consumed by `distill run`.

use crate::align::{build_layer_map, build_schedule, LayerMap, LayerSchedule, ScheduleKind};
use crate::divergence::{DivergenceKind, HiddenLossKind};
use crate::harness::optim::AdamConfig;
use crate::harness::HarnessError;
use crate::losses::{LossWeights, TermFlags};
use crate::model::{ModelSpec, SamplingParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Experiment presets mirroring the evaluated training variants: no
/// training, fine-tuning only, top-layer distillation, skip-layer
/// distillation, full layer-wise distillation, and layer-wise plus acoustic
/// preservation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Baseline,
    SftOnly,
    TopKd,
    SkipKd(usize),
    LayerKd,
    LayerAcKd,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self, HarnessError> {
        match name {
            "baseline" => Ok(Self::Baseline),
            "sft_only" => Ok(Self::SftOnly),
            "top_kd" => Ok(Self::TopKd),
            "layer_kd" => Ok(Self::LayerKd),
            "layer_ac_kd" => Ok(Self::LayerAcKd),
            other => {
                if let Some(k) = other.strip_prefix("skip_kd:") {
                    let k = k
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("bad preset {other:?}")))?;
                    Ok(Self::SkipKd(k))
                } else {
                    Err(HarnessError::Config(format!("unknown preset {other:?}")))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Baseline => "baseline".into(),
            Self::SftOnly => "sft_only".into(),
            Self::TopKd => "top_kd".into(),
            Self::SkipKd(k) => format!("skip_kd:{k}"),
            Self::LayerKd => "layer_kd".into(),
            Self::LayerAcKd => "layer_ac_kd".into(),
        }
    }

    /// Which loss terms the preset enables.
    pub fn flags(&self) -> TermFlags {
        match self {
            Self::Baseline => TermFlags {
                top: false,
                layer: false,
                ac: false,
                sft: false,
            },
            Self::SftOnly => TermFlags {
                top: false,
                layer: false,
                ac: false,
                sft: true,
            },
            Self::TopKd => TermFlags {
                top: true,
                layer: false,
                ac: false,
                sft: true,
            },
            Self::SkipKd(_) | Self::LayerKd => TermFlags {
                top: true,
                layer: true,
                ac: false,
                sft: true,
            },
            Self::LayerAcKd => TermFlags {
                top: true,
                layer: true,
                ac: true,
                sft: true,
            },
        }
    }

    /// The layer schedule the preset implies, when it uses one.
    pub fn schedule_kind(&self) -> Option<ScheduleKind> {
        match self {
            Self::Baseline | Self::SftOnly => None,
            Self::TopKd => Some(ScheduleKind::TopOnly),
            Self::SkipKd(k) => Some(ScheduleKind::OneInK(*k)),
            Self::LayerKd | Self::LayerAcKd => Some(ScheduleKind::All),
        }
    }

    pub fn trains(&self) -> bool {
        !matches!(self, Self::Baseline)
    }
}

fn default_student() -> ModelSpec {
    ModelSpec {
        layers: 7,
        hidden_dim: 32,
        heads: 2,
        vocab_size: 64,
        max_seq: 128,
        seed: 1,
    }
}

fn default_teacher() -> ModelSpec {
    ModelSpec {
        layers: 9,
        hidden_dim: 48,
        heads: 3,
        vocab_size: 64,
        max_seq: 128,
        seed: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    /// Token-level measure: "jsd", "kl", "rkl", or "skl:<lambda>".
    pub kd: String,
    /// Hidden-state measure: "softmax_jsd" or "mse".
    pub hidden: String,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            kd: "jsd".into(),
            hidden: "softmax_jsd".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: String,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Explicit step count; when absent, derived from `epochs`.
    pub steps: Option<usize>,
    pub epochs: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            learning_rate: 1e-3,
            warmup_steps: 20,
            steps: None,
            epochs: 3.0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainingConfig {
    pub steps: Option<usize>,
    pub epochs: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Load a pre-trained teacher checkpoint instead of training one.
    pub load: Option<PathBuf>,
}

impl Default for TeacherTrainingConfig {
    fn default() -> Self {
        Self {
            steps: None,
            epochs: 3.0,
            learning_rate: 3e-3,
            warmup_steps: 20,
            batch_size: 8,
            load: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_audio: PathBuf,
    pub train_text: PathBuf,
    pub eval_audio: PathBuf,
    pub eval_text: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Run generation-based accuracy scoring. Divergence diagnostics are
    /// always computed.
    pub generate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 24,
            generate: true,
        }
    }
}

/// Full experiment description; the TOML keys follow these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_student")]
    pub student: ModelSpec,
    #[serde(default = "default_teacher")]
    pub teacher: ModelSpec,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub divergence: DivergenceConfig,
    /// Optional explicit schedule: "all" | "top" | "one_in_k:<k>". Must
    /// agree with the preset when both are given.
    #[serde(default)]
    pub layers: Option<String>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sampling: SamplingParams,
    pub data: DataConfig,
    #[serde(default)]
    pub teacher_training: TeacherTrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seed() -> u64 {
    7
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Validate everything that can be checked before any compute and
    /// resolve the preset into flags, schedule, and divergence kinds.
    pub fn resolve(&self) -> Result<ResolvedConfig, HarnessError> {
        let preset = Preset::parse(&self.preset)?;
        self.student
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.teacher
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.student.vocab_size != self.teacher.vocab_size {
            return Err(HarnessError::Config(format!(
                "teacher and student must share one vocabulary: {} vs {}",
                self.teacher.vocab_size, self.student.vocab_size
            )));
        }
        self.weights
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.optimizer.kind != "adam" {
            return Err(HarnessError::Config(format!(
                "unsupported optimizer kind {:?}",
                self.optimizer.kind
            )));
        }
        if self.optimizer.batch_size == 0 || self.teacher_training.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be at least 1".into()));
        }
        let kd = DivergenceKind::parse(&self.divergence.kd)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let hidden = HiddenLossKind::parse(&self.divergence.hidden)
            .map_err(|e| HarnessError::Config(e.to_string()))?;

        let implied = preset.schedule_kind();
        if let Some(explicit) = &self.layers {
            let parsed = ScheduleKind::parse(explicit)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            match implied {
                Some(kind) if kind == parsed => {}
                Some(kind) => {
                    return Err(HarnessError::Config(format!(
                        "preset {:?} implies layers {:?} but config says {:?}",
                        preset.name(),
                        kind.name(),
                        parsed.name()
                    )));
                }
                None => {
                    return Err(HarnessError::Config(format!(
                        "preset {:?} does not use a layer schedule, drop the layers key",
                        preset.name()
                    )));
                }
            }
        }
        let schedule_kind = implied.unwrap_or(ScheduleKind::TopOnly);
        let schedule = build_schedule(schedule_kind, self.student.layers)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let map = build_layer_map(self.student.layers, self.teacher.layers)
            .map_err(|e| HarnessError::Config(e.to_string()))?;

        Ok(ResolvedConfig {
            preset,
            flags: preset.flags(),
            kd,
            hidden,
            schedule,
            map,
            raw: self.clone(),
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.optimizer.learning_rate,
            warmup_steps: self.optimizer.warmup_steps,
            ..Default::default()
        }
    }

    pub fn teacher_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.teacher_training.learning_rate,
            warmup_steps: self.teacher_training.warmup_steps,
            ..Default::default()
        }
    }
}

/// A validated configuration with the preset expanded.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: RunConfig,
    pub preset: Preset,
    pub flags: TermFlags,
    pub kd: DivergenceKind,
    pub hidden: HiddenLossKind,
    pub schedule: LayerSchedule,
    pub map: LayerMap,
}

impl ResolvedConfig {
    /// Training steps: explicit, or derived from epochs over `n` items.
    pub fn train_steps(&self, n: usize) -> usize {
        if !self.preset.trains() {
            return 0;
        }
        match self.raw.optimizer.steps {
            Some(s) => s,
            None => epochs_to_steps(self.raw.optimizer.epochs, n, self.raw.optimizer.batch_size),
        }
    }

    pub fn teacher_steps(&self, n: usize) -> usize {
        match self.raw.teacher_training.steps {
            Some(s) => s,
            None => epochs_to_steps(
                self.raw.teacher_training.epochs,
                n,
                self.raw.teacher_training.batch_size,
            ),
        }
    }
}

fn epochs_to_steps(epochs: f64, n: usize, batch: usize) -> usize {
    ((epochs * n as f64) / batch.max(1) as f64).ceil() as usize
}
