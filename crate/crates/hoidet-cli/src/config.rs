//! Run configuration: one JSON document covering every subcommand, with
//! command-line flag overrides. The post-override ("resolved") document is
//! copied into the run directory; re-running a subcommand from that copy
//! reproduces the run byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hoidet::attention::AttentionConfig;
use hoidet::data_io::SynthConfig;
use hoidet::eval::SplitMode;
use hoidet::infer::InferConfig;
use hoidet::model::ModelConfig;
use hoidet::tensor::Real;
use hoidet::train::TrainConfig;

use crate::errors::{CliError, Ctx, Result};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// How the verb classifier `E_v` is constructed when no prebuilt file is
/// supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMethod {
    /// Visual semantic arithmetic over region-feature bags.
    Arithmetic,
    /// Normalized sentence-embedding fixture rows.
    Sentence,
    /// Average of each verb's interaction-classifier rows.
    HoiAverage,
}

impl ClassifierMethod {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierMethod::Arithmetic => "arithmetic",
            ClassifierMethod::Sentence => "sentence",
            ClassifierMethod::HoiAverage => "hoi-average",
        }
    }
}

/// Input artifact locations. Relative paths resolve against the working
/// directory of the invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    /// Dataset directory (as written by `gen-synth`).
    pub data: Option<PathBuf>,
    /// Model checkpoint directory (as written by `train-toy`).
    pub params: Option<PathBuf>,
    /// Prebuilt verb classifier `e_v.hctf`.
    pub classifier: Option<PathBuf>,
    /// Detections JSONL (as written by `infer`).
    pub detections: Option<PathBuf>,
    /// Split JSON restricting `eval-map` to its unseen categories.
    pub split: Option<PathBuf>,
    /// Explicit unseen-category list for `make-splits` in `uc-file` mode.
    pub unseen_file: Option<PathBuf>,
}

/// The complete configuration surface of every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    /// Orchestration seed: split construction, validation split, subsampling.
    pub seed: u64,
    /// Model parameter initialization seed (`train-toy`).
    pub init_seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub classifier_method: ClassifierMethod,
    /// Training-manifest fraction kept by `subsample` / `train-toy`.
    pub fraction: Real,
    pub split_mode: SplitMode,
    /// Unseen-set size for `make-splits`; `null` means the mode's default.
    pub n_unseen: Option<usize>,
    /// Validation-set size for `make-val-split`; `null` means ⌈N/5⌉.
    pub val_size: Option<usize>,
    /// Worker threads for per-image fan-out; 0 means one per core.
    pub workers: usize,
    pub dump_attention: bool,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = model_matching(&synth);
        Self {
            format_version: RUN_CONFIG_VERSION,
            seed: 0,
            init_seed: 0,
            synth,
            model,
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            classifier_method: ClassifierMethod::Arithmetic,
            fraction: 1.0,
            split_mode: SplitMode::NfUc,
            n_unseen: None,
            val_size: None,
            workers: 0,
            dump_attention: false,
            paths: RunPaths::default(),
        }
    }
}

/// A model whose widths and grids line up with `synth`'s feature tensors.
pub fn model_matching(synth: &SynthConfig) -> ModelConfig {
    ModelConfig {
        clip_dim: synth.dim,
        num_queries: 8,
        num_objects: synth.num_objects,
        instance: AttentionConfig {
            model_dim: synth.inst_dim,
            num_heads: 4,
            ffn_hidden: (2 * synth.inst_dim).max(16),
            num_layers: 3,
            dropout_rate: 0.0,
        },
        interaction: AttentionConfig {
            model_dim: synth.inter_dim,
            num_heads: 4,
            ffn_hidden: (2 * synth.inter_dim).max(16),
            num_layers: 3,
            dropout_rate: 0.0,
        },
        clip_grid: synth.clip_grid,
        det_grid: synth.det_grid,
    }
}

impl RunConfig {
    /// Field-level validity of every section (cross-artifact compatibility
    /// is checked where artifacts meet, in the subcommands).
    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config format version {} unsupported (expected {RUN_CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.synth.validate()?;
        self.model.validate().or_config("model")?;
        self.train.validate()?;
        if !self.infer.alpha.is_finite() {
            return Err(CliError::Config(format!("alpha {}", self.infer.alpha)));
        }
        if !(self.infer.nms_iou > 0.0 && self.infer.nms_iou <= 1.0) {
            return Err(CliError::Config(format!("nms_iou {}", self.infer.nms_iou)));
        }
        if self.infer.keep_top == 0 {
            return Err(CliError::Config("keep_top must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CliError::Config(format!("fraction {}", self.fraction)));
        }
        Ok(())
    }

    /// Loads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .or_config(&format!("config {}", path.display()))?;
        serde_json::from_str(&text).or_config(&format!("config {}", path.display()))
    }
}

/// Flag values that override the loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<Real>,
    pub topk: Option<usize>,
    pub fraction: Option<Real>,
    pub split_mode: Option<SplitMode>,
    pub dump_attention: bool,
    pub workers: Option<usize>,
    pub method: Option<ClassifierMethod>,
    pub n_unseen: Option<usize>,
    pub val_size: Option<usize>,
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub unseen_file: Option<PathBuf>,
}

impl Overrides {
    /// Folds the flags into `cfg`. `--seed` reseeds every randomized stage
    /// so one flag makes the whole run deterministic on that seed.
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.init_seed = s;
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.infer.alpha = a;
            cfg.train.alpha = a;
        }
        if let Some(k) = self.topk {
            cfg.infer.top_k = k;
        }
        if let Some(f) = self.fraction {
            cfg.fraction = f;
        }
        if let Some(m) = self.split_mode {
            cfg.split_mode = m;
        }
        if self.dump_attention {
            cfg.dump_attention = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = self.method {
            cfg.classifier_method = m;
        }
        if let Some(n) = self.n_unseen {
            cfg.n_unseen = Some(n);
        }
        if let Some(v) = self.val_size {
            cfg.val_size = Some(v);
        }
        for (slot, value) in [
            (&mut cfg.paths.data, &self.data),
            (&mut cfg.paths.params, &self.params),
            (&mut cfg.paths.classifier, &self.classifier),
            (&mut cfg.paths.detections, &self.detections),
            (&mut cfg.paths.split, &self.split),
            (&mut cfg.paths.unseen_file, &self.unseen_file),
        ] {
            if value.is_some() {
                *slot = value.clone();
            }
        }
    }
}

/// Load + override + validate in one step.
pub fn resolve(config: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// A required path, by config field name.
pub fn require_path<'a>(slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    slot.as_deref().ok_or_else(|| {
        CliError::Config(format!("missing required path: pass --{name} or set paths.{name}"))
    })
}
