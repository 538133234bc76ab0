//! Flat run configuration: defaults, then config files, then flags.

use std::path::{Path, PathBuf};

use avin_core::graphcut::{DEFAULT_EPSILON, DEFAULT_TAU_M};
use avin_core::induction::{CutSource, InductionConfig, InductionPath};
use avin_core::localize::{DEFAULT_AGREEMENT, DEFAULT_DECISION_THRESHOLD};
use avin_core::losses::{LossConfig, DEFAULT_TAU_C, DEFAULT_THETA};
use avin_core::train::{SyntheticDatasetSpec, TrainConfig, VisualVariant, DEFAULT_BACKBONE_LR, DEFAULT_PROJECTOR_LR};
use avin_core::trimap::{MaskMode, ThresholdConfig, DEFAULT_TAU_S};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};

/// Every tunable of the pipeline as one flat key-value document.
///
/// `tp`, `tn` and `visual_variant` default per induction path when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub path: InductionPath,
    pub cut_on: CutSource,
    pub tau_m: f64,
    pub epsilon: f64,

    pub tp: Option<f64>,
    pub tn: Option<f64>,
    pub tau_s: f64,
    pub mask_mode: MaskMode,

    pub tau_c: f64,
    pub theta: f64,
    pub weighted: bool,
    pub stop_grad: bool,

    pub visual_variant: Option<VisualVariant>,
    pub common_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_projector: f64,
    pub lr_backbone: f64,
    pub shuffle: bool,

    /// Decision threshold `t` for cIoU.
    pub threshold: f64,
    /// Annotator agreement `C` of the consensus map.
    pub agreement: usize,
    /// Integer bilinear upsampling applied to heatmaps and boxes before evaluation.
    pub eval_upsample: usize,

    pub classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub height: usize,
    pub width: usize,
    pub rect_min: usize,
    pub rect_max: usize,
    pub noise: f64,
    pub background_scale: f64,
    pub annotators: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticDatasetSpec::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            path: InductionPath::Pooled,
            cut_on: CutSource::Embedding,
            tau_m: DEFAULT_TAU_M,
            epsilon: DEFAULT_EPSILON,
            tp: None,
            tn: None,
            tau_s: DEFAULT_TAU_S,
            mask_mode: MaskMode::TriMap,
            tau_c: DEFAULT_TAU_C,
            theta: DEFAULT_THETA,
            weighted: true,
            stop_grad: true,
            visual_variant: None,
            common_dim: train.common_dim,
            hidden_dim: train.hidden_dim,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr_projector: DEFAULT_PROJECTOR_LR,
            lr_backbone: DEFAULT_BACKBONE_LR,
            shuffle: true,
            threshold: DEFAULT_DECISION_THRESHOLD,
            agreement: DEFAULT_AGREEMENT,
            eval_upsample: 1,
            classes: synth.classes,
            visual_dim: synth.visual_dim,
            audio_dim: synth.audio_dim,
            height: synth.height,
            width: synth.width,
            rect_min: synth.rect_min,
            rect_max: synth.rect_max,
            noise: synth.noise,
            background_scale: synth.background_scale,
            annotators: synth.annotators,
            n_train: synth.n_train,
            n_eval: synth.n_eval,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Overlays the keys present in the file at `path`.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let overlay: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&*self).expect("flat config serializes");
        base.extend(overlay);
        *self = base
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
        Ok(())
    }

    pub fn thresholds(&self) -> ThresholdConfig {
        let base = match self.path {
            InductionPath::Pooled => ThresholdConfig::pooled(),
            InductionPath::TokenCutMasked => ThresholdConfig::masked(),
        };
        ThresholdConfig {
            tp: self.tp.unwrap_or(base.tp),
            tn: self.tn.unwrap_or(base.tn),
            tau_s: self.tau_s,
        }
    }

    pub fn induction(&self) -> InductionConfig {
        InductionConfig {
            path: self.path,
            tau_m: self.tau_m,
            epsilon: self.epsilon,
            cut_on: self.cut_on,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::for_path(self.path);
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_projector: self.lr_projector,
            lr_backbone: self.lr_backbone,
            common_dim: self.common_dim,
            hidden_dim: self.hidden_dim,
            visual_variant: self.visual_variant.unwrap_or(base.visual_variant),
            induction: self.induction(),
            thresholds: self.thresholds(),
            mask_mode: self.mask_mode,
            loss: LossConfig {
                tau_c: self.tau_c,
                theta: self.theta,
                weighted: self.weighted,
                stop_grad: self.stop_grad,
            },
            eval_threshold: self.threshold,
            agreement: self.agreement,
            shuffle: self.shuffle,
            seed: self.seed,
        }
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            classes: self.classes,
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            height: self.height,
            width: self.width,
            rect_min: self.rect_min,
            rect_max: self.rect_max,
            noise: self.noise,
            background_scale: self.background_scale,
            annotators: self.annotators,
            n_train: self.n_train,
            n_eval: self.n_eval,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_upsample == 0 {
            return Err(CliError::Usage("eval_upsample must be at least 1".into()));
        }
        self.train_config().validate().context(|| "configuration".into())
    }
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got {s:?}")),
    }
}

/// Parses a snake_case enum value, also accepting dashes.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    toml::Value::String(s.replace('-', "_"))
        .try_into()
        .map_err(|e: toml::de::Error| e.message().to_string())
}

/// Command-line overrides, one flag per config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Config files applied in order before the flags.
    #[arg(long = "config", value_name = "FILE")]
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// pooled or token-cut-masked
    #[arg(long, value_parser = parse_enum::<InductionPath>)]
    pub path: Option<InductionPath>,
    /// projected or embedding
    #[arg(long, value_parser = parse_enum::<CutSource>)]
    pub cut_on: Option<CutSource>,
    #[arg(long)]
    pub tau_m: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tp: Option<f64>,
    #[arg(long)]
    pub tn: Option<f64>,
    #[arg(long)]
    pub tau_s: Option<f64>,
    /// tri-map or bi-map
    #[arg(long, value_parser = parse_enum::<MaskMode>)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_parser = parse_switch, value_name = "on|off")]
    pub weighted: Option<bool>,
    #[arg(long, value_parser = parse_switch, value_name = "on|off")]
    pub stop_grad: Option<bool>,
    /// single-linear or linear-relu-linear
    #[arg(long, value_parser = parse_enum::<VisualVariant>)]
    pub visual_variant: Option<VisualVariant>,
    #[arg(long)]
    pub common_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_projector: Option<f64>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long, value_parser = parse_switch, value_name = "on|off")]
    pub shuffle: Option<bool>,
    #[arg(long, short = 't')]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub agreement: Option<usize>,
    #[arg(long)]
    pub eval_upsample: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub visual_dim: Option<usize>,
    #[arg(long)]
    pub audio_dim: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub rect_min: Option<usize>,
    #[arg(long)]
    pub rect_max: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub background_scale: Option<f64>,
    #[arg(long)]
    pub annotators: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
}

macro_rules! overlay {
    ($args:expr, $cfg:expr; $($plain:ident),*; $($opt:ident),*) => {
        $(if let Some(v) = $args.$plain { $cfg.$plain = v; })*
        $(if let Some(v) = $args.$opt { $cfg.$opt = Some(v); })*
    };
}

impl ConfigArgs {
    /// Defaults, then each `--config` file, then the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for file in &self.files {
            cfg.merge_file(file)?;
        }
        overlay!(self, cfg;
            seed, path, cut_on, tau_m, epsilon, tau_s, mask_mode, tau_c, theta, weighted, stop_grad,
            common_dim, hidden_dim, epochs, batch_size, lr_projector, lr_backbone, shuffle, threshold,
            agreement, eval_upsample, classes, visual_dim, audio_dim, height, width, rect_min, rect_max,
            noise, background_scale, annotators, n_train, n_eval;
            tp, tn, visual_variant);
        Ok(cfg)
    }
}
