//! Run configuration: one TOML document covering every model and run knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::LoadOptions;
use crate::downstream::{FinetuneSetup, SegHeadConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pretrain::{PretrainHyper, PretrainSetup, ProjectorConfig};
use crate::recon::DecoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Per-class loss weights for classes 0..=4; unweighted when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Share of pairs held out for validation and evaluation.
    pub validation_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { learning_rate: 1e-4, batch_size: 4, class_weights: None, validation_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// xBD-layout dataset directory.
    pub root: Option<PathBuf>,
    /// Generate this many synthetic pairs instead of reading `root`.
    pub synthetic: Option<usize>,
    pub buildings_per_scene: usize,
    /// Class given to the "un-classified" subtype.
    pub unclassified_class: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: None, synthetic: None, buildings_per_scene: 5, unclassified_class: 1 }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { unclassified_class: self.unclassified_class }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub labeled_fraction: f64,
    pub out: PathBuf,
    /// Input checkpoint: stage-1 init for finetune, model for evaluate/visualize.
    pub checkpoint: Option<PathBuf>,
    /// Continue a pre-training run from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop pre-training once the step counter reaches this value.
    pub max_steps: Option<u64>,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Evaluate ground truth against itself instead of a model.
    pub oracle: bool,
    /// Pair shown by `visualize`, as an index into the sorted pair list.
    pub visualize_index: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            pretrain_epochs: 2,
            finetune_epochs: 30,
            labeled_fraction: 0.2,
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            resume: None,
            max_steps: None,
            checkpoint_every: 0,
            oracle: false,
            visualize_index: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub disable_reconstruction: bool,
    pub disable_centering: bool,
    pub freeze_encoder: bool,
    pub random_init: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub projector: ProjectorConfig,
    pub pretrain: PretrainHyper,
    pub decoder: DecoderConfig,
    pub head: SegHeadConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub run: RunSection,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.augment.output_size = cfg.encoder.input_size;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        let mut augment = self.augment.clone();
        augment.output_size = self.encoder.input_size;
        PretrainSetup {
            encoder: self.encoder.clone(),
            augment,
            projector: self.projector.clone(),
            decoder: self.decoder.clone(),
            hyper: self.pretrain.clone(),
            disable_reconstruction: self.ablation.disable_reconstruction,
            disable_centering: self.ablation.disable_centering,
        }
    }

    pub fn finetune_setup(&self) -> FinetuneSetup {
        FinetuneSetup {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            learning_rate: self.finetune.learning_rate,
            freeze_encoder: self.ablation.freeze_encoder,
            class_weights: self.finetune.class_weights.clone(),
        }
    }

    /// Every check that can run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.pretrain_setup().validate()?;
        self.finetune_setup().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.run.labeled_fraction > 0.0 && self.run.labeled_fraction <= 1.0) {
            return bad(format!("run.labeled_fraction {} outside (0, 1]", self.run.labeled_fraction));
        }
        let v = self.finetune.validation_fraction;
        if !(0.0..1.0).contains(&v) {
            return bad(format!("finetune.validation_fraction {v} outside [0, 1)"));
        }
        if self.finetune.batch_size == 0 {
            return bad("finetune.batch_size must be positive".into());
        }
        if !(1..=4).contains(&self.data.unclassified_class) {
            return bad(format!("data.unclassified_class {} outside 1..=4", self.data.unclassified_class));
        }
        if let Some(n) = self.data.synthetic {
            if n == 0 {
                return bad("data.synthetic must be positive".into());
            }
            if self.encoder.input_size < 32 {
                return bad(format!("synthetic scenes need encoder.input_size >= 32, got {}", self.encoder.input_size));
            }
        }
        Ok(())
    }
}
