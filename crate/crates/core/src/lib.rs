//! Two-stage self-supervised building damage assessment.
//!
//! Stage 1 pre-trains a windowed-attention encoder as the student of a
//! student/teacher pair (self-distillation with centering and sharpening)
//! plus an auxiliary reconstruction decoder. Stage 2 reuses the encoder in a
//! siamese segmentation network over pre/post-event image pairs that emits
//! 5-class damage maps. Everything is differentiated by a small tape-based
//! reverse-mode engine and is generic over `f32`/`f64`.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod pretrain;
pub mod recon;
pub mod scalar;
pub mod spatial;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::RunConfig;
pub use data::{DatasetManifest, PolygonAnnotation, ScenePair};
pub use downstream::{DamageMask, FinetuneSetup, FinetuneState, LocalizationMask, PredictionMap, SegHeadConfig};
pub use encoder::{EncoderConfig, FeatureMap, FeaturePyramid};
pub use error::{Error, Result};
pub use image::Image;
pub use metrics::{ConfusionCounts, F1Report};
pub use params::ParameterSet;
pub use pretrain::{PretrainHyper, PretrainSetup, ProjectorConfig, StepLog, TwinState};
pub use recon::DecoderConfig;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type ParameterSet32 = ParameterSet<f32>;
pub type ParameterSet64 = ParameterSet<f64>;
pub type TwinState32 = TwinState<f32>;
pub type TwinState64 = TwinState<f64>;
pub type FinetuneState32 = FinetuneState<f32>;
pub type FinetuneState64 = FinetuneState<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
