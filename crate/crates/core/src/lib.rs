//! Text-conditioned video segmentation with multi-modal capsule routing.
//!
//! Video and query capsules are routed jointly with EM routing into a grid of
//! per-location class capsules; the winning class's poses are decoded into
//! per-frame segmentation masks. Everything runs on a small tape-based
//! reverse-mode engine ([`graph`], [`ops`]) so the whole pipeline trains on a CPU.

pub mod capsule;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod sentence;
pub mod tensor;
pub mod train;
pub mod video;

pub use capsule::RoutingConfig;
pub use config::RunConfig;
pub use data::{Manifest, QuerySample, Scene, SceneConfig, Splits};
pub use error::{Error, Result};
pub use fusion::Conditioning;
pub use metrics::{EvalMode, MetricReport};
pub use model::{Model, ModelConfig, Prediction};
pub use sentence::{TokenSeq, Vocabulary};
pub use train::{TrainConfig, Trainer};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
