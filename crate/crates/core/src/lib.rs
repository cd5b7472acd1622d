//! Room-scale 3D-aware generation with anchor-based local pose alignment:
//! geometry, tri-plane fields, networks, samplers, losses, a synthetic room
//! world, the joint trainer and evaluation.

pub mod error;
pub mod eval;
pub mod field;
pub mod losses;
pub mod lpa;
pub mod nets;
pub mod samplers;
pub mod synthroom;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{GtRecord, PoseMae};
pub use field::{PlaneLayout, RenderConfig, TriPlaneField};
pub use lpa::{AnchorSystem, GlobalCamera, LpaPose, Rays, RoomBox};
pub use nets::{ModelConfig, PoseBins};
pub use samplers::SamplerConfig;
pub use synthroom::{Dataset, GroundTruth, ScenePriors, SceneSpec};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
