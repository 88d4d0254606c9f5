//! Universal adversarial perturbations and their detection from hidden-layer
//! activation statistics.
//!
//! The crate bundles a small CNN with a reverse-mode autodiff tape, the
//! perturbation generators (masks, patches, procedural noise and a
//! defense-aware variant), the detector, evaluation metrics and a latency
//! harness.

pub mod attacks;
pub mod autodiff;
mod binfmt;
pub mod data;
pub mod detector;
pub mod error;
pub mod kernels;
pub mod latency;
pub mod metrics;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use attacks::{AttackConfig, MaskPerturbation, PatchPerturbation, Perturbation, TransformDist};
pub use data::{ImageBatch, SplitSpec};
pub use detector::{ActivationBaseline, Aggregation, Detector, DetectorConfig};
pub use error::{Error, Result};
pub use metrics::{EvalReport, RocCurve};
pub use model::{Architecture, Checkpoint, SmallCnn, TapLayer};
pub use tensor::Tensor;
