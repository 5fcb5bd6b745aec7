//! Adaptive knowledge distillation for small vision transformers.
//!
//! The crate bundles everything needed to study catastrophic forgetting and
//! its mitigation at desk scale:
//!
//! - [`vit`]: a seed-deterministic reference transformer with manual
//!   forward/backward passes and exposed internal components.
//! - [`losses`]: tempered softmax, soft/hard losses, the adaptive
//!   epoch schedule, internal-parameter stacking and the cosine embedding
//!   loss, plus the three total-loss combiners.
//! - [`teachers`]: frozen prior-copy and soft-voting ensemble teachers.
//! - [`trainer`]: supervised fine-tuning and source-free adaptation loops
//!   with Adam, seeded augmentation and per-epoch loss records.
//! - [`data`]: manifest ingestion, per-subject splits, domain filters and a
//!   deterministic synthetic two-domain generator.
//! - [`explain`]: Grad-CAM on the token grid and deep feature factorization
//!   via non-negative matrix factorization.

pub mod data;
pub mod error;
pub mod explain;
pub mod losses;
pub mod scalar;
pub mod teachers;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use data::{DatasetManifest, Hand, SampleRecord, Side, SplitSpec};
pub use losses::{
    CosineTarget, DistillConfig, InternalEmbedding, LossBreakdown, ProbVector, Strategy,
};
pub use teachers::{TeacherHandle, TeacherKind};
pub use trainer::{EpochRecord, ManifestAccess, RunResult, TrainConfig};
pub use vit::{CaptureSite, ImageBatch, InternalParameters, TinyViT, TokenStates, ViTConfig};
