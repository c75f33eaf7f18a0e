//! Synthetic identities, cascade training, retrieval evaluation and
//! gradient checks.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod train;

pub use config::TrainConfig;
pub use data::{generate_dataset, Dataset, DatasetSpec, Sample, SyntheticIdentitySpec};
pub use eval::{evaluate_checkpoint, evaluate_retrieval, retrieval_metrics, RetrievalMetrics};
pub use gradsuite::{gradcheck_target, GradTarget, GRADCHECK_EPS, GRADCHECK_TOLERANCE};
pub use model::CascadeModel;
pub use train::{train, LossRow, Trainer, CSV_HEADER};
