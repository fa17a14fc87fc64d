//! Out-of-body frame detection for endoscopic video.
//!
//! A compact CNN-LSTM classifier (inverted-residual backbone, layer norm,
//! dropout, LSTM, linear + sigmoid head) trained from scratch, together with
//! the frame ingestion, metrics and redaction pipeline around it.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
pub use metrics::{ConfusionMatrix, MetricSet};
pub use model::{ModelConfig, OoBNetParams};
pub use pipeline::{PredictionTrace, RedactionMode, RedactionPolicy, Segment};
pub use train::TrainConfig;
