//! Keypoint confidence calibration.
//!
//! OKS metrics and ranking evaluation, the closed-form confidences that
//! heatmap and regression estimators converge to under Gaussian annotation
//! noise, Monte-Carlo checks of those forms, a learned calibration head, and
//! the file formats and commands behind the `posecal` binary.

pub mod ccnet;
pub mod error;
pub mod io;
pub mod oks;
pub mod pipeline;
pub mod ranking;
pub mod sim;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use oks::{GroundTruthInstance, KeypointSpec, Point, PredictedInstance};
pub use ranking::{EvalConfig, EvalReport};
pub use theory::AnnotationModel;
