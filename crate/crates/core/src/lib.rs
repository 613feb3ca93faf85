//! Modality hallucination for wearable activity recognition.
//!
//! Multi-stream classifiers are trained on an inertial stream plus
//! privileged modalities (skeleton, video). Hallucination networks then learn
//! to reproduce the privileged features from inertial data alone, so that
//! inference needs only the wearable sensor.

pub mod bundle;
pub mod datasets;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod kernels;
pub mod models;
pub mod tensor;
pub mod training;

mod io_util;

pub use error::{HalluxError, Result};
pub use graph::{finite_diff_check, Bindings, ExprGraph, GradientMap, GraphBuilder, NodeId, Op};
pub use tensor::{Scalar, Tensor};
