//! Flow-guided mutual attention for video person re-identification.
//!
//! The crate bundles everything needed to train and evaluate a two-stream
//! (appearance + optical flow) re-identification network at desk scale:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode differentiation;
//! - [`optflow`]: Horn–Schunck dense flow and Middlebury `.flo` files;
//! - [`backbone`]: a five-stage convolutional stream with optional
//!   squeeze-excitation;
//! - [`attention`]: mutual attention between the two streams and the
//!   single-stream flow-gated baseline;
//! - [`aggregation`]: weighted feature addition, average pooling, temporal
//!   attention and the fusion head;
//! - [`training`]: model composition, identity + batch-hard triplet losses,
//!   Adam;
//! - [`evaluation`]: cross-camera CMC and mAP;
//! - [`data`]: a synthetic moving-sprite benchmark and on-disk manifests;
//! - [`config`] and [`experiment`]: run configuration and end-to-end runs.

pub mod aggregation;
pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod image;
pub mod optflow;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, Var};
