//! Emotion recognition from OpenPose body and face keypoints.
//!
//! The crate turns per-frame OpenPose JSON files into labeled datasets,
//! trains small fully-connected networks (7-class classification or
//! valence/arousal regression) with hand-written backpropagation, and
//! evaluates them with macro-F1 and the concordance correlation coefficient.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod emotion;
pub mod keypoint_io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod train;
