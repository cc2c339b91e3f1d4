//! Dense describe-and-detect local features.
//!
//! A VGG-style backbone turns an image into a feature map whose channel
//! vectors serve as descriptors and whose responses drive keypoint
//! detection. The crate also provides matching, a score-weighted triplet
//! loss with its gradient, multi-view correspondence generation and a
//! matching-accuracy harness.

pub mod container;
pub mod convnet;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod keypoints;
pub mod loss;
pub mod matcher;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod tensor;

pub use error::{D2Error, ErrorClass, Result};
pub use image::Image;
pub use keypoints::Keypoint;
pub use tensor::Tensor3;
