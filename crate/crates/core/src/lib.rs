//! Caption-guided textual inversion and contextual feature fusion for person
//! re-identification, at desk scale.
//!
//! The pipeline: a synthetic attribute-driven person dataset with rendered
//! captions, tiny image/text encoders sharing a joint space, a caption-guided
//! inversion network that turns each image into a pseudo-word inside the
//! prompt "a photo of a * person", a cross-attention fusion module, the
//! contrastive/identity/triplet objectives, a trainer and a retrieval
//! evaluator (mAP and CMC).

pub mod ablation;
pub mod caption;
pub mod cff;
pub mod cgi;
pub mod config;
pub mod encoders;
pub mod losses;
pub mod model;
pub mod error;
pub mod evaluator;
pub mod trainer;
pub mod nn;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
