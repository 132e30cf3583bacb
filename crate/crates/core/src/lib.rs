//! Noisy-label learning over feature vectors.
//!
//! A two-layer classifier is trained from scratch on soft pseudo labels.
//! Training fits sharpened labels with a KL term, regularizes with a
//! contrastive loss computed on the classifier's softmax outputs, and
//! replaces the training labels after every epoch with the running mean of
//! the initial labels and all epoch predictions so far.

pub mod datamodel;
pub mod error;
pub mod labels;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
