//! Decorrelated embedding training for cross-view retrieval.
//!
//! A small reverse-mode autodiff engine over dense matrices carries the
//! losses (instance loss, triplet variants, Barlow Twins and the dynamic
//! weighted decorrelation regularizer), a two-branch toy network, the
//! cross-view sampling strategies, a synthetic two-platform data generator
//! and a bidirectional retrieval evaluator.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod sampling;
pub mod synthdata;
pub mod trainer;

pub use autodiff::{Graph, NodeId};
pub use dataset::{CrossViewDataset, ItemId, Platform};
pub use error::{Error, Result};
pub use losses::{DwdrConfig, TripletConfig, TripletVariant};
pub use matrix::DenseMatrix;
pub use rng::Rng;
pub use sampling::SamplingStrategy;
pub use synthdata::SynthSpec;
pub use trainer::{LossArm, TrainConfig};
