//! SpeckleNN-style speckle pattern classification.
//!
//! A small convolutional network maps 96×96 diffraction frames onto the unit
//! hypersphere; it is trained with semi-hard triplet mining and used as a
//! few-shot classifier by averaging query-to-support squared distances per
//! class. The crate also carries the synthetic speckle simulator, the
//! leak-free augmentation pipeline, a binary CNN+MLP baseline, evaluation
//! protocols, and the state machine behind the online classification service.

pub mod adam;
pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod network;
pub mod pipeline;
pub mod service;
pub mod simulator;
pub mod tensor;
pub mod triplet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
