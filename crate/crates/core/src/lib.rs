//! Hybrid convolutional-transformer semantic segmentation for dual-polarization
//! SAR sea-ice scenes, built on a small from-scratch tensor and layer library.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Fill, Precision, Real, Tensor};
