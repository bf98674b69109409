//! Adversarial-robustness laboratory for a joint contour-regression and
//! segmentation CNN on synthetic intervertebral-disk phantoms.

pub mod attack;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod netmodel;
pub mod objectives;
pub mod ood;
pub mod rng;
pub mod shape_model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
