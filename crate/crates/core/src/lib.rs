#![no_std]
//! Euclidean-equivariant networks over real O(3) irreps, with the machinery
//! to recover symmetry-breaking order parameters by optimizing network inputs.

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harmonics;
pub mod irreps;
pub mod network;
pub mod scenarios;
pub mod symmetry;
pub mod training;

pub use error::{Error, Result};
