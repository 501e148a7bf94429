//! Negative-aware hierarchical attention over spatial transcriptomics spots.
//!
//! The crate is split the way the pipeline runs: [`geometry`] places spots
//! and pseudo-spots, [`attention`] implements the signed attention block,
//! [`model`] stacks local and global stages, [`training`] fits it, [`data`]
//! owns the on-disk formats and [`cli`] ties them together.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
