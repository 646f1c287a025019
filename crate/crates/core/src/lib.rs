//! `kakeya-core`: a desk-scale computational laboratory for discretised
//! tube and prism arrangements in the unit ball of ℝ³.
//!
//! The crate rasterises δ-tube and prism families onto dyadic voxel grids,
//! verifies non-concentration properties against convex witnesses, measures
//! multi-scale density exponents, and drives the prism coarsening dichotomy
//! and twisted-projection experiments. All measurements are exact in voxel
//! arithmetic; randomised constructions are reproducible from explicit
//! seeds.

pub mod assouad;
pub mod axioms;
pub mod error;
pub mod generators;
pub mod geom;
pub mod prism;
pub mod projection;
pub mod shading;
pub mod voxel;

pub use error::{LabError, Result};
