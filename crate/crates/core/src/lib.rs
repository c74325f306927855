//! Effects-sensitive attention (ESA): attention kernels with a soft bias on
//! edit-region queries, a Monte Carlo harness that certifies the KL
//! ordering of standard, ESA and hard-modulated attention against an ideal
//! map, and a geometric pipeline (OBJ meshes, depth-buffered rendering,
//! masks) that builds in-context inputs for object editing.

pub mod attention;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod numerics;
pub mod raster;
pub mod theory;

pub use error::{Error, Result};
