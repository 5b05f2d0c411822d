//! Point-cloud segmentation by projecting point features onto three
//! orthogonal planes, running a 2D convolutional backbone on each plane, and
//! back-projecting the multi-scale maps onto the points.
//!
//! - [`pcgeom`]: point clouds, grid normalization, sampling, synthetic tasks
//! - [`planeops`]: bilinear scatter/gather between points and plane grids
//! - [`netcore`]: reverse-mode tensor engine, kernels, Adam
//! - [`pbpnet`]: the network and its checkpoint format
//! - [`datasets`]: text point files, ShapeNet-Part layout, batching
//! - [`metrics`]: confusion matrices, IoU, mIoU and category mIoU

pub mod datasets;
pub mod error;
pub mod metrics;
pub mod netcore;
pub mod pbpnet;
pub mod pcgeom;
pub mod planeops;
pub mod real;

pub use error::{Error, Result};
pub use real::Real;
