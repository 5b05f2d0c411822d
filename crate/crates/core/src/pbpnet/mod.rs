//! The full point projection / back-projection network.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{PbpConfig, SCALE_CHANNELS, SCALE_STRIDES};
pub use model::{fuse_features, segmentation_loss, ForwardTrace, PbpNet, PlaneFeatureSet, PlaneMaps, SubFeature};
