use crate::error::{Error, Result};
use crate::pcgeom::DEFAULT_MARGIN;
use crate::planeops::{Accumulation, PlaneId};

/// Channel widths of the three backbone taps, coarsest first.
pub const SCALE_CHANNELS: [usize; 3] = [128, 64, 16];
/// Downsampling factor of each tap relative to the plane resolution.
pub const SCALE_STRIDES: [usize; 3] = [4, 2, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct PbpConfig {
    pub resolution: usize,
    pub margin: f64,
    pub num_classes: usize,
    /// Projection planes, kept sorted and without repeats.
    pub planes: Vec<PlaneId>,
    pub use_tnet: bool,
    pub use_multiscale: bool,
    pub use_additional: bool,
    pub shallow_feat_dim: usize,
    pub additional_feat_dim: usize,
    /// One backbone shared by all planes instead of one per plane.
    pub shared_backbone: bool,
    /// Propagate gradients through the scatter/gather coordinates.
    pub coord_grad: bool,
    pub accumulation: Accumulation,
}

impl PbpConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            resolution: 64,
            margin: DEFAULT_MARGIN,
            num_classes,
            planes: PlaneId::ALL.to_vec(),
            use_tnet: true,
            use_multiscale: true,
            use_additional: true,
            shallow_feat_dim: 16,
            additional_feat_dim: 32,
            shared_backbone: true,
            coord_grad: true,
            accumulation: Accumulation::Sorted,
        }
    }

    pub fn with_planes(mut self, planes: &[PlaneId]) -> Self {
        self.planes = planes.to_vec();
        self.planes.sort();
        self.planes.dedup();
        self
    }

    pub fn validate(&self) -> Result<()> {
        crate::pcgeom::validate_grid_params(self.resolution, self.margin)?;
        if self.resolution % 4 != 0 || self.resolution < 8 {
            return Err(Error::InvalidInput(format!(
                "resolution {} must be a multiple of 4 and at least 8",
                self.resolution
            )));
        }
        if self.planes.is_empty() {
            return Err(Error::InvalidInput("at least one projection plane is required".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        if self.shallow_feat_dim == 0 || self.additional_feat_dim == 0 {
            return Err(Error::InvalidInput("feature widths must be positive".into()));
        }
        Ok(())
    }

    /// `(channels, stride)` of every tap that is back-projected.
    pub fn scales(&self) -> Vec<(usize, usize)> {
        let all = SCALE_CHANNELS.into_iter().zip(SCALE_STRIDES);
        if self.use_multiscale {
            all.collect()
        } else {
            all.skip(2).collect()
        }
    }

    /// Width of the fused per-point feature.
    pub fn fused_width(&self) -> usize {
        self.scales().iter().map(|s| s.0).sum()
    }

    pub fn head_input_width(&self) -> usize {
        self.fused_width() + if self.use_additional { self.additional_feat_dim } else { 0 }
    }
}
