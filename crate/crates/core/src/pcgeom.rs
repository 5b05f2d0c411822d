//! Point-cloud container, grid normalization, affine transforms, sampling and
//! synthetic labelled tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// N points with optional per-point features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    feats: Option<Features>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

/// Row-major `N x dim` per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("point cloud must hold at least one point".into()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            coords,
            feats: None,
            labels: None,
            num_classes: None,
        })
    }

    /// Attaches labels; every label must be `< num_classes`.
    pub fn with_labels(mut self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.coords.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        self.labels = Some(labels);
        self.num_classes = Some(num_classes);
        Ok(self)
    }

    pub fn with_features(mut self, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * self.coords.len() {
            return Err(Error::Shape(format!(
                "feature buffer of {} values does not match {} points x {dim}",
                data.len(),
                self.coords.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point feature".into()));
        }
        self.feats = Some(Features { dim, data });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn features(&self) -> Option<&Features> {
        self.feats.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// New cloud holding the points at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let feats = self.feats.as_ref().map(|f| Features {
            dim: f.dim,
            data: indices
                .iter()
                .flat_map(|&i| f.data[i * f.dim..(i + 1) * f.dim].iter().copied())
                .collect(),
        });
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud {
            coords,
            feats,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Continuous-to-grid mapping for one cloud: a uniform scale over all three
/// axes so the three projection planes see consistent geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub margin: f64,
    pub bbox_min: Point3,
    pub bbox_extent: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.5;

impl GridSpec {
    /// Lowest and highest grid coordinate a point may take.
    pub fn bounds(&self) -> (f64, f64) {
        grid_bounds(self.resolution, self.margin)
    }

    pub fn map_point(&self, p: &Point3) -> Point3 {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = map_to_grid(p[a], self.bbox_min[a], self.bbox_extent, self.resolution, self.margin).0;
        }
        out
    }
}

pub(crate) fn grid_bounds(resolution: usize, margin: f64) -> (f64, f64) {
    (margin, resolution as f64 - 1.0 - margin)
}

/// `u = margin + (x - min) * (R - 1 - 2 margin) / extent`, clamped to the
/// grid bounds. Returns the clamped value and the unclamped one.
#[inline]
pub(crate) fn map_to_grid(x: f64, min: f64, extent: f64, resolution: usize, margin: f64) -> (f64, f64) {
    let (lo, hi) = grid_bounds(resolution, margin);
    let raw = margin + (x - min) * (hi - lo) / extent;
    (raw.clamp(lo, hi), raw)
}

pub(crate) fn validate_grid_params(resolution: usize, margin: f64) -> Result<()> {
    if resolution < 4 {
        return Err(Error::InvalidInput(format!("grid resolution {resolution} is below 4")));
    }
    if !(margin >= 0.5) || 2.0 * margin >= resolution as f64 - 1.0 {
        return Err(Error::InvalidInput(format!(
            "margin {margin} must be at least 0.5 and leave room inside a {resolution}-cell grid"
        )));
    }
    Ok(())
}

/// Per-axis minimum and single largest extent; a zero extent becomes 1.
pub fn fit_grid_spec(cloud: &PointCloud, resolution: usize, margin: f64) -> Result<GridSpec> {
    validate_grid_params(resolution, margin)?;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in cloud.coords() {
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(Error::InvalidInput("non-finite coordinate".into()));
            }
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
    Ok(GridSpec {
        resolution,
        margin,
        bbox_min: min,
        bbox_extent: if extent > 0.0 { extent } else { 1.0 },
    })
}

/// Maps every point into grid coordinates of `spec`.
pub fn normalize_to_grid(cloud: &PointCloud, spec: &GridSpec) -> Vec<Point3> {
    cloud.coords().iter().map(|p| spec.map_point(p)).collect()
}

/// A 3x3 linear map applied to row vectors: `p' = p * matrix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn new(matrix: [[f64; 3]; 3]) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("transform has a non-finite entry".into()));
        }
        Ok(Self { matrix })
    }

    pub fn scale(s: f64) -> Self {
        let mut m = Self::IDENTITY.matrix;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = s;
        }
        Self { matrix: m }
    }

    /// Counter-clockwise rotation about +z by `radians`.
    pub fn rotation_z(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self {
            matrix: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Self::IDENTITY.matrix
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = p[0] * m[0][j] + p[1] * m[1][j] + p[2] * m[2][j];
        }
        out
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &AffineTransform) -> PointCloud {
    let mut out = cloud.clone();
    if !t.is_identity() {
        for p in &mut out.coords {
            *p = t.apply(p);
        }
    }
    out
}

/// Exactly `n` points: without replacement when the cloud is large enough,
/// with replacement otherwise.
pub fn sample_fixed_count(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cloud.len();
    let indices: Vec<usize> = if total >= n {
        index::sample(&mut rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..total)).collect()
    };
    Ok(cloud.select(&indices))
}

/// Desk-scale labelled tasks over the cube `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    /// Label by the sign of z; invisible from the XY plane.
    ZHalves,
    /// Label by XY quadrant, counter-clockwise from `x >= 0, y >= 0`.
    Quadrants,
    /// Label by the nearer of two centers at `(-1,0,0)` and `(1,0,0)`.
    TwoSpheres,
}

pub const SPHERE_CENTERS: [Point3; 2] = [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
const SPHERE_RADIUS: f64 = 0.9;

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [Self::ZHalves, Self::Quadrants, Self::TwoSpheres];

    pub fn num_classes(self) -> usize {
        match self {
            Self::ZHalves | Self::TwoSpheres => 2,
            Self::Quadrants => 4,
        }
    }

    pub fn label_of(self, p: &Point3) -> usize {
        match self {
            Self::ZHalves => usize::from(p[2] >= 0.0),
            Self::Quadrants => match (p[0] >= 0.0, p[1] >= 0.0) {
                (true, true) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, false) => 3,
            },
            Self::TwoSpheres => {
                let d = |c: &Point3| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                usize::from(d(&SPHERE_CENTERS[1]) < d(&SPHERE_CENTERS[0]))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ZHalves => "z_halves",
            Self::Quadrants => "quadrants",
            Self::TwoSpheres => "two_spheres",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown synthetic task '{s}'")))
    }
}

pub fn make_synthetic_task(kind: SyntheticKind, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::InvalidInput(format!(
            "synthetic clouds need at least 8 points, got {n_points}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Point3> = match kind {
        SyntheticKind::ZHalves | SyntheticKind::Quadrants => (0..n_points)
            .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
            .collect(),
        SyntheticKind::TwoSpheres => (0..n_points)
            .map(|i| {
                let c = SPHERE_CENTERS[i % 2];
                // rejection-sample the unit ball
                loop {
                    let d = [0; 3].map(|_| rng.gen_range(-1.0..1.0f64));
                    if d.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break [0, 1, 2].map(|a| c[a] + SPHERE_RADIUS * d[a]);
                    }
                }
            })
            .collect(),
    };
    let labels = coords.iter().map(|p| kind.label_of(p)).collect();
    PointCloud::new(coords)?.with_labels(labels, kind.num_classes())
}
