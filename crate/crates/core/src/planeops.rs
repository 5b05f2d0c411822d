//! Bilinear scatter of point features onto a plane grid, bilinear gather from
//! the grid back to points, and the vector-Jacobian products of both.
//!
//! Both directions use the tent kernel `g(N, n) = max(0, 1 - |N - n|)` on each
//! axis, so gather is exactly the linear transpose of scatter. Grids are
//! stored row-major as `R x R x C` with the first plane axis as the row index.
//!
//! The coordinate derivative of the tent kernel is `sign(N - n)` inside the
//! support and 0 at the kinks `|N - n| in {0, 1}`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlaneId {
    XY,
    YZ,
    ZX,
}

impl PlaneId {
    pub const ALL: [PlaneId; 3] = [PlaneId::XY, PlaneId::YZ, PlaneId::ZX];

    /// Ordered pair of coordinate axes spanning the plane.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneId::XY => (0, 1),
            PlaneId::YZ => (1, 2),
            PlaneId::ZX => (2, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneId::XY => "xy",
            PlaneId::YZ => "yz",
            PlaneId::ZX => "zx",
        }
    }
}

impl fmt::Display for PlaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlaneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xy" => Ok(PlaneId::XY),
            "yz" => Ok(PlaneId::YZ),
            "zx" | "xz" => Ok(PlaneId::ZX),
            other => Err(Error::InvalidInput(format!("unknown plane '{other}'"))),
        }
    }
}

/// Dense `R x R x C` grid of features on one projection plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<T>,
    /// Plane the map lives on, when known.
    pub plane: Option<PlaneId>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            data: vec![T::zero(); resolution * resolution * channels],
            plane: None,
        }
    }

    pub fn from_data(resolution: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != resolution * resolution * channels {
            return Err(Error::Shape(format!(
                "{} values cannot form a {resolution}x{resolution}x{channels} map",
                data.len()
            )));
        }
        Ok(Self {
            resolution,
            channels,
            data,
            plane: None,
        })
    }

    pub fn on_plane(mut self, plane: PlaneId) -> Self {
        self.plane = Some(plane);
        self
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.data[(i * self.resolution + j) * self.channels + c]
    }

    /// Per-channel sum over all cells.
    pub fn channel_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.channels];
        for cell in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(cell) {
                *s += v;
            }
        }
        sums
    }
}

/// Order in which point contributions are summed into grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Point index order, one serial add per cell.
    #[default]
    Ordered,
    /// Canonical order by (coordinates, features), which makes the result
    /// bitwise independent of the input point order.
    Sorted,
    /// Fixed-size point chunks scattered into partial maps concurrently and
    /// reduced in chunk order.
    Parallel,
}

impl Accumulation {
    pub fn name(self) -> &'static str {
        match self {
            Accumulation::Ordered => "ordered",
            Accumulation::Sorted => "sorted",
            Accumulation::Parallel => "parallel",
        }
    }
}

impl FromStr for Accumulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(Accumulation::Ordered),
            "sorted" => Ok(Accumulation::Sorted),
            "parallel" => Ok(Accumulation::Parallel),
            _ => Err(Error::InvalidInput(format!("unknown accumulation mode '{s}'"))),
        }
    }
}

const PARALLEL_CHUNK: usize = 512;

/// Axis pair of `grid_coords` for `plane`.
pub fn select_plane_coords<T: Copy>(grid_coords: &[[T; 3]], plane: PlaneId) -> Vec<[T; 2]> {
    let (a, b) = plane.axes();
    grid_coords.iter().map(|p| [p[a], p[b]]).collect()
}

/// Two taps of the 1D tent kernel around `u`: base index, weights, and
/// weight derivatives with respect to `u`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps<T> {
    pub base: usize,
    pub weight: [T; 2],
    pub dweight: [T; 2],
}

#[inline]
pub(crate) fn taps<T: Real>(u: T, resolution: usize) -> Taps<T> {
    let max_base = resolution - 2;
    let fl = u.floor().to_usize().unwrap_or(0).min(max_base);
    let a = u - T::from_usize(fl).unwrap();
    let on_kink = a == T::zero() || a == T::one();
    let d = if on_kink { T::zero() } else { T::one() };
    Taps {
        base: fl,
        weight: [T::one() - a, a],
        dweight: [-d, d],
    }
}

pub(crate) fn check_coords<T: Real>(coords: &[[T; 2]], resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::Contract(format!("grid resolution {resolution} is below 2")));
    }
    let hi = T::from_usize(resolution - 1).unwrap();
    for (i, p) in coords.iter().enumerate() {
        for &v in p {
            if !(v >= T::zero() && v <= hi) {
                return Err(Error::Contract(format!(
                    "point {i} coordinate {v} outside [0, {}]",
                    resolution - 1
                )));
            }
        }
    }
    Ok(())
}

fn channels_of(n_points: usize, len: usize, what: &str) -> Result<usize> {
    if n_points == 0 {
        return Err(Error::Shape(format!("{what}: no points")));
    }
    if len == 0 || len % n_points != 0 {
        return Err(Error::Shape(format!(
            "{what}: {len} values do not divide into {n_points} points"
        )));
    }
    Ok(len / n_points)
}

#[inline]
fn splat_point<T: Real>(out: &mut [T], resolution: usize, p: [T; 2], f: &[T]) {
    let channels = f.len();
    let tu = taps(p[0], resolution);
    let tv = taps(p[1], resolution);
    for (a, &wu) in tu.weight.iter().enumerate() {
        for (b, &wv) in tv.weight.iter().enumerate() {
            let w = wu * wv;
            let cell = ((tu.base + a) * resolution + tv.base + b) * channels;
            for (o, &fv) in out[cell..cell + channels].iter_mut().zip(f) {
                *o += w * fv;
            }
        }
    }
}

fn canonical_order<T: Real>(coords: &[[T; 2]], feats: &[T], channels: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&x, &y| {
        coords[x][0]
            .total_cmp(&coords[y][0])
            .then_with(|| coords[x][1].total_cmp(&coords[y][1]))
            .then_with(|| {
                let fx = &feats[x * channels..(x + 1) * channels];
                let fy = &feats[y * channels..(y + 1) * channels];
                fx.iter()
                    .zip(fy)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    order
}

/// Unchecked scatter into an existing buffer; callers validate coordinates.
pub(crate) fn scatter_into<T: Real>(
    out: &mut [T],
    coords: &[[T; 2]],
    feats: &[T],
    channels: usize,
    resolution: usize,
    mode: Accumulation,
) {
    let feat = |p: usize| &feats[p * channels..(p + 1) * channels];
    match mode {
        Accumulation::Ordered => {
            for (p, &c) in coords.iter().enumerate() {
                splat_point(out, resolution, c, feat(p));
            }
        }
        Accumulation::Sorted => {
            for p in canonical_order(coords, feats, channels) {
                splat_point(out, resolution, coords[p], feat(p));
            }
        }
        Accumulation::Parallel => {
            let cells = out.len();
            let partials: Vec<Vec<T>> = coords
                .par_chunks(PARALLEL_CHUNK)
                .enumerate()
                .map(|(k, chunk)| {
                    let mut part = vec![T::zero(); cells];
                    for (q, &c) in chunk.iter().enumerate() {
                        splat_point(&mut part, resolution, c, feat(k * PARALLEL_CHUNK + q));
                    }
                    part
                })
                .collect();
            for part in partials {
                for (o, v) in out.iter_mut().zip(part) {
                    *o += v;
                }
            }
        }
    }
}

/// Unchecked gather into an `N x C` buffer.
pub(crate) fn gather_into<T: Real>(out: &mut [T], map: &[T], channels: usize, resolution: usize, coords: &[[T; 2]]) {
    for (p, &c) in coords.iter().enumerate() {
        let dst = &mut out[p * channels..(p + 1) * channels];
        let tu = taps(c[0], resolution);
        let tv = taps(c[1], resolution);
        for (a, &wu) in tu.weight.iter().enumerate() {
            for (b, &wv) in tv.weight.iter().enumerate() {
                let w = wu * wv;
                let cell = ((tu.base + a) * resolution + tv.base + b) * channels;
                for (o, &m) in dst.iter_mut().zip(&map[cell..cell + channels]) {
                    *o += w * m;
                }
            }
        }
    }
}

/// `d/d(coords)` of `sum_{p,c} weights[p,c] * gather(map)[p,c]`.
pub(crate) fn coord_grad<T: Real>(
    map: &[T],
    channels: usize,
    resolution: usize,
    coords: &[[T; 2]],
    weights: &[T],
) -> Vec<[T; 2]> {
    coords
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let w = &weights[p * channels..(p + 1) * channels];
            let tu = taps(c[0], resolution);
            let tv = taps(c[1], resolution);
            let mut grad = [T::zero(); 2];
            for a in 0..2 {
                for b in 0..2 {
                    let cell = ((tu.base + a) * resolution + tv.base + b) * channels;
                    let dot: T = w.iter().zip(&map[cell..cell + channels]).map(|(&x, &y)| x * y).sum();
                    grad[0] += tu.dweight[a] * tv.weight[b] * dot;
                    grad[1] += tu.weight[a] * tv.dweight[b] * dot;
                }
            }
            grad
        })
        .collect()
}

/// `I(x', y') = sum_p G(x', y', x_p, y_p) f_p`, summing overlapping
/// contributions in point index order.
pub fn scatter_bilinear<T: Real>(coords2d: &[[T; 2]], feats: &[T], resolution: usize) -> Result<FeatureMap<T>> {
    scatter_bilinear_with(coords2d, feats, resolution, Accumulation::Ordered)
}

pub fn scatter_bilinear_with<T: Real>(
    coords2d: &[[T; 2]],
    feats: &[T],
    resolution: usize,
    mode: Accumulation,
) -> Result<FeatureMap<T>> {
    let channels = channels_of(coords2d.len(), feats.len(), "scatter")?;
    check_coords(coords2d, resolution)?;
    let mut map = FeatureMap::zeros(resolution, channels);
    scatter_into(&mut map.data, coords2d, feats, channels, resolution, mode);
    Ok(map)
}

/// `f'_p = sum_cells G(x_p, y_p, x', y') I(x', y')`; returns `N x C`.
pub fn gather_bilinear<T: Real>(map: &FeatureMap<T>, coords2d: &[[T; 2]]) -> Result<Vec<T>> {
    check_coords(coords2d, map.resolution)?;
    let mut out = vec![T::zero(); coords2d.len() * map.channels];
    gather_into(&mut out, &map.data, map.channels, map.resolution, coords2d);
    Ok(out)
}

/// Pullback of `upstream` (shaped like the scattered map) to features and
/// coordinates.
pub fn scatter_vjp<T: Real>(
    coords2d: &[[T; 2]],
    feats: &[T],
    upstream: &FeatureMap<T>,
) -> Result<(Vec<T>, Vec<[T; 2]>)> {
    let channels = channels_of(coords2d.len(), feats.len(), "scatter_vjp")?;
    if channels != upstream.channels {
        return Err(Error::Shape(format!(
            "upstream has {} channels, features have {channels}",
            upstream.channels
        )));
    }
    let d_feats = gather_bilinear(upstream, coords2d)?;
    let d_coords = coord_grad(&upstream.data, channels, upstream.resolution, coords2d, feats);
    Ok((d_feats, d_coords))
}

/// Pullback of `upstream` (`N x C`) to the map and the coordinates.
pub fn gather_vjp<T: Real>(
    map: &FeatureMap<T>,
    coords2d: &[[T; 2]],
    upstream: &[T],
) -> Result<(FeatureMap<T>, Vec<[T; 2]>)> {
    if upstream.len() != coords2d.len() * map.channels {
        return Err(Error::Shape(format!(
            "upstream has {} values, expected {} points x {} channels",
            upstream.len(),
            coords2d.len(),
            map.channels
        )));
    }
    let mut d_map = scatter_bilinear(coords2d, upstream, map.resolution)?;
    d_map.plane = map.plane;
    let d_coords = coord_grad(&map.data, map.channels, map.resolution, coords2d, upstream);
    Ok((d_map, d_coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_axes() {
        let g = [[1.0, 2.0, 3.0]];
        assert_eq!(select_plane_coords(&g, PlaneId::XY), vec![[1.0, 2.0]]);
        assert_eq!(select_plane_coords(&g, PlaneId::YZ), vec![[2.0, 3.0]]);
        assert_eq!(select_plane_coords(&g, PlaneId::ZX), vec![[3.0, 1.0]]);
    }

    #[test]
    fn scatter_hand_example() {
        let map = scatter_bilinear(&[[1.25f64, 2.5]], &[2.0], 8).unwrap();
        let expect = [((1, 2), 0.75), ((2, 2), 0.25), ((1, 3), 0.75), ((2, 3), 0.25)];
        for i in 0..8 {
            for j in 0..8 {
                let want = expect.iter().find(|(c, _)| *c == (i, j)).map_or(0.0, |e| e.1);
                assert_eq!(map.at(i, j, 0), want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn scatter_on_node_and_overlap() {
        let map = scatter_bilinear(&[[3.0f32, 4.0]], &[1.0], 8).unwrap();
        assert_eq!(map.at(3, 4, 0), 1.0);
        assert_eq!(map.data.iter().sum::<f32>(), 1.0);

        let map = scatter_bilinear(&[[3.0f32, 4.0], [3.0, 4.0]], &[1.0, 1.0], 8).unwrap();
        assert_eq!(map.at(3, 4, 0), 2.0);
    }

    #[test]
    fn scatter_at_far_edge() {
        let map = scatter_bilinear(&[[7.0f64, 7.0]], &[1.5], 8).unwrap();
        assert_eq!(map.at(7, 7, 0), 1.5);
    }

    #[test]
    fn gather_examples() {
        let mut map = FeatureMap::<f64>::zeros(4, 1);
        map.data[0] = 1.0;
        assert_eq!(gather_bilinear(&map, &[[0.0, 0.0]]).unwrap(), vec![1.0]);
        assert_eq!(gather_bilinear(&map, &[[0.5, 0.0]]).unwrap(), vec![0.5]);

        let uniform = FeatureMap::from_data(4, 1, vec![0.3f64; 16]).unwrap();
        let v = gather_bilinear(&uniform, &[[1.37, 2.81]]).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn out_of_grid_is_contract_error() {
        assert!(matches!(
            scatter_bilinear(&[[-0.1f32, 1.0]], &[1.0], 4),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            scatter_bilinear(&[[1.0f32, 3.01]], &[1.0], 4),
            Err(Error::Contract(_))
        ));
        let map = FeatureMap::<f32>::zeros(4, 1);
        assert!(gather_bilinear(&map, &[[f32::NAN, 0.0]]).is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            scatter_bilinear::<f32>(&[[1.0, 1.0], [2.0, 2.0]], &[1.0, 2.0, 3.0], 4),
            Err(Error::Shape(_))
        ));
        let map = FeatureMap::<f32>::zeros(4, 2);
        assert!(gather_vjp(&map, &[[1.0, 1.0]], &[1.0]).is_err());
    }

    #[test]
    fn vjp_transpose_identities() {
        let coords = [[1.3f64, 2.7], [0.2, 0.9], [2.5, 2.5]];
        let feats = [1.0, -2.0, 0.5, 3.0, 0.25, -1.0];
        let up = FeatureMap::from_data(4, 2, (0..32).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let (d_feats, _) = scatter_vjp(&coords, &feats, &up).unwrap();
        assert_eq!(d_feats, gather_bilinear(&up, &coords).unwrap());

        let ones = FeatureMap::from_data(4, 2, vec![1.0; 32]).unwrap();
        let (d_feats, _) = scatter_vjp(&coords, &feats, &ones).unwrap();
        for v in d_feats {
            assert!((v - 1.0).abs() < 1e-15);
        }

        let (d_map, _) = gather_vjp(&up, &coords, &feats).unwrap();
        assert_eq!(d_map, scatter_bilinear(&coords, &feats, 4).unwrap());
    }

    #[test]
    fn gather_vjp_one_hot_at_node() {
        let map = FeatureMap::<f32>::zeros(4, 1);
        let (d_map, d_coords) = gather_vjp(&map, &[[2.0, 1.0]], &[1.0]).unwrap();
        let mut want = vec![0.0; 16];
        want[2 * 4 + 1] = 1.0;
        assert_eq!(d_map.data, want);
        assert_eq!(d_coords, vec![[0.0, 0.0]]);
    }

    #[test]
    fn accumulation_modes_agree() {
        let n = 2000;
        let coords: Vec<[f32; 2]> = (0..n)
            .map(|i| {
                let t = i as f32;
                [(t * 0.618).fract() * 15.0, (t * 0.377).fract() * 15.0]
            })
            .collect();
        let feats: Vec<f32> = (0..n * 3).map(|i| ((i as f32) * 0.1).cos()).collect();
        let a = scatter_bilinear_with(&coords, &feats, 16, Accumulation::Ordered).unwrap();
        let b = scatter_bilinear_with(&coords, &feats, 16, Accumulation::Sorted).unwrap();
        let c = scatter_bilinear_with(&coords, &feats, 16, Accumulation::Parallel).unwrap();
        for ((x, y), z) in a.data.iter().zip(&b.data).zip(&c.data) {
            assert!((x - y).abs() <= 1e-5 && (x - z).abs() <= 1e-5);
        }
    }

    #[test]
    fn sorted_mode_ignores_point_order() {
        let coords = [[1.3f32, 2.7], [0.2, 0.9], [1.3, 2.7], [2.9, 0.1]];
        let feats = [0.1f32, 1e7, -0.3, 7.0];
        let perm = [3usize, 2, 0, 1];
        let pc: Vec<_> = perm.iter().map(|&i| coords[i]).collect();
        let pf: Vec<_> = perm.iter().map(|&i| feats[i]).collect();
        let a = scatter_bilinear_with(&coords, &feats, 4, Accumulation::Sorted).unwrap();
        let b = scatter_bilinear_with(&pc, &pf, 4, Accumulation::Sorted).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn plane_names_round_trip() {
        for p in PlaneId::ALL {
            assert_eq!(p.name().parse::<PlaneId>().unwrap(), p);
        }
        assert_eq!("XZ".parse::<PlaneId>().unwrap(), PlaneId::ZX);
        assert!("xw".parse::<PlaneId>().is_err());
    }
}
