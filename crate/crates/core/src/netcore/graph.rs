//! Reverse-mode tape over coarse tensor operations.
//!
//! Every call appends one record holding its output value and whatever the
//! backward pass needs. Records are only ever appended, so insertion order
//! is a topological order and [`Graph::backward`] walks it in reverse.

use crate::error::{Error, Result};
use crate::netcore::kernels::{self, ConvGeom, Padding};
use crate::netcore::tensor::Tensor;
use crate::pcgeom::grid_bounds;
use crate::planeops::{self, Accumulation, PlaneId};
use crate::real::Real;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Dense,
    Conv2d,
    Relu,
    MaxPool2,
    Upsample2,
    GlobalMaxPool,
    Add,
    Concat,
    Transform,
    Reshape,
    NormalizeGrid,
    Scatter,
    Gather,
    SoftmaxCe,
    WeightedSum,
}

#[derive(Debug, Clone)]
struct NormStats<T> {
    min: [T; 3],
    argmin: [usize; 3],
    argmax_extent: usize,
    argmin_extent: usize,
    extent_axis: usize,
    extent: T,
    degenerate: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, bias: Option<Var>, geom: ConvGeom },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Transform { x: Var, m: Var },
    Reshape { x: Var },
    NormalizeGrid { x: Var, stats: Vec<NormStats<T>>, pass: Vec<bool>, resolution: usize, margin: T },
    Scatter { feats: Var, grid: Var, plane: PlaneId, coord_grad: bool },
    Gather { map: Var, grid: Var, plane: PlaneId, stride: usize, mode: Accumulation, coord_grad: bool, clamped: Vec<[bool; 2]> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
            Op::Add { .. } => OpKind::Add,
            Op::Concat { .. } => OpKind::Concat,
            Op::Transform { .. } => OpKind::Transform,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::NormalizeGrid { .. } => OpKind::NormalizeGrid,
            Op::Scatter { .. } => OpKind::Scatter,
            Op::Gather { .. } => OpKind::Gather,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCe,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, T)>,
}

/// Gradients of leaf values, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn lead_rows(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

fn shape4(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 4]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("{what} expects a 4-d tensor, got {:?}", t.shape())))
}

fn shape3(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 3]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("{what} expects a 3-d tensor, got {:?}", t.shape())))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient produced by the backward of `kind` by `factor`.
    /// Only useful for proving that gradient checks catch a broken VJP.
    pub fn inject_vjp_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x w + b` over the last axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let fin = xv.last_dim();
        let &[wfin, fout] = wv.shape() else {
            return Err(Error::Shape(format!("dense weight must be 2-d, got {:?}", wv.shape())));
        };
        if wfin != fin || bv.shape() != [fout] {
            return Err(Error::Shape(format!(
                "dense: input width {fin}, weight {:?}, bias {:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        let rows = lead_rows(xv.shape());
        let y = kernels::dense_forward(xv.data(), rows, fin, wv.data(), bv.data());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.cout] {
                return Err(Error::Shape(format!("conv2d bias must have {} entries", geom.cout)));
            }
        }
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape().to_vec(), y)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { x, k, bias, geom }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), kernels::relu_forward(xv.data())).unwrap();
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = shape4(self.value(x), "maxpool2")?;
        let (y, argmax) = kernels::maxpool2_forward(self.value(x).data(), s)?;
        let value = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, s[3]], y)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = shape4(self.value(x), "upsample2")?;
        let y = kernels::upsample2_forward(self.value(x).data(), s);
        let value = Tensor::new(vec![s[0], s[1] * 2, s[2] * 2, s[3]], y)?;
        Ok(self.push(value, Op::Upsample2 { x }, &[x]))
    }

    /// `B x N x F -> B x F`.
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var> {
        let [b, n, f] = shape3(self.value(x), "global_maxpool")?;
        let (y, argmax) = kernels::global_maxpool_forward(self.value(x).data(), b, n, f)?;
        let value = Tensor::new(vec![b, f], y)?;
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!("concat: {s:?} does not match leading dims {lead:?}")));
            }
            width += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// `B x N x 3` points times per-batch row-major `3 x 3` matrices (`B x 9`).
    pub fn transform(&mut self, x: Var, m: Var) -> Result<Var> {
        let [b, n, three] = shape3(self.value(x), "transform")?;
        if three != 3 || self.value(m).shape() != [b, 9] {
            return Err(Error::Shape(format!(
                "transform: points {:?}, matrices {:?}",
                self.value(x).shape(),
                self.value(m).shape()
            )));
        }
        let y = kernels::transform_forward(self.value(x).data(), self.value(m).data(), b, n);
        let value = Tensor::new(vec![b, n, 3], y)?;
        Ok(self.push(value, Op::Transform { x, m }, &[x, m]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Per-batch-element fit-and-map of `B x N x 3` coordinates into grid
    /// coordinates: uniform scale by the largest axis extent, offset by the
    /// per-axis minimum, clamped to `[margin, R - 1 - margin]`. Differentiable
    /// through the minimum/extent statistics as well as the points.
    pub fn normalize_grid(&mut self, x: Var, resolution: usize, margin: f64) -> Result<Var> {
        crate::pcgeom::validate_grid_params(resolution, margin)?;
        let [b, n, three] = shape3(self.value(x), "normalize_grid")?;
        if three != 3 || n == 0 {
            return Err(Error::Shape(format!("normalize_grid: bad shape {:?}", self.value(x).shape())));
        }
        let (lo, hi) = grid_bounds(resolution, margin);
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let (m, span) = (T::lit(margin), hi - lo);
        let tol = T::lit(1e-4);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(xs.len());
        let mut pass = Vec::with_capacity(xs.len());
        let mut stats = Vec::with_capacity(b);
        for bi in 0..b {
            let pts = &xs[bi * n * 3..(bi + 1) * n * 3];
            let mut min = [T::infinity(); 3];
            let mut max = [T::neg_infinity(); 3];
            let mut argmin = [0; 3];
            let mut argmax = [0; 3];
            for (i, p) in pts.chunks_exact(3).enumerate() {
                for a in 0..3 {
                    if !p[a].is_finite() {
                        return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
                    }
                    if p[a] < min[a] {
                        min[a] = p[a];
                        argmin[a] = i;
                    }
                    if p[a] > max[a] {
                        max[a] = p[a];
                        argmax[a] = i;
                    }
                }
            }
            let mut extent_axis = 0;
            for a in 1..3 {
                if max[a] - min[a] > max[extent_axis] - min[extent_axis] {
                    extent_axis = a;
                }
            }
            let raw_extent = max[extent_axis] - min[extent_axis];
            let degenerate = !(raw_extent > T::zero());
            let extent = if degenerate { T::one() } else { raw_extent };
            for p in pts.chunks_exact(3) {
                for a in 0..3 {
                    let raw = m + (p[a] - min[a]) * span / extent;
                    pass.push(raw >= lo - tol && raw <= hi + tol);
                    out.push(raw.max(lo).min(hi));
                }
            }
            stats.push(NormStats {
                min,
                argmin,
                argmax_extent: argmax[extent_axis],
                argmin_extent: argmin[extent_axis],
                extent_axis,
                extent,
                degenerate,
            });
        }
        let value = Tensor::new(vec![b, n, 3], out)?;
        Ok(self.push(
            value,
            Op::NormalizeGrid {
                x,
                stats,
                pass,
                resolution,
                margin: m,
            },
            &[x],
        ))
    }

    /// Scatters `B x N x C` point features onto `B x R x R x C` plane grids at
    /// the plane's axis pair of the `B x N x 3` grid coordinates.
    pub fn scatter(
        &mut self,
        feats: Var,
        grid: Var,
        plane: PlaneId,
        resolution: usize,
        mode: Accumulation,
        coord_grad: bool,
    ) -> Result<Var> {
        let [b, n, c] = shape3(self.value(feats), "scatter features")?;
        if shape3(self.value(grid), "scatter grid")? != [b, n, 3] {
            return Err(Error::Shape("scatter: grid and features disagree".into()));
        }
        let cells = resolution * resolution * c;
        let mut out = vec![T::zero(); b * cells];
        for bi in 0..b {
            let coords = self.plane_coords(grid, bi, n, plane);
            planeops::check_coords(&coords, resolution)?;
            let f = &self.value(feats).data()[bi * n * c..(bi + 1) * n * c];
            planeops::scatter_into(&mut out[bi * cells..(bi + 1) * cells], &coords, f, c, resolution, mode);
        }
        let value = Tensor::new(vec![b, resolution, resolution, c], out)?;
        let coord_grad = coord_grad && self.needs(grid);
        let inputs: &[Var] = if coord_grad { &[feats, grid] } else { &[feats] };
        Ok(self.push(
            value,
            Op::Scatter {
                feats,
                grid,
                plane,
                coord_grad,
            },
            inputs,
        ))
    }

    /// Gathers `B x N x C` point features from `B x Rs x Rs x C` maps at the
    /// plane coordinates divided by `stride`, clamped into the map.
    pub fn gather(
        &mut self,
        map: Var,
        grid: Var,
        plane: PlaneId,
        stride: usize,
        mode: Accumulation,
        coord_grad: bool,
    ) -> Result<Var> {
        let [b, rs, rs2, c] = shape4(self.value(map), "gather map")?;
        let [gb, n, three] = shape3(self.value(grid), "gather grid")?;
        if rs != rs2 || gb != b || three != 3 || stride == 0 {
            return Err(Error::Shape("gather: map and grid disagree".into()));
        }
        let inv = T::one() / T::from_usize(stride).unwrap();
        let hi = T::from_usize(rs - 1).unwrap();
        let mut out = vec![T::zero(); b * n * c];
        let mut clamped = Vec::with_capacity(b * n);
        for bi in 0..b {
            let mut coords = self.plane_coords(grid, bi, n, plane);
            for p in &mut coords {
                let mut flags = [false; 2];
                for (v, f) in p.iter_mut().zip(&mut flags) {
                    let s = *v * inv;
                    *f = s > hi;
                    *v = if *f { hi } else { s };
                }
                clamped.push(flags);
            }
            planeops::check_coords(&coords, rs)?;
            let cells = rs * rs * c;
            let m = &self.value(map).data()[bi * cells..(bi + 1) * cells];
            planeops::gather_into(&mut out[bi * n * c..(bi + 1) * n * c], m, c, rs, &coords);
        }
        let value = Tensor::new(vec![b, n, c], out)?;
        let coord_grad = coord_grad && self.needs(grid);
        let inputs: &[Var] = if coord_grad { &[map, grid] } else { &[map] };
        Ok(self.push(
            value,
            Op::Gather {
                map,
                grid,
                plane,
                stride,
                mode,
                coord_grad,
                clamped,
            },
            inputs,
        ))
    }

    /// Mean softmax cross-entropy of `[..., K]` logits; returns a scalar.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (loss, probs) = kernels::softmax_ce_forward(lv.data(), lv.last_dim(), &labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels, probs }, &[logits]))
    }

    /// `sum(weights * x)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::Shape(format!("weighted_sum: {} weights for {} values", weights.len(), xv.len())));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    fn plane_coords(&self, grid: Var, bi: usize, n: usize, plane: PlaneId) -> Vec<[T; 2]> {
        let (a, b) = plane.axes();
        self.value(grid).data()[bi * n * 3..(bi + 1) * n * 3]
            .chunks_exact(3)
            .map(|p| [p[a], p[b]])
            .collect()
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let mut contributions = self.vjp(&node.op, &node.value, &g)?;
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, t) in &mut contributions {
                        t.scale(factor);
                    }
                }
            }
            for (v, t) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let shaped = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data);
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let fin = xv.last_dim();
                let fout = wv.shape()[1];
                let (dx, dw, db) =
                    kernels::dense_vjp(xv.data(), lead_rows(xv.shape()), fin, wv.data(), fout, g.data());
                res.push((*x, shaped(*x, dx)?));
                res.push((*w, shaped(*w, dw)?));
                res.push((*b, shaped(*b, db)?));
            }
            Op::Conv2d { x, k, bias, geom } => {
                let need_dx = self.needs(*x);
                let (dx, dk, db) =
                    kernels::conv2d_vjp(geom, self.value(*x).data(), self.value(*k).data(), g.data(), need_dx);
                if need_dx {
                    res.push((*x, shaped(*x, dx)?));
                }
                res.push((*k, shaped(*k, dk)?));
                if let Some(b) = bias {
                    res.push((*b, shaped(*b, db)?));
                }
            }
            Op::Relu { x } => {
                res.push((*x, shaped(*x, kernels::relu_vjp(self.value(*x).data(), g.data()))?));
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let dx = kernels::scatter_to_argmax(g.data(), argmax, self.value(*x).len());
                res.push((*x, shaped(*x, dx)?));
            }
            Op::Upsample2 { x } => {
                let s = shape4(self.value(*x), "upsample2")?;
                res.push((*x, shaped(*x, kernels::upsample2_vjp(g.data(), s))?));
            }
            Op::Add { a, b } => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Concat { parts } => {
                let width = out.last_dim();
                let rows = lead_rows(out.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                    }
                    offset += w;
                    res.push((p, shaped(p, d)?));
                }
            }
            Op::Transform { x, m } => {
                let [b, n, _] = shape3(self.value(*x), "transform")?;
                let (dx, dm) =
                    kernels::transform_vjp(self.value(*x).data(), self.value(*m).data(), b, n, g.data());
                res.push((*x, shaped(*x, dx)?));
                res.push((*m, shaped(*m, dm)?));
            }
            Op::Reshape { x } => {
                res.push((*x, g.clone().reshaped(self.value(*x).shape().to_vec())?));
            }
            Op::NormalizeGrid {
                x,
                stats,
                pass,
                resolution,
                margin,
            } => {
                let xs = self.value(*x).data();
                let n = xs.len() / (3 * stats.len());
                let span = T::from_usize(*resolution - 1).unwrap() - *margin - *margin;
                let mut dx = vec![T::zero(); xs.len()];
                for (bi, st) in stats.iter().enumerate() {
                    let scale = span / st.extent;
                    let mut d_min = [T::zero(); 3];
                    let mut d_extent = T::zero();
                    for i in 0..n {
                        for a in 0..3 {
                            let idx = (bi * n + i) * 3 + a;
                            if !pass[idx] {
                                continue;
                            }
                            let gs = g.data()[idx] * scale;
                            dx[idx] += gs;
                            d_min[a] -= gs;
                            d_extent -= gs * (xs[idx] - st.min[a]) / st.extent;
                        }
                    }
                    for a in 0..3 {
                        dx[(bi * n + st.argmin[a]) * 3 + a] += d_min[a];
                    }
                    if !st.degenerate {
                        let a = st.extent_axis;
                        dx[(bi * n + st.argmax_extent) * 3 + a] += d_extent;
                        dx[(bi * n + st.argmin_extent) * 3 + a] -= d_extent;
                    }
                }
                res.push((*x, shaped(*x, dx)?));
            }
            Op::Scatter {
                feats,
                grid,
                plane,
                coord_grad,
            } => {
                let [b, n, c] = shape3(self.value(*feats), "scatter")?;
                let r = g.shape()[1];
                let cells = r * r * c;
                let mut d_feats = vec![T::zero(); b * n * c];
                let mut d_grid = vec![T::zero(); b * n * 3];
                let (pa, pb) = plane.axes();
                for bi in 0..b {
                    let coords = self.plane_coords(*grid, bi, n, *plane);
                    let up = &g.data()[bi * cells..(bi + 1) * cells];
                    planeops::gather_into(&mut d_feats[bi * n * c..(bi + 1) * n * c], up, c, r, &coords);
                    if *coord_grad {
                        let f = &self.value(*feats).data()[bi * n * c..(bi + 1) * n * c];
                        for (i, dc) in planeops::coord_grad(up, c, r, &coords, f).into_iter().enumerate() {
                            d_grid[(bi * n + i) * 3 + pa] += dc[0];
                            d_grid[(bi * n + i) * 3 + pb] += dc[1];
                        }
                    }
                }
                res.push((*feats, shaped(*feats, d_feats)?));
                if *coord_grad {
                    res.push((*grid, shaped(*grid, d_grid)?));
                }
            }
            Op::Gather {
                map,
                grid,
                plane,
                stride,
                mode,
                coord_grad,
                clamped,
            } => {
                let [b, rs, _, c] = shape4(self.value(*map), "gather")?;
                let n = g.shape()[1];
                let cells = rs * rs * c;
                let inv = T::one() / T::from_usize(*stride).unwrap();
                let hi = T::from_usize(rs - 1).unwrap();
                let (pa, pb) = plane.axes();
                let mut d_map = vec![T::zero(); b * cells];
                let mut d_grid = vec![T::zero(); b * n * 3];
                for bi in 0..b {
                    let coords: Vec<[T; 2]> = self
                        .plane_coords(*grid, bi, n, *plane)
                        .into_iter()
                        .map(|p| p.map(|v| (v * inv).min(hi)))
                        .collect();
                    let up = &g.data()[bi * n * c..(bi + 1) * n * c];
                    planeops::scatter_into(&mut d_map[bi * cells..(bi + 1) * cells], &coords, up, c, rs, *mode);
                    if *coord_grad {
                        let m = &self.value(*map).data()[bi * cells..(bi + 1) * cells];
                        for (i, dc) in planeops::coord_grad(m, c, rs, &coords, up).into_iter().enumerate() {
                            let flags = clamped[bi * n + i];
                            if !flags[0] {
                                d_grid[(bi * n + i) * 3 + pa] += dc[0] * inv;
                            }
                            if !flags[1] {
                                d_grid[(bi * n + i) * 3 + pb] += dc[1] * inv;
                            }
                        }
                    }
                }
                res.push((*map, shaped(*map, d_map)?));
                if *coord_grad {
                    res.push((*grid, shaped(*grid, d_grid)?));
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let d = kernels::softmax_ce_vjp(probs, k, labels, g.data()[0]);
                res.push((*logits, shaped(*logits, d)?));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                res.push((*x, shaped(*x, weights.iter().map(|&w| w * s).collect())?));
            }
        }
        Ok(res)
    }
}
