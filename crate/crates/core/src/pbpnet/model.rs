//! Network assembly: alignment, plane projection, 2D backbone, back-projection,
//! fusion, the point-wise branch and the classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::{uniform_fan_in, Graph, Padding, ParamId, ParamStore, Tensor, Var};
use crate::pbpnet::config::{PbpConfig, SCALE_CHANNELS, SCALE_STRIDES};
use crate::pcgeom::AffineTransform;
use crate::planeops::PlaneId;
use crate::real::Real;

const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 3.0;

const TNET_POINT_WIDTHS: [usize; 4] = [3, 32, 64, 128];
const TNET_GLOBAL_WIDTHS: [usize; 4] = [128, 64, 32, 9];
const ADDITIONAL_HIDDEN: usize = 32;
const HEAD_WIDTHS: [usize; 2] = [128, 64];
const ENCODER_WIDTHS: [usize; 3] = [32, 64, 128];

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct TNetLayout {
    point: Vec<Layer>,
    global: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct BackboneLayout {
    encoder: [Layer; 3],
    decoder: [Layer; 2],
}

#[derive(Debug, Clone)]
struct Layout {
    tnet: Option<TNetLayout>,
    shallow: Layer,
    backbones: Vec<BackboneLayout>,
    additional_tnet: Option<TNetLayout>,
    additional: Vec<Layer>,
    head: Vec<Layer>,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn dense(&mut self, name: &str, fin: usize, fout: usize, gain: f64) -> Layer {
        let w = uniform_fan_in(&[fin, fout], fin, gain, &mut self.rng);
        Layer {
            w: self.params.add(format!("{name}.w"), w),
            b: self.params.add(format!("{name}.b"), Tensor::zeros(vec![fout])),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Layer {
        let k = uniform_fan_in(&[3, 3, cin, cout], 9 * cin, gain, &mut self.rng);
        Layer {
            w: self.params.add(format!("{name}.k"), k),
            b: self.params.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
        }
    }

    fn tnet(&mut self, prefix: &str) -> TNetLayout {
        let point = TNET_POINT_WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.dense(&format!("{prefix}.point{i}"), w[0], w[1], RELU_GAIN))
            .collect();
        let mut global: Vec<Layer> = TNET_GLOBAL_WIDTHS[..3]
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.dense(&format!("{prefix}.global{i}"), w[0], w[1], RELU_GAIN))
            .collect();
        // final layer emits the identity until trained
        let fin = TNET_GLOBAL_WIDTHS[2];
        let eye = AffineTransform::IDENTITY.matrix.concat().into_iter().map(T::lit).collect();
        global.push(Layer {
            w: self.params.add(format!("{prefix}.global2.w"), Tensor::zeros(vec![fin, 9])),
            b: self.params.add(format!("{prefix}.global2.b"), Tensor::new(vec![9], eye).unwrap()),
        });
        TNetLayout { point, global }
    }

    fn backbone(&mut self, prefix: &str, cin: usize) -> BackboneLayout {
        let [c1, c2, c3] = ENCODER_WIDTHS;
        let [_, d1, d2] = SCALE_CHANNELS;
        BackboneLayout {
            encoder: [
                self.conv(&format!("{prefix}.enc0"), cin, c1, RELU_GAIN),
                self.conv(&format!("{prefix}.enc1"), c1, c2, RELU_GAIN),
                self.conv(&format!("{prefix}.enc2"), c2, c3, RELU_GAIN),
            ],
            decoder: [
                self.conv(&format!("{prefix}.dec0"), c3, d1, RELU_GAIN),
                self.conv(&format!("{prefix}.dec1"), d1, d2, LINEAR_GAIN),
            ],
        }
    }
}

/// Parameters bound as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// One back-projected sub-feature `f_P^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubFeature {
    pub plane: PlaneId,
    pub depth: usize,
    pub stride: usize,
    pub value: Var,
}

/// All sub-features of one forward pass, plane-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlaneFeatureSet {
    pub entries: Vec<SubFeature>,
}

impl PlaneFeatureSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, plane: PlaneId, depth: usize) -> Option<Var> {
        self.entries
            .iter()
            .find(|e| e.plane == plane && e.depth == depth)
            .map(|e| e.value)
    }
}

/// Scattered input map and backbone taps (128, 64, 16 channels) of one plane.
#[derive(Debug, Clone, Copy)]
pub struct PlaneMaps {
    pub plane: PlaneId,
    pub input: Var,
    pub taps: [Var; 3],
}

/// Handles to every intermediate of [`PbpNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub params: BoundParams,
    pub input: Var,
    pub transform: Option<Var>,
    pub aligned: Var,
    pub grid: Var,
    pub shallow: Var,
    pub plane_maps: Vec<PlaneMaps>,
    pub sub_features: PlaneFeatureSet,
    pub fused: Var,
    pub additional: Option<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct PbpNet<T> {
    config: PbpConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn dense_layer<T: Real>(g: &mut Graph<T>, p: &BoundParams, l: Layer, x: Var, relu: bool) -> Result<Var> {
    let y = g.dense(x, p.var(l.w), p.var(l.b))?;
    Ok(if relu { g.relu(y) } else { y })
}

fn conv_layer<T: Real>(g: &mut Graph<T>, p: &BoundParams, l: Layer, x: Var, relu: bool) -> Result<Var> {
    let y = g.conv2d(x, p.var(l.w), Some(p.var(l.b)), 1, Padding::Same)?;
    Ok(if relu { g.relu(y) } else { y })
}

/// Fusion layer: per depth, sum the planes' sub-features; then
/// concatenate depths in `(128, 64, 16)` order.
pub fn fuse_features<T: Real>(g: &mut Graph<T>, pfs: &PlaneFeatureSet) -> Result<Var> {
    let mut per_depth = Vec::new();
    for depth in SCALE_CHANNELS {
        let mut acc: Option<Var> = None;
        for e in pfs.entries.iter().filter(|e| e.depth == depth) {
            acc = Some(match acc {
                None => e.value,
                Some(a) => g.add(a, e.value)?,
            });
        }
        per_depth.extend(acc);
    }
    match per_depth.as_slice() {
        [] => Err(Error::Shape("no sub-features to fuse".into())),
        [single] => Ok(*single),
        many => g.concat(many),
    }
}

/// Mean point-wise cross-entropy over all `B x N` points.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = g.value(logits).last_dim();
    let rows = g.value(logits).len() / k.max(1);
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} points", labels.len())));
    }
    g.softmax_ce(logits, labels.to_vec())
}

impl<T: Real> PbpNet<T> {
    pub fn new(config: PbpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let tnet = config.use_tnet.then(|| b.tnet("tnet"));
        let shallow = b.dense("shallow", 3, config.shallow_feat_dim, RELU_GAIN);
        let backbones = if config.shared_backbone {
            vec![b.backbone("backbone", config.shallow_feat_dim)]
        } else {
            config
                .planes
                .iter()
                .map(|p| b.backbone(&format!("backbone_{p}"), config.shallow_feat_dim))
                .collect()
        };
        let (additional_tnet, additional) = if config.use_additional {
            let t = config.use_tnet.then(|| b.tnet("additional.tnet"));
            let layers = vec![
                b.dense("additional.point0", 3, ADDITIONAL_HIDDEN, RELU_GAIN),
                b.dense("additional.point1", ADDITIONAL_HIDDEN, config.additional_feat_dim, RELU_GAIN),
            ];
            (t, layers)
        } else {
            (None, Vec::new())
        };
        let [h0, h1] = HEAD_WIDTHS;
        let head = vec![
            b.dense("head0", config.head_input_width(), h0, RELU_GAIN),
            b.dense("head1", h0, h1, RELU_GAIN),
            b.dense("head2", h1, config.num_classes, LINEAR_GAIN),
        ];
        Ok(Self {
            config,
            params,
            layout: Layout {
                tnet,
                shallow,
                backbones,
                additional_tnet,
                additional,
                head,
            },
        })
    }

    pub fn config(&self) -> &PbpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> PbpNet<U> {
        PbpNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }

    fn tnet_with(&self, g: &mut Graph<T>, p: &BoundParams, layout: &TNetLayout, coords: Var) -> Result<Var> {
        let mut h = coords;
        for &l in &layout.point {
            h = dense_layer(g, p, l, h, true)?;
        }
        h = g.global_maxpool(h)?;
        let last = layout.global.len() - 1;
        for (i, &l) in layout.global.iter().enumerate() {
            h = dense_layer(g, p, l, h, i != last)?;
        }
        Ok(h)
    }

    /// Mini T-Net: per-point MLP, max pool over points, MLP to a row-major
    /// 3x3 matrix per batch element (`B x 9`).
    pub fn tnet_forward(&self, g: &mut Graph<T>, p: &BoundParams, coords: Var) -> Result<Var> {
        let layout = self
            .layout
            .tnet
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("T-Net disabled in this configuration".into()))?;
        self.tnet_with(g, p, layout, coords)
    }

    /// Alignment transforms predicted for each cloud of a `B x N x 3` batch.
    pub fn transforms(&self, coords: &Tensor<T>) -> Result<Vec<AffineTransform>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.leaf(coords.clone(), false);
        let m = self.tnet_forward(&mut g, &p, x)?;
        g.value(m)
            .data()
            .chunks_exact(9)
            .map(|c| {
                let v: Vec<f64> = c.iter().map(|v| v.to_f64_lossy()).collect();
                AffineTransform::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
            })
            .collect()
    }

    /// One shared dense layer with relu per point; these are the features
    /// scattered onto the planes.
    pub fn shallow_point_features(&self, g: &mut Graph<T>, p: &BoundParams, aligned: Var) -> Result<Var> {
        dense_layer(g, p, self.layout.shallow, aligned, true)
    }

    /// Encoder `conv-pool-conv-pool-conv` and decoder `upsample-conv` twice;
    /// returns the 128-, 64- and 16-channel maps at strides 4, 2, 1.
    pub fn backbone_forward(&self, g: &mut Graph<T>, p: &BoundParams, map: Var, plane: PlaneId) -> Result<[Var; 3]> {
        let shape = g.value(map).shape().to_vec();
        if shape.len() != 4 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be B x R x R x C with R divisible by 4, got {shape:?}"
            )));
        }
        let bb = if self.config.shared_backbone {
            &self.layout.backbones[0]
        } else {
            let i = self
                .config
                .planes
                .iter()
                .position(|&q| q == plane)
                .ok_or_else(|| Error::InvalidInput(format!("plane {plane} not configured")))?;
            &self.layout.backbones[i]
        };
        let h = conv_layer(g, p, bb.encoder[0], map, true)?;
        let h = g.maxpool2(h)?;
        let h = conv_layer(g, p, bb.encoder[1], h, true)?;
        let h = g.maxpool2(h)?;
        let tap128 = conv_layer(g, p, bb.encoder[2], h, true)?;
        let h = g.upsample2(tap128)?;
        let tap64 = conv_layer(g, p, bb.decoder[0], h, true)?;
        let h = g.upsample2(tap64)?;
        let tap16 = conv_layer(g, p, bb.decoder[1], h, false)?;
        Ok([tap128, tap64, tap16])
    }

    /// Gathers each configured tap at the stride-scaled grid coordinates.
    pub fn backproject_all(&self, g: &mut Graph<T>, maps: &[PlaneMaps], grid: Var) -> Result<PlaneFeatureSet> {
        let mut entries = Vec::new();
        for pm in maps {
            for (depth, stride) in self.config.scales() {
                let idx = SCALE_CHANNELS.iter().position(|&c| c == depth).unwrap();
                debug_assert_eq!(SCALE_STRIDES[idx], stride);
                let value = g.gather(
                    pm.taps[idx],
                    grid,
                    pm.plane,
                    stride,
                    self.config.accumulation,
                    self.config.coord_grad,
                )?;
                entries.push(SubFeature {
                    plane: pm.plane,
                    depth,
                    stride,
                    value,
                });
            }
        }
        Ok(PlaneFeatureSet { entries })
    }

    /// Independent alignment followed by a two-layer per-point MLP.
    pub fn additional_branch(&self, g: &mut Graph<T>, p: &BoundParams, coords: Var) -> Result<Option<Var>> {
        if !self.config.use_additional {
            return Ok(None);
        }
        let mut h = match &self.layout.additional_tnet {
            Some(t) => {
                let m = self.tnet_with(g, p, t, coords)?;
                g.transform(coords, m)?
            }
            None => coords,
        };
        for &l in &self.layout.additional {
            h = dense_layer(g, p, l, h, true)?;
        }
        Ok(Some(h))
    }

    /// Full forward pass over a `B x N x 3` batch, returning `B x N x K`
    /// logits plus handles to every intermediate.
    pub fn forward(&self, g: &mut Graph<T>, coords: &Tensor<T>, coords_requires_grad: bool) -> Result<ForwardTrace> {
        self.forward_with(g, coords, coords_requires_grad, true)
    }

    /// Forward pass with control over whether parameters need gradients.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        coords: &Tensor<T>,
        coords_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<ForwardTrace> {
        let s = coords.shape();
        if s.len() != 3 || s[2] != 3 || s[1] == 0 || s[0] == 0 {
            return Err(Error::Shape(format!("expected B x N x 3 coordinates, got {s:?}")));
        }
        let cfg = &self.config;
        let params = self.bind(g, params_require_grad);
        let input = g.leaf(coords.clone(), coords_requires_grad);

        let (transform, aligned) = match &self.layout.tnet {
            Some(t) => {
                let m = self.tnet_with(g, &params, t, input)?;
                (Some(m), g.transform(input, m)?)
            }
            None => (None, input),
        };
        let grid = g.normalize_grid(aligned, cfg.resolution, cfg.margin)?;
        let shallow = self.shallow_point_features(g, &params, aligned)?;

        let mut plane_maps = Vec::with_capacity(cfg.planes.len());
        for &plane in &cfg.planes {
            let map = g.scatter(shallow, grid, plane, cfg.resolution, cfg.accumulation, cfg.coord_grad)?;
            let taps = self.backbone_forward(g, &params, map, plane)?;
            plane_maps.push(PlaneMaps { plane, input: map, taps });
        }
        let sub_features = self.backproject_all(g, &plane_maps, grid)?;
        let fused = fuse_features(g, &sub_features)?;

        let additional = self.additional_branch(g, &params, input)?;
        let mut h = match additional {
            Some(a) => g.concat(&[fused, a])?,
            None => fused,
        };
        let last = self.layout.head.len() - 1;
        for (i, &l) in self.layout.head.iter().enumerate() {
            h = dense_layer(g, &params, l, h, i != last)?;
        }
        Ok(ForwardTrace {
            params,
            input,
            transform,
            aligned,
            grid,
            shallow,
            plane_maps,
            sub_features,
            fused,
            additional,
            logits: h,
        })
    }

    /// Logits `B x N x K` without recording gradients.
    pub fn predict(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let trace = self.forward_with(&mut g, coords, false, false)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Mean loss and per-parameter gradients for one batch.
    pub fn loss_and_grads(&self, coords: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, coords, false)?;
        let loss = segmentation_loss(&mut g, trace.logits, labels)?;
        let grads = g.backward(loss)?;
        let per_param = trace
            .params
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
            .collect();
        Ok((g.value(loss).data()[0], per_param))
    }

    /// Mean loss only.
    pub fn loss(&self, coords: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut g = Graph::new();
        let trace = self.forward_with(&mut g, coords, false, false)?;
        let loss = segmentation_loss(&mut g, trace.logits, labels)?;
        Ok(g.value(loss).data()[0])
    }
}
