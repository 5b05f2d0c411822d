use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbp_core::netcore::gradcheck::relative_error;
use pbp_core::netcore::{Graph, OpKind, Tensor};
use pbp_core::pbpnet::{segmentation_loss, PbpNet};
use pbp_core::pcgeom::{make_synthetic_task, SyntheticKind};
use pbp_core::Real;

use crate::config::{DatasetKind, RunConfig};
use crate::{CliError, CliResult};

/// Plane resolution of the gradient-check fixture.
pub const FIXTURE_RESOLUTION: usize = 8;
const STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared in absolute terms.
const FLOOR: f64 = 1e-4;
/// One-sided differences disagreeing by more than this (relative) mark a
/// sample that straddles a kink; such samples are skipped.
const KINK_RATIO: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    /// Layer name, or `input.coords`.
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "group={} checked={} skipped={} max_rel_error={:.3e} status={}",
                g.name,
                g.checked,
                g.skipped,
                g.max_rel_error,
                if g.passed { "pass" } else { "fail" }
            );
        }
        let _ = writeln!(
            s,
            "tolerance={} status={}",
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        );
        s
    }
}

fn group_name(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(g, _)| g)
}

struct Fixture {
    model: PbpNet<f32>,
    coords: Tensor<f32>,
    labels: Vec<usize>,
}

fn fixture(cfg: &RunConfig) -> CliResult<Fixture> {
    let mut mcfg = cfg.model_config()?;
    mcfg.resolution = FIXTURE_RESOLUTION;
    let mut model: PbpNet<f32> = PbpNet::new(mcfg, cfg.seed).map_err(|e| CliError::Config(format!("model: {e}")))?;
    // Zero biases put whole empty regions exactly on relu kinks, and the
    // zero-initialized alignment output layer would leave every layer before
    // it with identically zero gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB1A5);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let scale = if model.params().name(id).ends_with(".b") { 0.1 } else { 0.01 };
        let t = model.params_mut().get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
    }
    let kind = match cfg.dataset {
        DatasetKind::Synthetic(k) => k,
        _ => SyntheticKind::Quadrants,
    };
    let n = cfg.gradcheck_points.max(8);
    let cloud = make_synthetic_task(kind, n, cfg.data_seed)?;
    let points = cfg.gradcheck_points;
    let k = model.config().num_classes;
    let coords = Tensor::new(
        vec![1, points, 3],
        cloud.coords()[..points].iter().flatten().map(|&v| v as f32).collect(),
    )?;
    let labels = cloud.labels().unwrap_or_default()[..points].iter().map(|&l| l % k).collect();
    Ok(Fixture { model, coords, labels })
}

/// Analytic gradients in precision `T`: one tensor per parameter, then the
/// input.
fn analytic<T: Real>(fx: &Fixture, fault: Option<(OpKind, f64)>) -> CliResult<Vec<Vec<f64>>> {
    let model: PbpNet<T> = fx.model.cast();
    let coords: Tensor<T> = fx.coords.cast();
    let mut g = Graph::new();
    if let Some((kind, factor)) = fault {
        g.inject_vjp_fault(kind, T::lit(factor));
    }
    let trace = model.forward(&mut g, &coords, true)?;
    let loss = segmentation_loss(&mut g, trace.logits, &fx.labels)?;
    let grads = g.backward(loss)?;
    let to_f64 = |t: Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut out: Vec<Vec<f64>> = trace
        .params
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| to_f64(grads.get_or_zeros(v, t)))
        .collect();
    out.push(to_f64(grads.get_or_zeros(trace.input, &coords)));
    Ok(out)
}

/// Evenly spread probe positions with a few fallbacks each.
fn probes(len: usize, samples: usize) -> Vec<Vec<usize>> {
    let count = samples.min(len);
    (0..count)
        .map(|s| {
            let start = s * len / count + len / (2 * count);
            (0..MAX_ATTEMPTS.min(len)).map(|a| (start + a * 7919) % len).collect()
        })
        .collect()
}

/// Central difference, or `None` when the one-sided slopes disagree.
fn numeric_at(orig: f64, f: &mut dyn FnMut(f64) -> CliResult<f64>) -> CliResult<Option<f64>> {
    let f0 = f(orig)?;
    let fp = f(orig + STEP)?;
    let fm = f(orig - STEP)?;
    let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
    if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(FLOOR) {
        return Ok(None);
    }
    Ok(Some((fp - fm) / (2.0 * STEP)))
}

fn accumulate(groups: &mut Vec<GroupCheck>, name: &str, err: Option<f64>, tolerance: f64) {
    let idx = match groups.iter().position(|g| g.name == name) {
        Some(i) => i,
        None => {
            groups.push(GroupCheck {
                name: name.to_string(),
                checked: 0,
                skipped: 0,
                max_rel_error: 0.0,
                passed: true,
            });
            groups.len() - 1
        }
    };
    let g = &mut groups[idx];
    match err {
        Some(e) => {
            g.checked += 1;
            g.max_rel_error = g.max_rel_error.max(e);
            g.passed = g.max_rel_error <= tolerance;
        }
        None => g.skipped += 1,
    }
}

/// Checks sampled entries of every parameter tensor and of the input
/// coordinates of a 32-bit model against 64-bit central differences of the
/// mean loss.
pub fn run_gradcheck(cfg: &RunConfig) -> CliResult<GradcheckReport> {
    run_gradcheck_in::<f32>(cfg, None)
}

/// As [`run_gradcheck`], with the analytic pass scaled at every `OpKind`
/// node by the given factor.
pub fn run_gradcheck_with_fault(cfg: &RunConfig, fault: (OpKind, f64)) -> CliResult<GradcheckReport> {
    run_gradcheck_in::<f32>(cfg, Some(fault))
}

/// Gradient check with analytic gradients computed in precision `T`.
pub fn run_gradcheck_in<T: Real>(cfg: &RunConfig, fault: Option<(OpKind, f64)>) -> CliResult<GradcheckReport> {
    let fx = fixture(cfg)?;
    let grads = analytic::<T>(&fx, fault)?;
    let mut model64: PbpNet<f64> = fx.model.cast();
    let coords64: Tensor<f64> = fx.coords.cast();
    let tol = cfg.gradcheck_tolerance;
    let mut groups = Vec::new();

    let ids: Vec<_> = model64.params().ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let name = group_name(model64.params().name(id)).to_string();
        let len = model64.params().get(id).len();
        for candidates in probes(len, cfg.gradcheck_samples) {
            let mut result = None;
            for &i in &candidates {
                let orig = model64.params().get(id).data()[i];
                let numeric = numeric_at(orig, &mut |v| {
                    model64.params_mut().get_mut(id).data_mut()[i] = v;
                    Ok(model64.loss(&coords64, &fx.labels)?)
                })?;
                model64.params_mut().get_mut(id).data_mut()[i] = orig;
                if let Some(n) = numeric {
                    result = Some(relative_error(grads[pi][i], n, FLOOR));
                    break;
                }
            }
            accumulate(&mut groups, &name, result, tol);
        }
    }

    let input_grad = grads.last().expect("input gradient present");
    for candidates in probes(coords64.len(), coords64.len()) {
        let mut result = None;
        for &i in &candidates {
            let orig = coords64.data()[i];
            let numeric = numeric_at(orig, &mut |v| {
                let mut c = coords64.clone();
                c.data_mut()[i] = v;
                Ok(model64.loss(&c, &fx.labels)?)
            })?;
            if let Some(n) = numeric {
                result = Some(relative_error(input_grad[i], n, FLOOR));
                break;
            }
        }
        accumulate(&mut groups, "input.coords", result, tol);
    }
    for g in &mut groups {
        g.passed &= g.checked > 0;
    }
    Ok(GradcheckReport { tolerance: tol, groups })
}
