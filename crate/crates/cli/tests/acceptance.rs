//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbp_cli::ablate::{run_variant, Variant};
use pbp_cli::eval::evaluate;
use pbp_cli::train::{fit, load_clouds};
use pbp_cli::{run_gradcheck_in, run_train, GradcheckReport, RunConfig};
use pbp_core::datasets::Split;
use pbp_core::metrics::{category_mean_iou, ConfusionMatrix};
use pbp_core::netcore::gradcheck::{max_relative_error, numeric_gradient};
use pbp_core::netcore::kernels::{
    conv2d_forward, conv2d_vjp, dense_forward, dense_vjp, softmax_ce_forward, softmax_ce_vjp, ConvGeom,
};
use pbp_core::netcore::{Graph, Padding, Tensor};
use pbp_core::pbpnet::{checkpoint, PbpConfig, PbpNet};
use pbp_core::pcgeom::{make_synthetic_task, SyntheticKind};
use pbp_core::planeops::{
    gather_bilinear, gather_vjp, scatter_bilinear, scatter_bilinear_with, scatter_vjp, Accumulation, FeatureMap,
    PlaneId,
};
use pbp_core::Real;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Vec<[f64; 2]> {
    let hi = (r - 1) as f64;
    (0..n).map(|_| [rng.gen_range(0.0..=hi), rng.gen_range(0.0..=hi)]).collect()
}

/// Coordinates whose fractional parts stay at least 0.05 from the kernel kinks.
fn off_kink_coords(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Vec<[f64; 2]> {
    let mut axis = || rng.gen_range(0..r - 1) as f64 + rng.gen_range(0.05..0.95);
    (0..n).map(|_| [axis(), axis()]).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn back(v: &[impl Real]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn adjointness() -> Outcome {
    let (r, c, n) = (32, 4, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_f32) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let coords = random_coords(&mut rng, n, r);
        let f = uniform(&mut rng, n * c, -1.0, 1.0);
        let img = uniform(&mut rng, r * r * c, -1.0, 1.0);
        let lhs = dot(&scatter_bilinear(&coords, &f, r).unwrap().data, &img);
        let map = FeatureMap::from_data(r, c, img.clone()).unwrap();
        let rhs = dot(&f, &gather_bilinear(&map, &coords).unwrap());
        worst = worst.max((lhs - rhs).abs() / lhs.abs());

        let coords32: Vec<[f32; 2]> = coords.iter().map(|p| [p[0] as f32, p[1] as f32]).collect();
        let (f32s, img32) = (cast::<f32>(&f), cast::<f32>(&img));
        let lhs = dot(&back(&scatter_bilinear(&coords32, &f32s, r).unwrap().data), &back(&img32));
        let map = FeatureMap::from_data(r, c, img32).unwrap();
        let rhs = dot(&back(&f32s), &back(&gather_bilinear(&map, &coords32).unwrap()));
        worst_f32 = worst_f32.max((lhs - rhs).abs() / lhs.abs());
    }
    outcome(
        worst <= 1e-5,
        format!("max relative gap {worst:.2e} over 1000 trials (32-bit kernels: {worst_f32:.2e})"),
    )
}

fn mass_conservation() -> Outcome {
    let (r, c, n) = (32, 4, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let coords = random_coords(&mut rng, n, r);
        let f = uniform(&mut rng, n * c, 0.0, 1.0);
        let mode = [Accumulation::Ordered, Accumulation::Sorted, Accumulation::Parallel][trial % 3];
        let sums = scatter_bilinear_with(&coords, &f, r, mode).unwrap().channel_sums();
        for (ch, s) in sums.iter().enumerate() {
            let expect: f64 = f.iter().skip(ch).step_by(c).sum();
            worst = worst.max((s - expect).abs() / expect.abs());
        }
    }
    outcome(worst <= 1e-5, format!("max per-channel relative error {worst:.2e} over 1000 trials"))
}

/// Analytic gradient in precision `T` against a 64-bit central-difference
/// oracle of the same scalarized function.
fn check<T: Real>(
    x: &[f64],
    f64_fn: impl Fn(&[f64]) -> f64,
    analytic: impl Fn(&[T]) -> Vec<T>,
) -> f64 {
    let xt: Vec<T> = cast(x);
    let x_rounded = back(&xt);
    let numeric = numeric_gradient(&x_rounded, 1e-6, &f64_fn);
    max_relative_error(&back(&analytic(&xt)), &numeric, 1e-4)
}

/// Max relative error of every kernel gradient in precision `T`.
fn kernel_gradients<T: Real>(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let (r, c, n) = (8, 3, 10);

    // scatter: features and coordinates
    let coords = off_kink_coords(rng, n, r);
    let feats = uniform(rng, n * c, -1.0, 1.0);
    let w = uniform(rng, r * r * c, -1.0, 1.0);
    let flat = |p: &[[f64; 2]]| p.iter().flatten().copied().collect::<Vec<f64>>();
    let unflat = |v: &[f64]| v.chunks_exact(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>();
    let upstream = FeatureMap::from_data(r, c, cast::<T>(&w)).unwrap();
    let coords_t: Vec<[T; 2]> = coords.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect();
    let coords_r: Vec<[f64; 2]> = coords_t.iter().map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()]).collect();
    out.push((
        "scatter_vjp d_feats",
        check::<T>(
            &feats,
            |f| dot(&scatter_bilinear(&coords_r, f, r).unwrap().data, &w),
            |f| scatter_vjp(&coords_t, f, &upstream).unwrap().0,
        ),
    ));
    let feats_r = back(&cast::<T>(&feats));
    out.push((
        "scatter_vjp d_coords",
        check::<T>(
            &flat(&coords),
            |p| dot(&scatter_bilinear(&unflat(p), &feats_r, r).unwrap().data, &w),
            |p| {
                let pc: Vec<[T; 2]> = p.chunks_exact(2).map(|q| [q[0], q[1]]).collect();
                scatter_vjp(&pc, &cast::<T>(&feats_r), &upstream).unwrap().1.concat()
            },
        ),
    ));

    // gather: map and coordinates
    let img = uniform(rng, r * r * c, -1.0, 1.0);
    let up = uniform(rng, n * c, -1.0, 1.0);
    let up_t: Vec<T> = cast(&up);
    out.push((
        "gather_vjp d_map",
        check::<T>(
            &img,
            |m| dot(&gather_bilinear(&FeatureMap::from_data(r, c, m.to_vec()).unwrap(), &coords_r).unwrap(), &up),
            |m| gather_vjp(&FeatureMap::from_data(r, c, m.to_vec()).unwrap(), &coords_t, &up_t).unwrap().0.data,
        ),
    ));
    let img_r = back(&cast::<T>(&img));
    let map_t = FeatureMap::from_data(r, c, cast::<T>(&img_r)).unwrap();
    out.push((
        "gather_vjp d_coords",
        check::<T>(
            &flat(&coords),
            |p| dot(&gather_bilinear(&FeatureMap::from_data(r, c, img_r.clone()).unwrap(), &unflat(p)).unwrap(), &up),
            |p| {
                let pc: Vec<[T; 2]> = p.chunks_exact(2).map(|q| [q[0], q[1]]).collect();
                gather_vjp(&map_t, &pc, &up_t).unwrap().1.concat()
            },
        ),
    ));

    // conv2d: input, kernel and bias, for both paddings and strides
    for (padding, stride) in [(Padding::Same, 1), (Padding::Same, 2), (Padding::Valid, 1)] {
        let xs = [2, 6, 6, 3];
        let ks = [3, 3, 3, 4];
        let geom = ConvGeom::new(&xs, &ks, stride, padding).unwrap();
        let x = uniform(rng, xs.iter().product(), -1.0, 1.0);
        let k = uniform(rng, ks.iter().product(), -1.0, 1.0);
        let bias = uniform(rng, 4, -1.0, 1.0);
        let g = uniform(rng, geom.out_shape().iter().product(), -1.0, 1.0);
        let g_t: Vec<T> = cast(&g);
        let (xr, kr, br) = (back(&cast::<T>(&x)), back(&cast::<T>(&k)), back(&cast::<T>(&bias)));
        let (xt, kt) = (cast::<T>(&xr), cast::<T>(&kr));
        let e_x = check::<T>(
            &x,
            |v| dot(&conv2d_forward(&geom, v, &kr, Some(&br)), &g),
            |v| conv2d_vjp(&geom, v, &kt, &g_t, true).0,
        );
        let e_k = check::<T>(
            &k,
            |v| dot(&conv2d_forward(&geom, &xr, v, Some(&br)), &g),
            |v| conv2d_vjp(&geom, &xt, v, &g_t, false).1,
        );
        let e_b = check::<T>(
            &bias,
            |v| dot(&conv2d_forward(&geom, &xr, &kr, Some(v)), &g),
            |_| conv2d_vjp(&geom, &xt, &kt, &g_t, false).2,
        );
        out.push(("conv2d", e_x.max(e_k).max(e_b)));
    }

    // dense
    let (rows, fin, fout) = (5, 4, 3);
    let x = uniform(rng, rows * fin, -1.0, 1.0);
    let wd = uniform(rng, fin * fout, -1.0, 1.0);
    let b = uniform(rng, fout, -1.0, 1.0);
    let g = uniform(rng, rows * fout, -1.0, 1.0);
    let g_t: Vec<T> = cast(&g);
    let (xr, wr, br) = (back(&cast::<T>(&x)), back(&cast::<T>(&wd)), back(&cast::<T>(&b)));
    let (xt, wt) = (cast::<T>(&xr), cast::<T>(&wr));
    let e_x = check::<T>(&x, |v| dot(&dense_forward(v, rows, fin, &wr, &br), &g), |v| dense_vjp(v, rows, fin, &wt, fout, &g_t).0);
    let e_w = check::<T>(&wd, |v| dot(&dense_forward(&xr, rows, fin, v, &br), &g), |v| dense_vjp(&xt, rows, fin, v, fout, &g_t).1);
    let e_b = check::<T>(&b, |v| dot(&dense_forward(&xr, rows, fin, &wr, v), &g), |_| dense_vjp(&xt, rows, fin, &wt, fout, &g_t).2);
    out.push(("dense", e_x.max(e_w).max(e_b)));

    // softmax cross-entropy
    let k = 5;
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..k)).collect();
    let logits = uniform(rng, labels.len() * k, -3.0, 3.0);
    out.push((
        "softmax_cross_entropy",
        check::<T>(
            &logits,
            |l| softmax_ce_forward(l, k, &labels).unwrap().0,
            |l| {
                let (_, probs) = softmax_ce_forward(l, k, &labels).unwrap();
                softmax_ce_vjp(&probs, k, &labels, T::one())
            },
        ),
    ));
    out
}

fn end_to_end<T: Real>() -> GradcheckReport {
    let cfg = RunConfig {
        dataset: pbp_cli::DatasetKind::Synthetic(SyntheticKind::Quadrants),
        gradcheck_points: 8,
        gradcheck_samples: 6,
        ..RunConfig::default()
    };
    run_gradcheck_in::<T>(&cfg, None).expect("gradient check runs")
}

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (bits, tol, results) in [
        (64, 1e-3, kernel_gradients::<f64>(&mut rng)),
        (32, 1e-2, kernel_gradients::<f32>(&mut rng)),
    ] {
        let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
        let failing: Vec<_> = results.iter().filter(|r| r.1 > tol).map(|r| r.0).collect();
        ok &= failing.is_empty();
        lines.push(format!("{bits}-bit kernels max {worst:.1e}{}", if failing.is_empty() { String::new() } else { format!(" failing {failing:?}") }));
    }
    for (bits, tol, report) in [(64, 1e-3, end_to_end::<f64>()), (32, 1e-2, end_to_end::<f32>())] {
        let worst = report.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
        let skipped: usize = report.groups.iter().map(|g| g.skipped).sum();
        let covered = report.groups.iter().all(|g| g.checked > 0);
        let pass = worst <= tol && covered;
        ok &= pass;
        lines.push(format!(
            "{bits}-bit end-to-end max {worst:.1e} over {} groups ({skipped} kink samples skipped)",
            report.groups.len()
        ));
    }
    outcome(ok, lines.join("; "))
}

fn degeneracy() -> Outcome {
    let cloud = make_synthetic_task(SyntheticKind::Quadrants, 64, 4).unwrap();
    let mut pts: Vec<[f64; 3]> = cloud.coords().to_vec();
    let (p, q) = ([0.3, -0.2, -0.6], [0.3, -0.2, 0.4]);
    pts.push(p);
    pts.push(q);
    let n = pts.len();
    let x = Tensor::new(vec![1, n, 3], pts.iter().flatten().copied().map(|v| v as f32).collect()).unwrap();
    let fused_rows = |planes: &[PlaneId]| {
        let mut cfg = PbpConfig::new(4).with_planes(planes);
        cfg.resolution = 32;
        let net: PbpNet<f32> = PbpNet::new(cfg, 11).unwrap();
        let mut g = Graph::new();
        let trace = net.forward_with(&mut g, &x, false, false).unwrap();
        let grid = g.value(trace.grid).data().to_vec();
        let fused = g.value(trace.fused).clone();
        let w = fused.last_dim();
        let rows = (fused.data()[(n - 2) * w..(n - 1) * w].to_vec(), fused.data()[(n - 1) * w..].to_vec());
        (rows, (grid[(n - 1) * 3 + 2] - grid[(n - 2) * 3 + 2]).abs())
    };
    let ((a, b), _) = fused_rows(&[PlaneId::XY]);
    let identical = a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
    let ((a, b), cells) = fused_rows(&PlaneId::ALL);
    let max_diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
    outcome(
        identical && cells >= 1.0 && max_diff > 1e-6,
        format!(
            "one plane: bitwise identical = {identical}; three planes: grid z gap {cells:.2} cells, max feature gap {max_diff:.3e}"
        ),
    )
}

fn ablation_trend() -> Outcome {
    let base = RunConfig {
        dataset: pbp_cli::DatasetKind::Synthetic(SyntheticKind::ZHalves),
        resolution: 32,
        train_clouds: 32,
        test_clouds: 16,
        cloud_points: 2048,
        points_per_cloud: 2048,
        epochs: 20,
        seed: 7,
        ..RunConfig::default()
    };
    let (_, train) = load_clouds(&base, Split::Train).unwrap();
    let (test_refs, test) = load_clouds(&base, Split::Test).unwrap();
    let variant = |planes: &[PlaneId]| Variant {
        planes: planes.to_vec(),
        tnet: false,
        multiscale: true,
        additional: false,
    };
    let one = run_variant(&base, &variant(&[PlaneId::XY]), &train, &test_refs, &test).unwrap();
    let three = run_variant(&base, &variant(&PlaneId::ALL), &train, &test_refs, &test).unwrap();
    outcome(
        one.miou <= 0.6 && three.miou >= 0.9,
        format!("test mIoU XY only {:.4}, XY+YZ+ZX {:.4}", one.miou, three.miou),
    )
}

fn overfit() -> Outcome {
    let cfg = RunConfig {
        dataset: pbp_cli::DatasetKind::Synthetic(SyntheticKind::Quadrants),
        resolution: 32,
        train_clouds: 8,
        cloud_points: 256,
        points_per_cloud: 256,
        epochs: 300,
        seed: 3,
        ..RunConfig::default()
    };
    let (refs, clouds) = load_clouds(&cfg, Split::Train).unwrap();
    let out = match fit(&cfg, &clouds, None, false) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let finite = out.history.iter().all(|r| r.loss.is_finite());
    let first = out.history.iter().find(|r| r.accuracy >= 0.99).map(|r| r.epoch);
    let report = evaluate(&out.model, &cfg, &refs, &clouds).unwrap();
    outcome(
        finite && report.accuracy >= 0.99,
        format!(
            "final train accuracy {:.4}, first epoch at >= 0.99: {}, every step finite",
            report.accuracy,
            first.map_or("none".into(), |e| e.to_string())
        ),
    )
}

fn brute_force_miou(pred: &[usize], truth: &[usize], k: usize) -> Option<f64> {
    let ious: Vec<f64> = (0..k)
        .filter_map(|c| {
            let p: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
            let t: std::collections::BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=50);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&pred, &truth).unwrap();
        if cm.mean_iou().ok() != brute_force_miou(&pred, &truth, k) {
            mismatches += 1;
        }

        // shapes of up to 3 categories, each owning a slice of the labels
        let cats = rng.gen_range(1..=3usize);
        let per_cat = rng.gen_range(1..=2usize);
        let mut grouped = vec![Vec::new(); cats];
        let mut brute = vec![Vec::new(); cats];
        for (ci, (group, bgroup)) in grouped.iter_mut().zip(brute.iter_mut()).enumerate() {
            let parts: Vec<usize> = (ci * per_cat..(ci + 1) * per_cat).collect();
            for _ in 0..rng.gen_range(1..=3) {
                let m = rng.gen_range(1..=50);
                let pick = |rng: &mut ChaCha8Rng| parts[rng.gen_range(0..parts.len())];
                let p: Vec<usize> = (0..m).map(|_| pick(&mut rng)).collect();
                let t: Vec<usize> = (0..m).map(|_| pick(&mut rng)).collect();
                group.push(pbp_core::metrics::shape_part_iou(&p, &t, &parts).unwrap());
                let per_part: Vec<f64> = parts
                    .iter()
                    .map(|&part| {
                        let ps: std::collections::BTreeSet<usize> = (0..m).filter(|&i| p[i] == part).collect();
                        let ts: std::collections::BTreeSet<usize> = (0..m).filter(|&i| t[i] == part).collect();
                        let u = ps.union(&ts).count();
                        if u == 0 {
                            1.0
                        } else {
                            ps.intersection(&ts).count() as f64 / u as f64
                        }
                    })
                    .collect();
                bgroup.push(per_part.iter().sum::<f64>() / per_part.len() as f64);
            }
        }
        let brute_mc =
            brute.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).sum::<f64>() / brute.len() as f64;
        if category_mean_iou(&grouped).unwrap() != brute_mc {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 100 instances (mIoU and mcIoU)"))
}

fn permutation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let run = |accumulation: Accumulation, rng: &mut ChaCha8Rng| {
        let mut cfg = PbpConfig::new(4);
        cfg.resolution = 16;
        cfg.accumulation = accumulation;
        let net: PbpNet<f32> = PbpNet::new(cfg, 21).unwrap();
        let mut worst = 0.0f32;
        for trial in 0..50 {
            let cloud = make_synthetic_task(SyntheticKind::Quadrants, 256, trial).unwrap();
            let n = cloud.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let flat = |order: &[usize]| {
                Tensor::new(
                    vec![1, n, 3],
                    order.iter().flat_map(|&i| cloud.coords()[i]).map(|v| v as f32).collect(),
                )
                .unwrap()
            };
            let base = net.predict(&flat(&(0..n).collect::<Vec<_>>())).unwrap();
            let permuted = net.predict(&flat(&perm)).unwrap();
            for (row, &src) in perm.iter().enumerate() {
                for c in 0..4 {
                    worst = worst.max((permuted.data()[row * 4 + c] - base.data()[src * 4 + c]).abs());
                }
            }
        }
        worst
    };
    let sorted = run(Accumulation::Sorted, &mut rng);
    let parallel = run(Accumulation::Parallel, &mut rng);
    outcome(
        sorted == 0.0 && parallel <= 1e-4,
        format!("max logit deviation deterministic {sorted:e}, parallel {parallel:.2e} over 50 trials"),
    )
}

fn paper_scale_shapes() -> Outcome {
    let start = Instant::now();
    let mut cfg = PbpConfig::new(13);
    cfg.resolution = 224;
    let net: PbpNet<f32> = PbpNet::new(cfg, 0).unwrap();
    let cloud = make_synthetic_task(SyntheticKind::TwoSpheres, 4096, 9).unwrap();
    let x = Tensor::new(vec![1, 4096, 3], cloud.coords().iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let mut g = Graph::new();
    let trace = net.forward_with(&mut g, &x, false, false).unwrap();
    let elapsed = start.elapsed();
    let mut ok = trace.plane_maps.len() == 3;
    for pm in &trace.plane_maps {
        ok &= g.value(pm.taps[0]).shape() == [1, 56, 56, 128];
        ok &= g.value(pm.taps[1]).shape() == [1, 112, 112, 64];
        ok &= g.value(pm.taps[2]).shape() == [1, 224, 224, 16];
    }
    ok &= trace.sub_features.len() == 9;
    ok &= g.value(trace.fused).shape() == [1, 4096, 208];
    ok &= g.value(trace.logits).shape() == [1, 4096, 13];
    outcome(
        ok && within(elapsed, 60),
        format!(
            "maps 56x56x128 / 112x112x64 / 224x224x16 per plane, {} sub-features, fused {:?}, forward {:.1} s",
            trace.sub_features.len(),
            g.value(trace.fused).shape(),
            elapsed.as_secs_f64()
        ),
    )
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let net: PbpNet<f32> = PbpNet::new(PbpConfig::new(4), 1).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    checkpoint::save_checkpoint(net.params(), &a).unwrap();
    let loaded = checkpoint::load_checkpoint::<f32>(&a).unwrap();
    checkpoint::save_checkpoint(&loaded, &b).unwrap();
    let round_trip = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let train = |name: &str| {
        let cfg = RunConfig {
            dataset: pbp_cli::DatasetKind::Synthetic(SyntheticKind::ZHalves),
            resolution: 16,
            train_clouds: 4,
            cloud_points: 128,
            points_per_cloud: 128,
            batch_size: 2,
            epochs: 3,
            seed: 42,
            checkpoint: dir.path().join(name),
            ..RunConfig::default()
        };
        run_train(&cfg).unwrap();
        std::fs::read(&cfg.checkpoint).unwrap()
    };
    let (first, second) = (train("run1.ckpt"), train("run2.ckpt"));
    let retrain = first == second && first != std::fs::read(&a).unwrap();
    outcome(
        round_trip && retrain,
        format!("save-load-save identical = {round_trip}; equal-seed retraining identical = {}", first == second),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 10] = [
        ("1 scatter/gather adjointness", adjointness, Some(30)),
        ("2 mass conservation", mass_conservation, None),
        ("3 gradient suite", gradient_suite, Some(300)),
        ("4 single-plane degeneracy", degeneracy, None),
        ("5 plane-count ablation trend", ablation_trend, Some(1200)),
        ("6 overfit sanity", overfit, Some(600)),
        ("7 metric oracle", metric_oracle, None),
        ("8 permutation equivariance", permutation, None),
        ("9 shape contract at full resolution", paper_scale_shapes, Some(60)),
        ("10 checkpoint round trip and determinism", checkpoints, None),
    ];
    let mut failures = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let in_time = limit.map_or(true, |s| within(elapsed, s));
        let passed = result.passed && in_time;
        failures += usize::from(!passed);
        let budget = limit.map_or(String::new(), |s| format!(" / limit {s} s"));
        println!(
            "[{}] {name}: {} ({:.1} s{budget})",
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
