use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pbp_cli::train::{fit, load_clouds};
use pbp_cli::{run_ablate, run_gradcheck, run_gradcheck_with_fault, RunConfig};
use pbp_core::datasets::Split;
use pbp_core::netcore::OpKind;

fn pbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbp"))
        .args(args)
        .env("PBP_THREADS", "2")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A config small enough to train in well under a second.
fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    let ckpt = dir.join("model.ckpt");
    fs::write(
        &path,
        format!(
            "# tiny run\n\
             dataset = quadrants\n\
             resolution = 16\n\
             train_clouds = 4\n\
             test_clouds = 2\n\
             cloud_points = 128\n\
             points_per_cloud = 64\n\
             batch_size = 2\n\
             epochs = 2   # two passes\n\
             checkpoint = {}\n",
            ckpt.display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

fn assert_single_error_line(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error code={code} kind={kind} message=")), "{err}");
}

fn tiny() -> RunConfig {
    RunConfig {
        resolution: 16,
        train_clouds: 4,
        test_clouds: 2,
        cloud_points: 128,
        points_per_cloud: 64,
        batch_size: 2,
        epochs: 2,
        ..RunConfig::default()
    }
}

#[test]
fn train_then_eval_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = pbp(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("epoch=2 "));
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("model.ckpt.best").exists());
    let log = dir.path().join("model.ckpt.log");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    // a second run appends to the same log
    let out = pbp(&["train", "--config", &cfg, "--set", "epochs=1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with("epoch=") && l.contains(" loss=")));

    let report = dir.path().join("report.txt");
    let out = pbp(&["eval", "--config", &cfg, "--set", &format!("report={}", report.display())]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mIoU"));
    let kv = fs::read_to_string(&report).unwrap();
    assert!(kv.contains("points=128\n"), "{kv}");
    let miou: f64 = kv
        .lines()
        .find_map(|l| l.strip_prefix("miou="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let best = dir.path().join("model.ckpt.best");
    let out = pbp(&["eval", "--config", &cfg, "--checkpoint", best.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    // a checkpoint from another architecture is a data error
    let out = pbp(&["eval", "--config", &cfg, "--set", "multiscale=false"]);
    assert_single_error_line(&out, 3, "data");
    assert!(stderr(&out).contains("head0"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = pbp(&["train", "--config", &cfg, "--set", "bogus=1"]);
    assert_single_error_line(&out, 2, "config");
    assert!(stderr(&out).contains("key 'bogus'"));

    let out = pbp(&["train", "--config", &cfg, "--set", "epochs=0"]);
    assert_single_error_line(&out, 2, "config");
    assert!(stderr(&out).contains("epochs"));

    let out = pbp(&["train", "--set", "lr=fast"]);
    assert_single_error_line(&out, 2, "config");
    assert!(stderr(&out).contains("key 'lr'"));

    let out = pbp(&["train", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_single_error_line(&out, 2, "config");

    let out = pbp(&["frobnicate"]);
    assert_single_error_line(&out, 2, "config");

    let out = Command::new(env!("CARGO_BIN_EXE_pbp"))
        .args(["gradcheck"])
        .env("PBP_THREADS", "zero")
        .output()
        .unwrap();
    assert_single_error_line(&out, 2, "config");

    let out = pbp(&["--help"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("gradcheck"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = pbp(&[
        "train",
        "--set",
        "dataset=text",
        "--set",
        "num_classes=2",
        "--set",
        &format!("data_path={}", missing.display()),
    ]);
    assert_single_error_line(&out, 3, "data");

    let cfg = write_tiny_config(dir.path());
    let out = pbp(&["eval", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]);
    assert_single_error_line(&out, 3, "data");

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = pbp(&["eval", "--config", &cfg, "--checkpoint", garbage.to_str().unwrap()]);
    assert_single_error_line(&out, 3, "data");
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let out = pbp(&["gradcheck"]);
    assert!(out.status.success(), "{}\n{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("input.coords"));

    let cfg = RunConfig::default();
    assert!(run_gradcheck(&cfg).unwrap().passed());
    for kind in [OpKind::Scatter, OpKind::Gather, OpKind::Conv2d, OpKind::Dense] {
        let report = run_gradcheck_with_fault(&cfg, (kind, 1.5)).unwrap();
        assert!(!report.passed(), "{kind:?} fault went unnoticed:\n{}", report.to_text());
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let cfg = tiny();
    let (_, clouds) = load_clouds(&cfg, Split::Train).unwrap();
    let a = fit(&cfg, &clouds, None, false).unwrap();
    let b = fit(&cfg, &clouds, None, false).unwrap();
    assert_eq!(a.history, b.history);
    let bits = |o: &pbp_cli::TrainOutcome| -> Vec<u32> {
        o.model.params().iter().flat_map(|(_, t)| t.data().to_vec()).map(f32::to_bits).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let other = fit(&RunConfig { seed: 1, ..cfg }, &clouds, None, false).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn loss_falls_on_a_tiny_problem() {
    let cfg = RunConfig { epochs: 30, ..tiny() };
    let (_, clouds) = load_clouds(&cfg, Split::Train).unwrap();
    let out = fit(&cfg, &clouds, None, false).unwrap();
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn ablation_grid_runs_every_variant_once() {
    let cfg = RunConfig {
        epochs: 1,
        train_clouds: 2,
        ..tiny()
    };
    let a = run_ablate(&cfg).unwrap();
    assert_eq!(a.rows.len(), 24);
    assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.miou) && r.final_loss.is_finite()));
    assert_eq!(a.to_table().lines().count(), 25);
    assert_eq!(a, run_ablate(&cfg).unwrap());
}
