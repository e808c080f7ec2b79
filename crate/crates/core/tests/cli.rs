use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use effiperc_core::extract::{PointCloud, VoxelConfig};

fn effiperc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effiperc")).args(args).output().expect("binary runs")
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn voxelize_reports_point_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("scan.bin");
    // two points share a voxel, one is behind the sensor
    let pc =
        PointCloud::new(vec![[10.05, 0.05, 0.1], [10.06, 0.06, 0.1], [-5.0, 0.0, 0.0]], Some(vec![0.5; 3])).unwrap();
    std::fs::write(&scan, pc.to_bin()).unwrap();
    let o = effiperc(&["voxelize", scan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let e = VoxelConfig::kitti().extent();
    assert!(text.contains(&format!("grid (D, H, W): {} x {} x {}", e.d, e.h, e.w)), "{text}");
    for line in ["non-empty voxels: 1", "points total: 3", "points retained: 2", "points out of range: 1"] {
        assert!(text.contains(line), "missing {line:?} in\n{text}");
    }
}

#[test]
fn truncated_scan_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("bad.bin");
    std::fs::write(&scan, [0u8; 15]).unwrap();
    assert_eq!(effiperc(&["voxelize", scan.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(effiperc(&["voxelize", dir.path().join("missing.bin").to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_toy_writes_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.csv");
    let o = effiperc(&["train-toy", "--config", quick_config().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,steps,train_loss,eval_miou,eval_accuracy,step_ms,state_bytes,param_bytes,dropped_points")
    );
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], (i + 1) as f64);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((0.0..=1.0).contains(&r[3]) && (0.0..=1.0).contains(&r[4]));
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    let o = effiperc(&[
        "train-toy",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("m.csv").exists());

    std::fs::write(&bad, "batch_size = 0\n").unwrap();
    assert_eq!(effiperc(&["ablate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(
        effiperc(&["robust", "--config", quick_config().to_str().unwrap(), "--sigma", "-1"]).status.code(),
        Some(2)
    );
    assert_eq!(effiperc(&["gradcheck", "--op", "no_such_op"]).status.code(), Some(2));
    assert_eq!(effiperc(&["bench", "--density", "0"]).status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.toml");
    std::fs::write(&cfg, "epochs = 2\n[data]\ntrain_scenes = 2\neval_scenes = 1\n[optim]\nlr = 1e30\n").unwrap();
    let o = effiperc(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_single_op() {
    let o = effiperc(&["gradcheck", "--op", "submanifold_conv", "--instances", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("submanifold_conv,3,"));
    assert!(rows[0].ends_with(",true"));
}

#[test]
fn robust_lists_clean_and_corrupted_rows() {
    let o = effiperc(&["robust", "--config", quick_config().to_str().unwrap(), "--sigma", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("condition,sigma,eval_miou,eval_accuracy,delta_miou,delta_accuracy"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 2);
    assert!(rows[0].starts_with("clean,"));
    let deltas: Vec<f64> = rows[0].rsplit(',').take(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(deltas, [0.0, 0.0], "clean row has zero delta: {}", rows[0]);
}

#[test]
fn bench_prints_both_layers() {
    let o = effiperc(&["bench", "--extent", "12", "--density", "0.05", "--channels", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("layer,extent,active,channels,sparse_ms,dense_ms,speedup"));
    assert_eq!(text.lines().count(), 3);
}
