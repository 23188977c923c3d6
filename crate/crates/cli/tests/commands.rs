use rado::pointcloud::read_pose_file;
use rado_cli::config::RunConfig;
use std::path::Path;
use std::process::{Command, Output};

fn rado(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rado")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_icp_odometry_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = rado(&["synth", "--out", s(&data), "--frames", "12", "--step", "0.4", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("index.txt").exists());
    assert!(data.join("effective_config.toml").exists());

    let odo = tmp.path().join("odo");
    let out = rado(&["odometry", "--dataset", s(&data), "--baseline", "icp", "--out", s(&odo)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.txt", "diagnostics.jsonl", "effective_config.toml", "manifest.json"] {
        assert!(odo.join(f).exists(), "{f}");
    }
    assert_eq!(read_pose_file(&odo.join("trajectory.txt")).unwrap().len(), 12);

    let truth = data.join("groundtruth.txt");
    let ev = tmp.path().join("eval");
    let out = rado(&[
        "eval",
        "--predicted",
        s(&odo.join("trajectory.txt")),
        "--truth",
        s(&truth),
        "--lengths",
        "2,4",
        "--out",
        s(&ev),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["t_rel"].as_f64().unwrap() < 0.2);
    assert!(ev.join("trajectories.svg").exists());
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(rado(&["synth", "--out", s(d), "--frames", "3", "--seed", "9"]).status.success());
    }
    for n in ["index.txt", "groundtruth.txt", "frames/000000.bin", "frames/000002.bin"] {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(rado(&["synth", "--out", s(&data), "--frames", "4"]).status.success());

    let missing = rado(&[
        "odometry",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&tmp.path().join("nope")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint not found"));
    assert!(!tmp.path().join("o").exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "sed = 4\n").unwrap();
    assert_eq!(rado(&["odometry", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(rado(&["eval", "--predicted", "x"]).status.code(), Some(2));
}

#[test]
fn gradcheck_negative_control_exits_with_3() {
    let ok = rado(&["gradcheck", "--scope", "jacobians"]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("PASS"));
    let broken = rado(&["gradcheck", "--scope", "jacobians", "--inject-sign-error"]);
    assert_eq!(broken.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&broken.stdout).contains("FAIL"));
}

#[test]
fn train_toy_writes_checkpoints_and_tracks_with_them() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.synth.frames = 7;
    cfg.train.sequences = 1;
    cfg.train.epochs = 1;
    cfg.train.model = rado::verify::tiny_model_config();
    cfg.tracker.train_unroll = 2;
    let file = tmp.path().join("run.toml");
    std::fs::write(&file, cfg.to_toml()).unwrap();

    let train = tmp.path().join("train");
    let out = rado(&["train-toy", "--config", s(&file), "--out", s(&train)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(train.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    for d in ["epoch_000", "epoch_001", "final"] {
        assert!(train.join(d).join("manifest.json").exists(), "{d}");
    }

    let data = tmp.path().join("data");
    assert!(rado(&["synth", "--out", s(&data), "--frames", "9", "--seed", "3"]).status.success());
    let odo = tmp.path().join("odo");
    let out = rado(&[
        "odometry",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&train.join("final")),
        "--out",
        s(&odo),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_pose_file(&odo.join("trajectory.txt")).unwrap().len(), 9);
    let diag = std::fs::read_to_string(odo.join("diagnostics.jsonl")).unwrap();
    assert!(diag.lines().last().unwrap().contains("\"schedule\""));
}
