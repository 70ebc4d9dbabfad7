use std::path::Path;
use std::process::{Command, Output};

fn capsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = capsnet(args);
    assert!(
        out.status.success(),
        "capsnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_iterations_writes_header_only_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--kind", "shapes2d", "--count", "6", "--size", "16", "--seed", "3", "--out", s(&data)]);
    ok(&["train", "--dataset", s(&data), "--set", "max_iterations=0", "--out", s(&run)]);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv, "iter,split,loss_total,loss_margin,loss_ce,loss_recon,dice_mean\n");
    let log = std::fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.contains("max_iterations = 0"), "{log}");

    let ck = run.join("checkpoint.cpsc");
    let eval = ok(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data)]);
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "class,dice,precision,recall");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));

    let sens = ok(&["sensitivity", "--checkpoint", s(&ck), "--dataset", s(&data)]);
    assert_eq!(sens.lines().next(), Some("sample,p_label_change,mean_abs_change"));
    assert_eq!(sens.lines().count(), 1 + 6 + 1);

    // a 2D model cannot be rotated about three axes
    let out = capsnet(&["robustness", "--checkpoint", s(&ck), "--dataset", s(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "5", "--size", "16", "--out", s(&data)]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nmax_iterations = 6\neval_interval = 3\nlearning_rate = 0.001\n").unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--seed", "9", "--deterministic", "true", "--out", s(&run)]);
        outputs.push((
            std::fs::read(run.join("metrics.csv")).unwrap(),
            std::fs::read(run.join("checkpoint.cpsc")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "{csv}");
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nfoo = 2\n").unwrap();
    let out = capsnet(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"foo\"") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_dataset_path_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = capsnet(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn gradcheck_passes() {
    let report = ok(&["gradcheck"]);
    assert!(report.trim_end().ends_with("PASS"), "{report}");
}

#[test]
fn robustness_emits_one_row_per_axis_and_angle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs");
    let run = dir.path().join("run");
    ok(&["gen-data", "--kind", "blobs3d", "--count", "2", "--size", "16", "--out", s(&data)]);
    let set = ["--set", "arch=ucaps3d", "--set", "max_iterations=0"];
    let mut train = vec!["train", "--dataset", s(&data), "--out", s(&run)];
    train.extend(set);
    ok(&train);
    let ck = run.join("checkpoint.cpsc");
    let mut args = vec!["robustness", "--checkpoint", s(&ck), "--dataset", s(&data), "--angles", "0,90", "--axes", "x,z,all"];
    args.extend(set);
    let csv = ok(&args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,angle,dice_mean");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1].starts_with("x,0,"));

    let mut eval = vec!["eval", "--checkpoint", s(&ck), "--dataset", s(&data)];
    eval.extend(set);
    let eval = ok(&eval);
    let mean = eval.lines().last().unwrap().split(',').nth(1).unwrap().to_string();
    for axis in ["x", "z", "all"] {
        let row = lines.iter().find(|l| l.starts_with(&format!("{axis},0,"))).unwrap();
        assert_eq!(row.split(',').nth(2).unwrap(), mean);
    }
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--count", "3", "--size", "16", "--out", s(&data)]);
    ok(&["train", "--dataset", s(&data), "--set", "max_iterations=0", "--out", s(&run)]);
    let out = capsnet(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.cpsc")),
        "--dataset",
        s(&data),
        "--set",
        "routing_iters=2",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest mismatch"));
}
