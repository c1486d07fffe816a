//! End-to-end runs of the `tinyunet` binary on a small synthetic dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] =
    ["--patch", "16", "--batch-size", "4", "--batches-per-epoch", "2", "--max-epochs", "2", "--lr0", "0.005"];

fn tinyunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyunet"))
        .args(args)
        .env_remove("TINYUNET_DATA")
        .output()
        .expect("spawn tinyunet")
}

fn ok(args: &[&str]) -> String {
    let out = tinyunet(args);
    assert!(out.status.success(), "{args:?} exited {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepared(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let raw = root.join("raw");
    let prep = root.join("prep");
    ok(&["synth", s(&raw), "--count", "8", "--test", "2", "--size", "48", "--seed", "3"]);
    ok(&["preprocess", s(&raw), s(&prep)]);
    (raw, prep)
}

#[test]
fn params_prints_exact_counts() {
    assert_eq!(ok(&["params", "--levels", "3", "--filters", "16"]).trim(), "108976");
    assert_eq!(ok(&["params", "--levels", "3", "--filters", "1"]).trim(), "451");
    assert_eq!(ok(&["params", "--variant", "side_output"]).trim(), "109072");
    assert_eq!(ok(&["params", "--convs", "1"]).trim(), "49072");
    assert_eq!(ok(&["params", "--no-relu"]).trim(), "108976");
}

#[test]
fn error_exit_codes() {
    let out = tinyunet(&["train", "--preset", "U-huge", "--data", "/nonexistent", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("U-1C") && err.contains("filters-8"), "{err}");

    assert_eq!(tinyunet(&["params", "--filters", "0"]).status.code(), Some(1));
    assert_eq!(tinyunet(&["grid", "--table", "9", "--data", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(tinyunet(&["train", "--preset", "U", "--out", "/tmp/x"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let out = tinyunet(&["evaluate", "--checkpoint", s(&dir.path().join("none.tuck")), "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_preprocess_train_evaluate_probmap() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, prep) = prepared(dir.path());
    assert!(prep.join("manifest.txt").exists());
    assert_eq!(fs::read_dir(prep.join("samples")).unwrap().count(), 8);

    let runs = dir.path().join("runs");
    let mut args = vec!["train", "--preset", "levels-1", "--out", s(&runs), "--seed", "1"];
    args.extend(TINY);
    // data directory from the environment
    let out = Command::new(env!("CARGO_BIN_EXE_tinyunet")).args(&args).env("TINYUNET_DATA", &prep).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = runs.join("levels-1").join("seed-1");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(history.lines().count(), 3);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run,threshold,auc,specificity,sensitivity,f1,accuracy\n"), "{metrics}");

    let ck = run.join("model.tuck");
    let maps = dir.path().join("maps");
    let eval = ok(&["evaluate", "--checkpoint", s(&ck), "--data", s(&prep), "--maps", s(&maps)]);
    assert!(eval.starts_with("run,threshold,auc,"), "{eval}");
    // evaluation reuses the run's split, so it reproduces the stored metrics
    let row = |t: &str| t.lines().nth(1).unwrap().split_once(',').unwrap().1.to_string();
    assert_eq!(row(&eval), row(&metrics));
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 2);

    let pm = dir.path().join("07.png");
    ok(&[
        "probmap",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&raw.join("images/07.png")),
        "--mask",
        s(&raw.join("masks/07.png")),
        "--out",
        s(&pm),
    ]);
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&pm).unwrap()));
    let info = decoder.read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (48, 48));
}

#[test]
fn grid_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (_, prep) = prepared(dir.path());
    let grid = dir.path().join("grid");
    let mut args = vec!["grid", "--table", "3", "--data", s(&prep), "--out", s(&grid), "--seeds", "1,2"];
    args.extend(TINY);
    ok(&args);

    let table = fs::read_to_string(grid.join("table3.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "preset,params,auc_mean,auc_std,spec_mean,spec_std,sens_mean,sens_std,f1_mean,f1_std,acc_mean,acc_std"
    );
    let rows: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(rows, [("filters-8", "27352"), ("filters-4", "6892"), ("filters-2", "1750"), ("filters-1", "451")]);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 12);
        assert!(l.split(',').skip(2).all(|v| v.parse::<f64>().is_ok()), "{l}");
    }

    let report = ok(&["report", s(&grid), "--table", "3", "--seeds", "1,2"]);
    assert_eq!(report, table);
    assert_eq!(ok(&["report", s(&grid), "--table", "3", "--seeds", "1,2"]), report);

    // a seed that never ran leaves an explicit gap
    let out = tinyunet(&["report", s(&grid), "--table", "3", "--seeds", "1,2,3"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn diverged_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (_, prep) = prepared(dir.path());
    let runs = dir.path().join("runs");
    let mut args = vec!["train", "--preset", "U-lin", "--data", s(&prep), "--out", s(&runs), "--seed", "1"];
    args.extend(TINY);
    args.extend(["--set", "lr0=1e30", "--lambda", "0"]);
    let out = tinyunet(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(runs.join("U-lin/seed-1/history.csv").exists());
}
