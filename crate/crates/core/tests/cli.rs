use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stageprune"))
        .args(["--out-dir", out.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn analyze_writes_plan_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["analyze"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan = fs::read_to_string(dir.path().join("plan.txt")).unwrap();
    assert!(plan.contains("dividers=578,107"), "{plan}");
    let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("t,grad,log_snr,score,mse,snr\n"));
    assert_eq!(curves.lines().count(), 1001);
}

#[test]
fn overrides_and_config_file_agree() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(a.path(), &["analyze", "--lambda", "0", "--M=0.7"])), 0);
    let cfg = b.path().join("run.cfg");
    fs::write(&cfg, "# no log-SNR term\nlambda = 0\nM = 0.7\n").unwrap();
    assert_eq!(code(&run(b.path(), &["--config", cfg.to_str().unwrap(), "analyze"])), 0);
    assert_eq!(fs::read(a.path().join("plan.txt")).unwrap(), fs::read(b.path().join("plan.txt")).unwrap());
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["analyze", "--M", "1.5"])), 2);
    assert_eq!(code(&run(dir.path(), &["analyze", "--no-such-key", "1"])), 2);
    assert_eq!(code(&run(dir.path(), &["prune", "--preset", "dit-0.99"])), 2);
    let missing = dir.path().join("absent.ckpt");
    assert_eq!(code(&run(dir.path(), &["sample", "--checkpoint", missing.to_str().unwrap()])), 2);
}

#[test]
fn degenerate_and_ambiguous_curves_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.csv");
    let text: String = std::iter::once("t,score\n".to_string()).chain((2..=100).map(|t| format!("{t},1.0\n"))).collect();
    fs::write(&flat, text).unwrap();
    let o = run(dir.path(), &["analyze", "--curve-file", flat.to_str().unwrap(), "--M", "0.99"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let humps = dir.path().join("humps.csv");
    let text: String = std::iter::once("t,score\n".to_string())
        .chain((2..=100).map(|t| format!("{t},{}\n", if (20..30).contains(&t) || (60..70).contains(&t) { 5.0 } else { 0.0 })))
        .collect();
    fs::write(&humps, text).unwrap();
    let o = run(dir.path(), &["analyze", "--curve-file", humps.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("20"));
}

#[test]
fn unknown_baseline_and_missing_mosaic_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--dataset-size", "32", "--held-out-size", "16", "--epochs", "1", "--n-eval", "4"];
    let mut args = vec!["train"];
    args.extend(small);
    assert_eq!(code(&run(dir.path(), &args)), 0);
    let mut args = vec!["eval", "--baseline", "magnitude"];
    args.extend(small);
    assert_eq!(code(&run(dir.path(), &args)), 2);
    let mut args = vec!["sample", "--mosaic", "nowhere"];
    args.extend(small);
    assert_eq!(code(&run(dir.path(), &args)), 2);
    let mut args = vec!["eval"];
    args.extend(small);
    assert_eq!(code(&run(dir.path(), &args)), 0);
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let row = report.lines().nth(1).unwrap();
    assert!(row.starts_with("dense,0.0,"), "{row}");
}
