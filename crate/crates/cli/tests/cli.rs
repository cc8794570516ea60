use std::path::Path;
use std::process::{Command, Output};

use ssmstyle::fixtures;

fn ssmstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmstyle")).args(args).output().expect("spawn ssmstyle")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the fixture image and a config with a short autoencoder pretraining.
fn workspace() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("content.ppm");
    std::fs::write(&content, fixtures::CONTENT_PPM).unwrap();
    let cfg = dir.path().join("fast.json");
    std::fs::write(&cfg, r#"{"autoencoder": {"steps": 20}}"#).unwrap();
    let (c, f) = (path(&content).to_string(), path(&cfg).to_string());
    (dir, c, f)
}

#[test]
fn usage_errors_exit_2() {
    let o = ssmstyle(&["stylize", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--content"));
    assert_eq!(ssmstyle(&["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(ssmstyle(&["ablate", "--suite", "speed", "--out", "x"]).status.code(), Some(2));
    assert_eq!(ssmstyle(&["gradcheck", "--module", "optics"]).status.code(), Some(2));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"mask": {"ratio": 1.5}}"#).unwrap();
    let o = ssmstyle(&["stylize", "--content", "c.ppm", "--out", "o.png", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mask.ratio"), "{}", stderr(&o));
    std::fs::write(&cfg, r#"{"colour": 3}"#).unwrap();
    let o = ssmstyle(&["stylize", "--content", "c.ppm", "--out", "o.png", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_a_wrong_vjp() {
    let o = ssmstyle(&["gradcheck", "--module", "ssm", "--instances", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("gradcheck passed"));
    let o = ssmstyle(&["gradcheck", "--module", "tensor", "--instances", "2", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("faulty_square"));
    assert!(stdout(&o).lines().any(|l| l.contains("faulty_square") && l.ends_with("FAIL")));
}

#[test]
fn bench_scan_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = ssmstyle(&["bench-scan", "--max-len", "256", "--channels", "4", "--reps", "1", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("impl,seq_len,channels,wall_time_ns"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for imp in ["scan_sequential", "scan_parallel", "cross_attention"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{imp},256,4,"))));
    }
}

#[test]
fn stylize_writes_all_artifacts() {
    let (dir, content, cfg) = workspace();
    let out = dir.path().join("run/out.png");
    let o = ssmstyle(&[
        "stylize", "--content", &content, "--config", &cfg, "--out", path(&out), "--epochs", "3",
        "--prompt", "watercolor sketch", "--prompt", "neon city",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let mut names: Vec<String> =
        std::fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    // nothing but the final files: temporaries are renamed into place
    assert_eq!(names, ["effective_config.json", "out.png", "report.json", "trace.csv"]);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(trace.starts_with("epoch,l_dir,l_md,l_so,content,total\n"));
    let echoed = ssmstyle::train::RunConfig::from_path(&run.join("effective_config.json")).unwrap();
    assert_eq!(echoed.prompts, ["watercolor sketch", "neon city"]);
    assert_eq!(echoed.schedule.max_epochs, 3);
    assert_eq!(echoed.autoencoder.steps, 20);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for key in ["clip_score_analog", "ssim", "feature_loss"] {
        assert!(report[key].as_f64().unwrap().is_finite());
    }

    let m = ssmstyle(&[
        "metrics", "--content", &content, "--stylized", path(&out), "--prompt", "watercolor sketch",
    ]);
    assert!(m.status.success(), "{}", stderr(&m));
    let v: serde_json::Value = serde_json::from_str(&stdout(&m)).unwrap();
    assert!(v["ssim"].as_f64().unwrap() <= 1.0);
}

#[test]
fn missing_content_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.png");
    let o = ssmstyle(&["stylize", "--content", path(&dir.path().join("nope.png")), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
