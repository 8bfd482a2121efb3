use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tipnet::cli::{exit_code, RunConfig, Scale};
use tipnet::error::Error;

fn tipnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tipnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    let cfg = serde_json::json!({
        "dataset": {"n_subjects": 2, "mlem_iters_one": 5, "mlem_iters_four": 5},
        "training": {"batch_size": 1, "critic_steps_per_gen": 1, "checkpoint_interval": 0},
        "mlem": {"n_iters": 5}
    });
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"training": {"stepz": 3}}"#).unwrap();
    let o = tipnet(&["--config", s(&cfg), "--out", s(&dir.path().join("o")), "selftest"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_error(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("stepz"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tipnet(&["--out", s(dir.path()), "mlem", "--proj", "/nonexistent/p.proj.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_error(&o)["error"]["exit_code"], 4);
}

#[test]
fn bad_arguments_are_reported_as_json() {
    let o = tipnet(&["--scale", "huge", "selftest"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["kind"], "config");
}

#[test]
fn exit_codes_follow_error_class() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
    assert_eq!(exit_code(&Error::Reconstruction("x".into())), 3);
    assert_eq!(exit_code(&Error::Dataset("x".into())), 4);
}

#[test]
fn config_merges_over_scale_defaults() {
    let c = RunConfig::merged(Scale::Paper, Some(serde_json::json!({"mlem": {"n_iters": 7}}))).unwrap();
    assert_eq!(c.mlem.n_iters, 7);
    assert_eq!(c.grid.dims.nx, 70);
    assert!(RunConfig::merged(Scale::Desk, Some(serde_json::json!({"nope": 1}))).is_err());
    assert!(RunConfig::merged(Scale::Desk, Some(serde_json::json!({"training": {"adam_beta1": 1.5}}))).is_err());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let o = tipnet(&["--config", s(&cfg), "--seed", "3", "--out", s(&data), "phantom"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // the echoed configuration reproduces the dataset byte for byte
    let again = dir.path().join("again");
    let echoed = data.join("effective_config.json");
    let o = tipnet(&["--config", s(&echoed), "--out", s(&again), "phantom"]);
    assert!(o.status.success());
    assert_eq!(tree(&data), tree(&again));

    // project and reconstruct a phantom
    let phantom = data.join("subject_000/phantom.vol.json");
    let proj_dir = dir.path().join("proj");
    let o = tipnet(&["--config", s(&cfg), "--out", s(&proj_dir), "project", "--volume", s(&phantom), "--counts", "1e5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = dir.path().join("rec");
    let proj = proj_dir.join("projections.proj.json");
    let o = tipnet(&["--config", s(&cfg), "--out", s(&rec), "mlem", "--proj", s(&proj)]);
    assert!(o.status.success());
    assert!(rec.join("mlem.vol.json").is_file());

    // identical prediction and reference
    let ev = dir.path().join("eval");
    let r = s(&phantom);
    let o = tipnet(&["--out", s(&ev), "eval", "--pred", r, "--ref", r]);
    assert!(o.status.success());
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["subjects"][0]["values"]["ssim"], 1.0);
    assert_eq!(report["subjects"][0]["values"]["rmse"], 0.0);
    assert!(report["subjects"][0]["values"]["psnr"].is_null());

    // train briefly, then infer and evaluate with the model
    let run = dir.path().join("run");
    let o = tipnet(&["--config", s(&cfg), "--out", s(&run), "train", "--dataset", s(&data), "--steps", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = run.join("final.model.json");
    assert!(run.join("train_log.jsonl").is_file() && model.is_file());
    let inf = dir.path().join("inf");
    let o = tipnet(&["--out", s(&inf), "infer", "--model", s(&model), "--dataset", s(&data), "--subject", "subject_001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(inf.join("subject_001/img_p.vol.json").is_file());
    assert!(inf.join("subject_001/output.vol.json").is_file());
    let ev2 = dir.path().join("eval2");
    let o = tipnet(&["--out", s(&ev2), "eval", "--dataset", s(&data), "--model", s(&model)]);
    assert!(o.status.success());
    let csv = fs::read_to_string(ev2.join("metrics.csv")).unwrap();
    for m in ["mlem_one", "img_p", "tipnet"] {
        assert!(csv.lines().any(|l| l.starts_with(m)), "{m} missing from {csv}");
    }

    // render with a shared window, both formats
    let img = dir.path().join("img");
    let mlem_one = data.join("subject_000/mlem_one.vol.json");
    let o = tipnet(&["--out", s(&img), "render", "--volume", r, "--volume", s(&mlem_one)]);
    assert!(o.status.success());
    let png = fs::read(img.join("00_phantom_short.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    assert!(img.join("01_mlem_one_long.png").is_file());
    let o = tipnet(&["--out", s(&img), "render", "--volume", r, "--format", "pgm", "--zoom", "1"]);
    assert!(o.status.success());
    let pgm = fs::read(img.join("00_phantom_long.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n49 16\n255\n"));
}

#[test]
fn selftest_passes_on_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = tipnet(&["--out", s(dir.path()), "selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let checks: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let adj = checks.iter().find(|c| c["check"] == "adjoint_one_angle").unwrap();
    assert!(adj["value"].as_f64().unwrap() <= 1e-5);
    assert!(checks.iter().all(|c| c["pass"] == true));
}
