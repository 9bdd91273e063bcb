use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tgbformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgbformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn header(p: &Path) -> String {
    let bytes = std::fs::read(p).unwrap();
    let end = bytes.iter().position(|&b| b == b'\n').unwrap();
    String::from_utf8(bytes[..end].to_vec()).unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.tzr"), path(&dir, "b.tzr"));
    for p in [&a, &b] {
        assert_eq!(code(&tgbformer(&["synth", "--seed", "0", "--output", p])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(header(Path::new(&a)), r#"{"dtype":"f64","shape":[25,24,4,4]}"#);
}

#[test]
fn run_is_deterministic_and_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", r#"{"N":4}"#);
    let (a, b, report) = (path(&dir, "a.tzr"), path(&dir, "b.tzr"), path(&dir, "r.json"));
    for out in [&a, &b] {
        let o = tgbformer(&["run", "--config", &cfg, "--synth", "--output", out, "--report", &report]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(header(Path::new(&a)), r#"{"dtype":"f64","shape":[24,64]}"#);

    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for field in ["stage_timings_ms", "invariants", "checksums", "outputs"] {
        assert!(r.get(field).is_some(), "missing {field}");
    }
    assert!(r["invariants"].as_object().unwrap().values().all(|v| v == true));
    assert_eq!(r["checksums"]["blended"].as_str().unwrap().len(), 64);
}

#[test]
fn input_file_matches_synth_flag() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", r#"{"N":2,"seed":5}"#);
    let frames = path(&dir, "frames.tzr");
    assert_eq!(code(&tgbformer(&["synth", "--config", &cfg, "--output", &frames])), 0);
    let (a, b) = (path(&dir, "a.tzr"), path(&dir, "b.tzr"));
    assert_eq!(code(&tgbformer(&["run", "--config", &cfg, "--input", &frames, "--output", &a])), 0);
    assert_eq!(code(&tgbformer(&["run", "--config", &cfg, "--synth", "--output", &b])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn input_shape_must_match_config() {
    let dir = TempDir::new().unwrap();
    let frames = path(&dir, "frames.tzr");
    let small = write(&dir, "small.json", r#"{"N":2}"#);
    assert_eq!(code(&tgbformer(&["synth", "--config", &small, "--output", &frames])), 0);
    let out = path(&dir, "b.tzr");
    let o = tgbformer(&["run", "--input", &frames, "--output", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`N`"));
}

#[test]
fn desk_run_shape() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "desk.json",
        r#"{"N":3,"frame":{"channels":32,"height":8,"width":8},"d_model":32,"sttm":{"heads":2}}"#,
    );
    let out = path(&dir, "b.tzr");
    assert_eq!(code(&tgbformer(&["run", "--config", &cfg, "--synth", "--output", &out])), 0);
    assert_eq!(header(Path::new(&out)), r#"{"dtype":"f64","shape":[32,192]}"#);
}

#[test]
fn oracle_passes_and_detects_injected_fault() {
    let ok = tgbformer(&["oracle"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("spat_mhsa"));
    let bad = tgbformer(&["oracle", "--inject-fault"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("BREACH"));
}

#[test]
fn oracle_handles_single_token_frames() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "m1.json",
        r#"{"N":3,"frame":{"channels":8,"height":1,"width":1},"d_model":8,"sttm":{"heads":2}}"#,
    );
    assert_eq!(code(&tgbformer(&["oracle", "--config", &cfg, "--seed", "4"])), 0);
}

#[test]
fn gradcheck_blender_and_step_warning() {
    let o = tgbformer(&["gradcheck", "--suite", "blender", "--h", "1e-12"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("blender.w_alpha"));
}

#[test]
fn gradcheck_default_suite_passes() {
    let o = tgbformer(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn gradcheck_rejects_large_instances() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "big.json", "{}");
    assert_eq!(code(&tgbformer(&["gradcheck", "--config", &cfg])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "b.tzr");
    for (i, text) in [r#"{"N":0}"#, r#"{"unknown":true}"#, "not json"].iter().enumerate() {
        let cfg = write(&dir, &format!("c{i}.json"), text);
        let o = tgbformer(&["run", "--config", &cfg, "--synth", "--output", &out]);
        assert_eq!(code(&o), 2, "{text}");
    }
}

#[test]
fn io_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "b.tzr");
    let missing = path(&dir, "missing.json");
    assert_eq!(code(&tgbformer(&["run", "--config", &missing, "--synth", "--output", &out])), 3);
    let garbage = write(&dir, "frames.tzr", "not a tensor");
    assert_eq!(code(&tgbformer(&["run", "--input", &garbage, "--output", &out])), 3);
}
