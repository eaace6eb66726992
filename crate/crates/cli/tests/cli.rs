use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn famcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_famcount"))
        .args(args)
        .env_remove("FAMCOUNT_CKPT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run famcount")
}

fn json_line(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected one JSON line, got {stdout:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset plus a briefly trained checkpoint, shared by
/// the tests that need a model.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let runs = dir.path().join("run");
        json_line(&famcount(&["synth", "--out", s(&data), "--n", "2", "--val", "2", "--seed", "4"]));
        json_line(&famcount(&[
            "train", "--data", s(&data), "--out", s(&runs), "--resize-height", "64", "--epochs", "1",
            "--output-gain", "0.01",
        ]));
        Fixture {
            ckpt: runs.join("best.safetensors"),
            data,
            _dir: dir,
        }
    })
}

fn first_image(data: &Path) -> (PathBuf, String) {
    let ann: Value = serde_json::from_str(&std::fs::read_to_string(data.join("annotations.json")).unwrap()).unwrap();
    let (id, rec) = ann.as_object().unwrap().iter().next().unwrap();
    let b = &rec["exemplars"][0];
    let arg = format!("{},{},{},{}", b[0], b[1], b[2], b[3]);
    (data.join("images").join(format!("{id}.png")), arg)
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["synth", "make-targets", "train", "eval", "count", "serve"] {
        let out = famcount(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_subcommand_or_flag_is_a_usage_error() {
    assert_eq!(famcount(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(famcount(&["synth", "--bogus"]).status.code(), Some(2));
}

#[test]
fn synth_writes_a_loadable_dataset_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = json_line(&famcount(&["synth", "--out", s(&a), "--n", "8", "--seed", "1"]));
    assert_eq!(report["images"], 8);
    assert_eq!(report["warnings"], 0);
    json_line(&famcount(&["synth", "--out", s(&b), "--n", "8", "--seed", "1"]));
    let read = |p: &Path| std::fs::read(p.join("annotations.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.join("splits.json").is_file());
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 8);
}

#[test]
fn synth_into_an_unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let out = famcount(&["synth", "--out", s(&file.join("sub")), "--n", "1"]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn make_targets_writes_one_cache_entry_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    json_line(&famcount(&["synth", "--out", s(&data), "--n", "3", "--seed", "2"]));
    let report = json_line(&famcount(&["make-targets", "--data", s(&data), "--resize-height", "64"]));
    assert_eq!(report["targets"], 3);
    let cache = data.join("targets").join("h64");
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 6);
}

#[test]
fn missing_dataset_is_exit_5() {
    let out = famcount(&["make-targets", "--data", "/nonexistent/dataset"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn count_with_and_without_adaptation() {
    let fx = fixture();
    let (image, b) = first_image(&fx.data);
    let base = ["count", s(&image), "--box", &b, "--checkpoint", s(&fx.ckpt)];
    let plain = json_line(&famcount(&base));
    assert_eq!(plain["adapted"], false);
    assert_eq!(plain["steps"], 0);
    let zero = json_line(&famcount(&[&base[..], &["--adapt", "--steps", "0"]].concat()));
    assert_eq!(zero["adapted"], true);
    assert_eq!(zero["count"], plain["count"]);

    let dir = tempfile::tempdir().unwrap();
    let heat = dir.path().join("heat.png");
    let adapted = json_line(&famcount(&[&base[..], &["--adapt", "--steps", "2", "--heatmap", s(&heat)]].concat()));
    assert_eq!(adapted["adapted"], true);
    assert_eq!(adapted["steps"], 2);
    assert!(adapted["seconds"].as_f64().unwrap() >= 0.0);
    let src = image::image_dimensions(&image).unwrap();
    assert_eq!(image::image_dimensions(&heat).unwrap(), src);
}

#[test]
fn count_reads_the_checkpoint_from_the_environment() {
    let fx = fixture();
    let (image, b) = first_image(&fx.data);
    let out = Command::new(env!("CARGO_BIN_EXE_famcount"))
        .args(["count", s(&image), "--box", &b])
        .env("FAMCOUNT_CKPT", &fx.ckpt)
        .output()
        .unwrap();
    json_line(&out);
}

#[test]
fn count_flag_errors() {
    let fx = fixture();
    let (image, b) = first_image(&fx.data);
    let ck = s(&fx.ckpt);

    let out = famcount(&["count", s(&image), "--checkpoint", ck]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--box"));

    let four = ["count", s(&image), "--checkpoint", ck, "--box", &b, "--box", &b, "--box", &b, "--box", &b];
    assert_eq!(famcount(&four).status.code(), Some(2));
    assert_eq!(famcount(&["count", s(&image), "--checkpoint", ck, "--box", "1,2,3"]).status.code(), Some(2));
    assert_eq!(famcount(&["count", s(&image), "--checkpoint", ck, "--box", "30,2,3,40"]).status.code(), Some(2));
    assert_eq!(
        famcount(&["count", s(&image), "--checkpoint", ck, "--box", &b, "--adapt", "--steps", "1001"]).status.code(),
        Some(2)
    );
}

#[test]
fn count_checkpoint_and_image_errors() {
    let fx = fixture();
    let (image, b) = first_image(&fx.data);
    assert_eq!(famcount(&["count", s(&image), "--box", &b]).status.code(), Some(3));
    assert_eq!(
        famcount(&["count", s(&image), "--box", &b, "--checkpoint", "/nonexistent.safetensors"]).status.code(),
        Some(3)
    );
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("notes.png");
    std::fs::write(&text, "not an image").unwrap();
    assert_eq!(
        famcount(&["count", s(&text), "--box", &b, "--checkpoint", s(&fx.ckpt)]).status.code(),
        Some(4)
    );
}

#[test]
fn eval_writes_a_report_and_is_deterministic() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let report = dir.path().join(name);
        let line = json_line(&famcount(&[
            "eval", "--data", s(&fx.data), "--split", "val", "--checkpoint", s(&fx.ckpt), "--exemplars", "3",
            "--adapt", "--steps", "2", "--report", s(&report),
        ]));
        let mut body: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
        body.as_object_mut().unwrap().remove("wall_time");
        (line, body)
    };
    let (line, a) = run("a.json");
    let (_, b) = run("b.json");
    assert_eq!(line["n"], 2);
    assert_eq!(a["n"], 2);
    assert_eq!(a["per_image"].as_array().unwrap().len(), 2);
    assert!(a["rmse"].as_f64().unwrap() >= a["mae"].as_f64().unwrap());
    assert_eq!(a, b);
}

#[test]
fn eval_flag_and_input_errors() {
    let fx = fixture();
    let base = ["eval", "--data", s(&fx.data), "--checkpoint", s(&fx.ckpt)];
    assert_eq!(famcount(&[&base[..], &["--exemplars", "4"]].concat()).status.code(), Some(2));
    assert_eq!(famcount(&[&base[..], &["--split", "test"]].concat()).status.code(), Some(5));
    assert_eq!(
        famcount(&["eval", "--data", "/nonexistent", "--checkpoint", s(&fx.ckpt)]).status.code(),
        Some(5)
    );
    assert_eq!(famcount(&["eval", "--data", s(&fx.data)]).status.code(), Some(3));
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_exit_3() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, b"garbage").unwrap();
    assert_eq!(
        famcount(&["eval", "--data", s(&fx.data), "--checkpoint", s(&bad)]).status.code(),
        Some(3)
    );
    // Warm-starting a 96-pixel run from a 64-pixel checkpoint.
    let out = dir.path().join("warm");
    let warm = famcount(&[
        "train", "--data", s(&fx.data), "--out", s(&out), "--resize-height", "96", "--epochs", "1",
        "--init", s(&fx.ckpt),
    ]);
    assert_eq!(warm.status.code(), Some(3));
}
