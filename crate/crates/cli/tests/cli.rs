use std::path::Path;
use std::process::{Command, Output};

const STAGES: [&str; 8] = [
    "gen-data",
    "make-teacher",
    "distill-image",
    "distill-text",
    "align",
    "eval",
    "ablate",
    "report",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipdistill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_all(out: &Path, extra: &[&str]) {
    for stage in STAGES {
        let mut args = vec![stage, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
    }
}

fn metrics_without_wall(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(l).unwrap();
            v.remove("wall_ms").expect("wall_ms present");
            serde_json::to_string(&v).unwrap()
        })
        .collect()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn eval_without_checkpoints_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.dckp"), "{}", stderr(&o));
}

#[test]
fn config_problems_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&[
        "gen-data",
        "--out",
        out,
        "--config",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"beta": -1}"#).unwrap();
    let o = run(&["gen-data", "--out", out, "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beta"));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(run(&["gen-data", "--out", out]).status.success());
    let data = dir.path().join("data.dckp");
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] = b'X';
    std::fs::write(&data, bytes).unwrap();
    let o = run(&["make-teacher", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn mismatched_seed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(run(&["gen-data", "--out", out]).status.success());
    let o = run(&["make-teacher", "--out", out, "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for loss in [
        "smooth_l1",
        "infonce_i2t",
        "infonce_t2i",
        "contrastive_total",
        "image_distill",
        "text_distill",
    ] {
        assert!(text.contains(loss), "{loss} missing from output");
    }
}

#[test]
fn scripted_run_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path(), &["--seed", "3"]);
    run_all(b.path(), &["--seed", "3"]);
    for file in [
        "data.dckp",
        "teacher.dckp",
        "student_image.dckp",
        "student_text.dckp",
        "aligned_text.dckp",
        "eval.json",
        "ablation.json",
        "report.txt",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    assert_eq!(
        metrics_without_wall(&a.path().join("metrics.jsonl")),
        metrics_without_wall(&b.path().join("metrics.jsonl"))
    );
    let report = std::fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(report.contains("image tower unchanged by alignment: true"));
}
