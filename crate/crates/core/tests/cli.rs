mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::fixture;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn unilabel(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_unilabel")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn taxonomy_args() -> Vec<String> {
    let list = ["cityscapes", "suim", "sun_rgbd"]
        .map(|n| fixture(&format!("{n}.txt")).display().to_string())
        .join(",");
    vec![
        "--taxonomies".into(),
        list,
        "--directives".into(),
        fixture("directives.txt").display().to_string(),
    ]
}

fn run_with(base: &[String], extra: &[&str]) -> Run {
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.extend_from_slice(extra);
    let run = unilabel(&args);
    assert_eq!(run.code, 0, "{args:?}\nstdout:\n{}\nstderr:\n{}", run.stdout, run.stderr);
    run
}

/// Every file under `root`, keyed by its relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}

/// ingest → split → remap → self-evaluation → stats into `out`.
fn pipeline(data: &Path, out: &Path, workers: &str) {
    let mut base = taxonomy_args();
    base.extend(["--out".into(), out.display().to_string(), "--workers".into(), workers.into()]);
    let s = |p: &Path| p.display().to_string();
    run_with(
        &base,
        &[
            "ingest",
            "--dataset",
            &format!("cityscapes={}", s(&data.join("cityscapes"))),
            "--dataset",
            &format!("suim={}", s(&data.join("suim"))),
        ],
    );
    let manifest = s(&out.join("manifest.tsv"));
    run_with(&base, &["split", "--manifest", &manifest, "--seed", "7"]);
    run_with(&base, &["remap", "--manifest", &manifest]);
    let universal = s(out);
    let eval_out = s(&out.join("eval"));
    let mut eval_base = taxonomy_args();
    eval_base.extend(["--out".into(), eval_out, "--workers".into(), workers.into()]);
    run_with(&eval_base, &["eval", "--gt", &universal, "--pred", &universal]);
    run_with(&base, &["stats", "--manifest", &manifest]);
}

#[test]
fn merge_reports_the_universal_space() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = taxonomy_args();
    base.extend(["--out".into(), dir.path().display().to_string()]);
    let run = run_with(&base, &["merge"]);
    assert!(run.stdout.contains("63 classes (+70% vs largest input of 37 classes)"), "{}", run.stdout);
    let space: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("universal.json")).unwrap()).unwrap();
    assert_eq!(space["classes"].as_array().unwrap().len(), 63);
    assert_eq!(space["ignore_id"], 255);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("merge.json")).unwrap()).unwrap();
    assert_eq!(summary["largest_input"], 37);
}

#[test]
fn two_dataset_merge_without_directives() {
    let dir = tempfile::tempdir().unwrap();
    let list = format!("{},{}", fixture("cityscapes.txt").display(), fixture("suim.txt").display());
    let run = unilabel(&["--taxonomies", &list, "--out", &dir.path().display().to_string(), "merge"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("universal label-space: 27 classes"));
}

#[test]
fn exit_codes() {
    assert_eq!(unilabel(&["frobnicate"]).code, 2);
    assert_eq!(unilabel(&["--help"]).code, 0);
    assert_eq!(unilabel(&["merge"]).code, 2, "taxonomies are required");
    let mut base = taxonomy_args();
    base.extend(["--workers".into(), "0".into()]);
    assert_eq!(run_args(&base, &["merge"]).code, 2);
    assert_eq!(run_args(&taxonomy_args(), &["split", "--manifest", "m.tsv", "--fraction", "1.5"]).code, 2);

    let missing = unilabel(&["--taxonomies", "/no/such/taxonomy.txt", "merge"]);
    assert_eq!(missing.code, 1);
    assert!(missing.stderr.contains("/no/such/taxonomy.txt"), "{}", missing.stderr);
}

fn run_args(base: &[String], extra: &[&str]) -> Run {
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.extend_from_slice(extra);
    unilabel(&args)
}

#[test]
fn malformed_inputs_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "dataset bad encoding=indexed\nclass 3 \"road\"\nclass 3 \"car\"\n").unwrap();
    let run = unilabel(&["--taxonomies", &bad.display().to_string(), "merge"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("line 3"), "{}", run.stderr);

    let directives = dir.path().join("d.txt");
    fs::write(&directives, "merge cityscapes.person -> \"person\"\n").unwrap();
    let list = format!("{},{}", fixture("cityscapes.txt").display(), fixture("sun_rgbd.txt").display());
    let run = unilabel(&["--taxonomies", &list, "--directives", &directives.display().to_string(), "merge"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("line 1"), "{}", run.stderr);

    let manifest = dir.path().join("m.tsv");
    fs::write(&manifest, "cityscapes\ta.png\n").unwrap();
    let run = run_args(&taxonomy_args(), &["stats", "--manifest", &manifest.display().to_string()]);
    assert_eq!(run.code, 1);
}

#[test]
fn pipeline_self_evaluation_is_perfect() {
    let data = tempfile::tempdir().unwrap();
    common::write_corpus(data.path(), 40, 1);
    let out = tempfile::tempdir().unwrap();
    pipeline(data.path(), out.path(), "2");

    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("eval/eval.json")).unwrap()).unwrap();
    for dataset in ["cityscapes", "suim"] {
        assert_eq!(eval[dataset]["miou"], 1.0, "{dataset}");
        assert_eq!(eval[dataset]["exclusivity"], 1.0);
    }
    let table = fs::read_to_string(out.path().join("eval/eval.txt")).unwrap();
    assert!(table.contains("100.00"));

    let manifest = fs::read_to_string(out.path().join("manifest.tsv")).unwrap();
    let val = manifest.lines().filter(|l| l.ends_with("\tval")).count();
    assert_eq!(val, 6 + 2, "20% of 30 cityscapes and 10 suim records");
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("split.json")).unwrap()).unwrap();
    assert_eq!(split["suim"]["seed"], 7);

    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("stats.json")).unwrap()).unwrap();
    assert!(stats["datasets"]["cityscapes"]["divergence"].as_f64().is_some());
    assert_eq!(stats["universal"]["records"], 40);
}

#[test]
fn reruns_are_byte_identical_for_any_worker_count() {
    let data = tempfile::tempdir().unwrap();
    common::write_corpus(data.path(), 24, 2);
    let out = tempfile::tempdir().unwrap();
    let mut reference = None;
    for workers in ["1", "2", "8", "1"] {
        fs::remove_dir_all(out.path()).unwrap();
        fs::create_dir_all(out.path()).unwrap();
        pipeline(data.path(), out.path(), workers);
        let snap = snapshot(out.path());
        match &reference {
            None => reference = Some(snap),
            Some(r) => assert!(r == &snap, "outputs differ with {workers} workers"),
        }
    }
}

#[test]
fn partially_split_manifest_needs_resplit() {
    let data = tempfile::tempdir().unwrap();
    common::write_corpus(data.path(), 12, 4);
    let out = tempfile::tempdir().unwrap();
    pipeline(data.path(), out.path(), "1");
    let path = out.path().join("manifest.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let edited = text.replacen("\tval\n", "\tunassigned\n", 1);
    assert_ne!(text, edited);
    fs::write(&path, edited).unwrap();

    let mut base = taxonomy_args();
    base.extend(["--out".into(), out.path().display().to_string()]);
    let p = path.display().to_string();
    let run = run_args(&base, &["split", "--manifest", &p]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("--resplit"), "{}", run.stderr);
    run_with(&base, &["split", "--manifest", &p, "--resplit"]);
}

#[test]
fn config_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(&dir.path().join("data"), 8, 5);
    let config = serde_json::json!({
        "taxonomies": [fixture("cityscapes.txt"), fixture("suim.txt"), fixture("sun_rgbd.txt")],
        "directives": fixture("directives.txt"),
        "datasets": [
            {"id": "cityscapes", "root": "data/cityscapes"},
            {"id": "suim", "root": "data/suim"}
        ],
        "output": "out",
        "seed": 3
    });
    let path = dir.path().join("pipeline.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let c = path.display().to_string();
    let run = unilabel(&["--config", &c, "ingest"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(dir.path().join("out/manifest.tsv").exists());
    assert_eq!(unilabel(&["--config", &c, "bogus"]).code, 2);

    fs::write(&path, r#"{"taxonomies": [], "sed": 1}"#).unwrap();
    assert_eq!(unilabel(&["--config", &c, "merge"]).code, 2);
}

#[test]
fn eval_with_a_stored_space_and_a_missing_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = taxonomy_args();
    base.extend(["--out".into(), dir.path().display().to_string()]);
    run_with(&base, &["merge"]);
    let gt = dir.path().join("gt/cityscapes");
    let pred = dir.path().join("pred/cityscapes");
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    image::GrayImage::from_raw(2, 2, vec![0, 0, 1, 1]).unwrap().save(gt.join("a.png")).unwrap();
    image::GrayImage::from_raw(2, 2, vec![0, 1, 1, 1]).unwrap().save(pred.join("a.png")).unwrap();
    let space = dir.path().join("universal.json").display().to_string();
    let args = [
        "--out",
        &dir.path().join("report").display().to_string(),
        "eval",
        "--gt",
        &dir.path().join("gt").display().to_string(),
        "--pred",
        &dir.path().join("pred").display().to_string(),
        "--space",
        &space,
    ]
    .map(String::from);
    let run = run_with(&args, &[]);
    // road 1/2, sidewalk 2/3 over the cityscapes classes
    assert!(run.stdout.contains("58.33"), "{}", run.stdout);

    fs::remove_file(pred.join("a.png")).unwrap();
    let run = run_args(&args, &[]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("a.png"), "{}", run.stderr);
}
