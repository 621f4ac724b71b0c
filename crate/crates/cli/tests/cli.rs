use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use breadcrumbs_cli::pipeline::{strategy_stage, Manifest};
use serde_json::Value;

const SMALL: &str = r#"
classes = 6
input_dim = 8
n_max = 60
n_min = 5
test_per_class = 10
epochs = 4
hidden = 16
feature_dim = 8
many_threshold = 40
few_threshold = 10
lemma_pairs = 10
# this small problem is not separable, so the shared optimum leaves a gap
optimality = "per_class"
seeds = [0, 1]
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn breadcrumbs(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_breadcrumbs"))
        .arg("--config")
        .arg(config)
        .arg("--quiet")
        .args(args)
        .env_remove("BREADCRUMBS_OUT_ROOT")
        .output()
        .unwrap()
}

fn out_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("n_min = 5\n", ""));
    let o = breadcrumbs(&cfg, &["generate", "--out", &out_arg(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_min"), "{}", stderr(&o));
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = breadcrumbs(&cfg, &["run", "--strategy", "nope", "--out", &out_arg(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = breadcrumbs(&cfg, &["generate", "--out", &out_arg(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.bcts", "test.bcts", "train.csv", "test.csv", "stats.json"] {
        let (x, y) = (fs::read(a.join("dataset").join(f)).unwrap(), fs::read(b.join("dataset").join(f)).unwrap());
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn output_root_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let root = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_breadcrumbs"))
        .args(["generate", "--quiet", "--config"])
        .arg(&cfg)
        .env("BREADCRUMBS_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("dataset/train.bcts").exists());
}

#[test]
fn full_run_records_every_stage_and_reruns_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = breadcrumbs(&cfg, &["run", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = Manifest::load(&out).unwrap().unwrap();
    let stage1 = manifest.stages.keys().filter(|k| k.ends_with("/stage1")).count();
    let stage2 = ["random", "class_balanced", "weak_breadcrumb", "strong_breadcrumb"]
        .iter()
        .flat_map(|s| [0, 1].map(|seed| strategy_stage(seed, s)))
        .filter(|id| manifest.stages.contains_key(id))
        .count();
    assert_eq!((stage1, stage2), (2, 8));

    let report = fs::read(out.join("report.json")).unwrap();
    let o = breadcrumbs(&cfg, &["run", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Manifest::load(&out).unwrap().unwrap(), manifest, "rerun must not redo stages");
    assert_eq!(fs::read(out.join("report.json")).unwrap(), report);

    let r: Value = serde_json::from_slice(&report).unwrap();
    let rows: Vec<&str> = r["strategies"].as_array().unwrap().iter().map(|s| s["strategy"].as_str().unwrap()).collect();
    assert_eq!(rows, ["random", "class_balanced", "weak_breadcrumb", "strong_breadcrumb"]);
    assert!(r["strategies"][0]["overall"]["std"].is_string() || r["strategies"][0]["overall"]["std"].is_number());
}

#[test]
fn strong_breadcrumb_writes_one_trail_file_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = breadcrumbs(&cfg, &["run", "--strategy", "strong_breadcrumb", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = Manifest::load(&out).unwrap().unwrap();
    for seed in [0, 1] {
        let rec = &manifest.stages[&strategy_stage(seed, "strong_breadcrumb")];
        let trails = rec.files.iter().filter(|f| f.contains("/trails/")).count();
        assert_eq!(trails, 4, "seed {seed}");
    }
    assert!(!manifest.stages.contains_key(&strategy_stage(0, "random")));
}

#[test]
fn single_seed_report_omits_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = breadcrumbs(&cfg, &["run", "--seed", "3", "--strategy", "random,class_balanced", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let rows = r["strategies"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["overall"].get("mean").is_some());
        assert!(row["overall"].get("std").is_none());
    }
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(!text.contains('±'));
}

#[test]
fn changed_config_refuses_an_existing_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(breadcrumbs(&cfg, &["generate", "--out", &out_arg(&out)]).status.success());
    let other = write_config(dir.path(), &SMALL.replace("epochs = 4", "epochs = 5"));
    let o = breadcrumbs(&other, &["generate", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config hash"));
}

#[test]
fn report_refuses_mixed_hash_inputs_and_lists_missing_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = breadcrumbs(&cfg, &["run", "--seed", "0", "--strategy", "random", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = breadcrumbs(&cfg, &["report", "--seed", "0", "--strategy", "random,weak_breadcrumb", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed-0/weak_breadcrumb"), "{}", stderr(&o));

    let metrics = out.join("seed-0/random/metrics.json");
    let mut v: Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    v["config_hash"] = Value::String("00".repeat(32));
    fs::write(&metrics, serde_json::to_string(&v).unwrap()).unwrap();
    let o = breadcrumbs(&cfg, &["report", "--seed", "0", "--strategy", "random", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mix"), "{}", stderr(&o));
}

#[test]
fn uncertifiable_fits_fail_verification_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}fit_max_iters = 1\n"));
    let out = dir.path().join("out");
    let o = breadcrumbs(&cfg, &["verify", "--seed", "0", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(out.join("seed-0/verify.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], Value::Bool(false));
    assert_eq!(v["lemma"]["checked"].as_u64(), Some(0));
}
