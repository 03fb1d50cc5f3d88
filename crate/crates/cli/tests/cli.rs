use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hcvp::checkpoint::Checkpoint;
use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = "batch_size = 8
eval_every = 5
pretrain_steps = 4
vit.patch_size = 8
vit.embed_dim = 16
vit.depth = 2
vit.heads = 2
";

fn hcvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcvp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        let f = Fixture { dir };
        let out = hcvp(&["gen", "--per-cell", "10", "--seed", "3", "--out", s(&f.path("data"))]);
        assert_eq!(code(&out), 0);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.path("tiny.cfg");
        let data = self.path("data");
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--steps", "6", "--out", s(&out)];
        args.extend_from_slice(extra);
        hcvp(&args)
    }
}

#[test]
fn gen_writes_a_dataset_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let args = ["gen", "--classes", "4", "--domains", "4", "--per-cell", "25", "--seed", "7", "--out", s(&out)];
    let first = hcvp(&args);
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("400 samples"));
    let data = hcvp::synth::Dataset::import(&out).unwrap();
    assert_eq!(data.samples.len(), 400);
    assert_eq!(data.config.seed, 7);

    let again = hcvp(&args);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&hcvp(&forced)), 0);
    let manifests = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("manifest"))
        .count();
    assert_eq!(manifests, 1);
    assert_eq!(hcvp::synth::Dataset::import(&out).unwrap(), data);
}

#[test]
fn spurious_flag_is_recorded_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    assert_eq!(code(&hcvp(&["gen", "--per-cell", "8", "--spurious", "0.90", "--out", s(&out)])), 0);
    let m = manifest(&out);
    let args: Vec<&str> = m["args"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(args.windows(2).any(|w| w == ["--spurious", "0.90"]));
    assert_eq!(m["config"]["spurious_flag"], "0.90");
    assert_eq!(m["dataset"]["spurious"], 0.9);
    assert_eq!(m["status"], "complete");
}

#[test]
fn manifest_hashes_every_artifact() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let dir = f.path("run");
    let m = manifest(&dir);
    let artifacts = m["artifacts"].as_object().unwrap();
    let names: Vec<&str> = artifacts.keys().map(String::as_str).collect();
    assert_eq!(names, ["best.ckpt", "checkpoint.ckpt", "metrics.jsonl"]);
    for (name, hash) in artifacts {
        let digest = Sha256::digest(fs::read(dir.join(name)).unwrap());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hash, &hex, "{name}");
    }
    assert_eq!(m["config"]["weights"]["lambda_pcl"], 0.1);
    assert_eq!(m["config"]["weights"]["lambda_cci"], 1.0);
    assert_eq!(m["config"]["steps"], 6);
    assert_eq!(m["config"]["vit"]["num_classes"], 4);
}

#[test]
fn erm_checkpoint_has_no_prompt_parameters() {
    let f = Fixture::new();
    let out = f.train("erm", &["--method", "erm", "--unseen", "3", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = Checkpoint::load(&f.path("erm/checkpoint.ckpt")).unwrap();
    assert!(!ckpt.manifest.is_empty());
    assert!(ckpt.manifest.iter().all(|e| e.name.starts_with("vit.")));
    for line in fs::read_to_string(f.path("erm/metrics.jsonl")).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert!(r["loss"]["pcl"].is_null() && r["loss"]["cci"].is_null());
    }

    let eval = hcvp(&["eval", "--checkpoint", s(&f.path("erm/best.ckpt"))]);
    assert_eq!(code(&eval), 0);
    assert!(String::from_utf8_lossy(&eval.stderr).contains("purity skipped"));
    assert!(!stdout(&eval).contains("prompt purity"));
}

#[test]
fn flag_ablation_matches_the_vanilla_ablation_run() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("vanilla", &["--no-pcl", "--no-cci"])), 0);
    let m = manifest(&f.path("vanilla"));
    assert_eq!(m["config"]["ablation"]["use_pcl"], false);
    assert_eq!(m["config"]["ablation"]["use_cci"], false);

    let cfg = f.path("tiny.cfg");
    let data = f.path("data");
    let ab = f.path("ab");
    let out = hcvp(&["ablate", "--seeds", "0", "--config", s(&cfg), "--data", s(&data), "--steps", "6", "--out", s(&ab)]);
    assert_eq!(code(&out), 0);
    let from_ablation = fs::read_to_string(ab.join("runs/vanilla-d3-s0/metrics.jsonl")).unwrap();
    let from_flags = fs::read_to_string(f.path("vanilla/metrics.jsonl")).unwrap();
    // the ablation run additionally scores its best checkpoint on the unseen domain
    assert!(from_ablation.starts_with(&from_flags));
    assert_eq!(from_ablation.lines().count(), from_flags.lines().count() + 1);
}

#[test]
fn reruns_are_bitwise_identical() {
    let f = Fixture::new();
    let a = f.train("a", &["--seed", "4"]);
    let b = f.train("b", &["--seed", "4"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    for name in ["metrics.jsonl", "checkpoint.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&f.path("a"))["artifacts"], manifest(&f.path("b"))["artifacts"]);
}

#[test]
fn eval_reports_and_exports_embeddings() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let ev = f.path("ev");
    let out = hcvp(&[
        "eval",
        "--checkpoint",
        s(&f.path("run/best.ckpt")),
        "--embeddings",
        "x_n,domain_prompt,task",
        "--split",
        "all",
        "--out",
        s(&ev),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let records: Vec<Value> = text
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let metrics: Vec<&str> = records.iter().map(|r| r["extra"]["metric"].as_str().unwrap()).collect();
    assert_eq!(metrics, ["unseen_accuracy", "inter_domain_distance", "prompt_purity"]);
    assert!(text.contains("domain prompt purity"));
    assert!(!text.contains("dataset:"));
    assert_eq!(fs::read_to_string(ev.join("reports.jsonl")).unwrap().lines().count(), 3);
    for kind in ["x_n", "domain_prompt", "task_prompt"] {
        let t = hcvp::eval::read_embeddings(&ev.join(format!("embeddings_{kind}.csv"))).unwrap();
        assert_eq!(t.dim, 16);
        assert_eq!(t.labels.len(), 160);
    }
    assert_eq!(manifest(&ev)["artifacts"].as_object().unwrap().len(), 4);
}

#[test]
fn ablate_runs_every_variant_for_every_seed() {
    let f = Fixture::new();
    let ab = f.path("ab");
    let (cfg, data) = (f.path("tiny.cfg"), f.path("data"));
    let out = hcvp(&[
        "ablate", "--seeds", "0,1,2", "--jobs", "2", "--config", s(&cfg), "--data", s(&data), "--steps", "5", "--out",
        s(&ab),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(ab.join("runs.jsonl")).unwrap().lines().count(), 12);
    assert_eq!(fs::read_dir(ab.join("runs")).unwrap().count(), 12);
    let table = fs::read_to_string(ab.join("table.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(stdout(&out).ends_with(&table));
    for sub in fs::read_dir(ab.join("runs")).unwrap() {
        let m = manifest(&sub.unwrap().path());
        assert_eq!(m["status"], "complete");
    }
}

#[test]
fn sweep_covers_the_grid() {
    let f = Fixture::new();
    let (cfg, data, sw) = (f.path("tiny.cfg"), f.path("data"), f.path("sw"));
    let out = hcvp(&["sweep", "--axis", "pcl", "--config", s(&cfg), "--data", s(&data), "--steps", "3", "--out", s(&sw)]);
    assert_eq!(code(&out), 0);
    let lambdas: Vec<f64> = fs::read_to_string(sw.join("runs.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["extra"]["lambda_pcl"].as_f64().unwrap())
        .collect();
    assert_eq!(lambdas, hcvp::trainer::PCL_GRID);
    let m = manifest(&sw);
    assert_eq!(m["config"]["grid"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_sweep_arguments_fail_before_writing() {
    let f = Fixture::new();
    // an invalid unseen domain stops the command after argument resolution
    let out = hcvp(&["sweep", "--axis", "both", "--unseen", "9", "--data", s(&f.path("data")), "--out", s(&f.path("sw"))]);
    assert_eq!(code(&out), 2);
    assert!(!f.path("sw").exists());
    let mut cfg = fs::read_to_string(f.path("tiny.cfg")).unwrap();
    cfg.push_str("lambda_pcl = 1\n");
    fs::write(f.path("bad.cfg"), cfg).unwrap();
    let out = hcvp(&["sweep", "--axis", "cci", "--config", s(&f.path("bad.cfg")), "--out", s(&f.path("sw"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn primitive_gradcheck_passes() {
    let out = hcvp(&["gradcheck", "--primitives-only"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("worst relative error"));
    assert!(text.lines().filter(|l| l.starts_with('{')).all(|l| {
        let r: Value = serde_json::from_str(l).unwrap();
        r["extra"]["passed"] == true
    }));
    let strict = hcvp(&["gradcheck", "--primitives-only", "--tol", "1e-30"]);
    assert_eq!(code(&strict), 3);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&hcvp(&["train", "--bogus"])), 2);
    assert_eq!(code(&hcvp(&["gen", "--spurious", "1.5", "--out", s(&f.path("x"))])), 2);
    assert_eq!(code(&hcvp(&["gen", "--classes", "1", "--out", s(&f.path("x"))])), 2);
    assert_eq!(code(&hcvp(&["eval", "--checkpoint", s(&f.path("missing.ckpt"))])), 1);
    assert_eq!(code(&f.train("u", &["--unseen", "7"])), 2);
    assert_eq!(code(&hcvp(&["train", "--config", s(&f.path("nope.cfg")), "--out", s(&f.path("y"))])), 1);
    assert_eq!(code(&hcvp(&["ablate", "--jobs", "0", "--out", s(&f.path("z"))])), 2);

    let mut cfg = TINY.to_string();
    cfg.push_str("optimizer.lr = 1e200\n");
    fs::write(f.path("hot.cfg"), cfg).unwrap();
    let data = f.path("data");
    let out = hcvp(&["train", "--config", s(&f.path("hot.cfg")), "--data", s(&data), "--steps", "6", "--out", s(&f.path("hot"))]);
    assert_eq!(code(&out), 3);
    // the manifest was written before training started
    assert_eq!(manifest(&f.path("hot"))["status"], "running");
}
