use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cxrseg_core::io::{load_manifest, read_mask};
use cxrseg_core::metrics::MetricsReport;
use cxrseg_core::quantify::{quantify_masks, QuantReport};
use tempfile::TempDir;

fn cxrseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cxrseg(args);
    assert!(out.status.success(), "cxrseg {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    ok(&["--seed", &seed.to_string(), "synth", "--n", &n.to_string(), "--size", &size.to_string(), "--out", p(dir)]);
    dir.join("manifest.jsonl")
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [&["frobnicate"][..], &["ci", "--metric", "0.5"], &["ci", "--metric", "0.5", "--n", "10", "--bogus"], &[]] {
        let out = cxrseg(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(cxrseg(&["--help"]).status.code(), Some(0));
    assert_eq!(cxrseg(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = TempDir::new().unwrap();
    let out = cxrseg(&["ci", "--metric", "1.5", "--n", "10"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cxrseg(&["infer", "--weights", "/nonexistent.segw", "--image", "/nonexistent.pgm", "--out", p(&tmp.path().join("o.pgm"))]);
    assert_eq!(out.status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = cxrseg(&["--config", p(&bad), "ci", "--metric", "0.5", "--n", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn ci_radius_examples() {
    for (metric, n, radius) in [("0.9611", "6788", "0.0046"), ("0.9799", "6788", "0.0033"), ("0.8305", "1166", "0.0215"), ("0.9889", "1166", "0.0060"), ("1.0", "1166", "0.0000")] {
        assert_eq!(ok(&["ci", "--metric", metric, "--n", n]).trim(), radius, "{metric}/{n}");
    }
    assert_eq!(ok(&["ci", "--metric", "0.9611", "--n", "6788", "--cell"]).trim(), "96.11 ± 0.46");
}

#[test]
fn global_flags_are_accepted_everywhere() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nseed = 3\n").unwrap();
    ok(&["ci", "--metric", "0.5", "--n", "10", "--seed", "4", "--precision", "f32", "--config", p(&cfg)]);
    ok(&["--seed", "4", "--precision", "f64", "--config", p(&cfg), "summary", "--arch", "unet", "--depth", "2", "--base", "4", "--size", "16", "--runs", "1"]);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, 2, 32, 7);
    synth(&b, 2, 32, 7);
    synth(&c, 2, 32, 8);
    let records = load_manifest(a.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
    let mut differs = false;
    for r in &records {
        let rel = r.image.strip_prefix(&a).unwrap();
        assert_eq!(std::fs::read(&r.image).unwrap(), std::fs::read(b.join(rel)).unwrap());
        differs |= std::fs::read(&r.image).unwrap() != std::fs::read(c.join(rel)).unwrap();
    }
    assert!(differs, "a different seed must change the data");
}

#[test]
fn quantify_masks_matches_library() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(tmp.path(), 1, 32, 1);
    let rec = load_manifest(&manifest).unwrap().into_iter().find(|r| r.id.starts_with("covid")).unwrap();
    let (lung, inf) = (rec.lung_mask.clone().unwrap(), rec.infection_mask.clone().unwrap());
    let out_file = tmp.path().join("report.json");
    let stdout = ok(&["quantify", "--lung-mask", p(&lung), "--inf-mask", p(&inf), "--id", "case1", "--out", p(&out_file)]);
    let report: QuantReport = serde_json::from_str(stdout.trim()).unwrap();
    let expected = quantify_masks("case1", &read_mask(&lung).unwrap(), &read_mask(&inf).unwrap()).unwrap();
    assert_eq!(report.case_id, "case1");
    assert_eq!(report.overall_pct, expected.overall_pct);
    assert_eq!(report.detection, expected.detection);
    assert_eq!(report.left_infection_pixels + report.right_infection_pixels, report.infection_pixels);
    let from_file: QuantReport = serde_json::from_str(&std::fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(from_file, report);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(tmp.path(), 2, 32, 1);
    let report_path = tmp.path().join("eval.json");
    let table = ok(&["eval", "--manifest", p(&manifest), "--task", "lung", "--predictions", p(&manifest), "--report", p(&report_path)]);
    assert!(table.contains("DSC"));
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.n, 6);
    assert_eq!(report.value("dsc"), Some(1.0));
    ok(&["eval", "--manifest", p(&manifest), "--task", "detection", "--predictions", p(&manifest), "--report", p(&report_path)]);
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.value("accuracy"), Some(1.0));
}

#[test]
fn train_infer_postprocess_quantify() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 4, 16, 2);
    let (lw, iw) = (tmp.path().join("lung.segw"), tmp.path().join("inf.segw"));
    let common = ["--depth", "2", "--base", "4", "--epochs", "2", "--size", "16", "--k", "2"];
    for (target, w) in [("lung", &lw), ("infection", &iw)] {
        let mut args = vec!["--precision", "f32", "train", "--manifest", p(&manifest), "--target", target, "--out", p(w)];
        args.extend(common);
        let log = ok(&args);
        assert!(log.lines().filter(|l| l.starts_with("epoch ")).count() >= 1, "{log}");
        assert!(w.exists());
    }
    let rec = &load_manifest(&manifest).unwrap()[0];
    let (probs, mask, clean) = (tmp.path().join("p.pgm"), tmp.path().join("m.pgm"), tmp.path().join("c.pgm"));
    ok(&["infer", "--weights", p(&lw), "--image", p(&rec.image), "--out", p(&mask), "--probs", p(&probs)]);
    assert_eq!(read_mask(&mask).unwrap().dims(), (16, 16));
    ok(&["postprocess", "--mask", p(&mask), "--kind", "lung", "--out", p(&clean)]);
    let once = std::fs::read(&clean).unwrap();
    ok(&["postprocess", "--mask", p(&clean), "--kind", "lung", "--out", p(&clean)]);
    assert_eq!(std::fs::read(&clean).unwrap(), once, "post-processing is idempotent");

    let q = |extra: &[&str]| {
        let mut args = vec!["quantify", "--image", p(&rec.image), "--lung-weights", p(&lw), "--inf-weights", p(&iw)];
        args.extend(extra);
        serde_json::from_str::<QuantReport>(ok(&args).trim()).unwrap()
    };
    assert_eq!(q(&[]), q(&[]), "inference is deterministic");
    q(&["--mode", "cascaded", "--overlay", p(&tmp.path().join("o.ppm"))]);
    assert!(tmp.path().join("o.ppm").exists());

    // stored dtype is f32: an explicit f64 run is refused
    let out = cxrseg(&["--precision", "f64", "infer", "--weights", p(&lw), "--image", p(&rec.image), "--out", p(&mask)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dtype"));
}

#[test]
fn workflow_simulate_and_replay() {
    let tmp = TempDir::new().unwrap();
    let state = tmp.path().join("state");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[workflow]\nbatch_size = 10\nstage2_budget = 30\n").unwrap();
    let out = ok(&["--seed", "5", "--config", p(&cfg), "workflow", "simulate", "--state-dir", p(&state), "--items", "120"]);
    assert!(out.contains("events written"));
    let replay = ok(&["workflow", "replay", "--state-dir", p(&state)]);
    assert!(replay.contains("state identical"), "{replay}");
    let progress: serde_json::Value = serde_json::from_str(&ok(&["workflow", "progress", "--state-dir", p(&state)])).unwrap();
    assert_eq!(progress["stage"], "IV");
    // a second simulation into the same directory is refused
    let again = cxrseg(&["--config", p(&cfg), "workflow", "simulate", "--state-dir", p(&state)]);
    assert_eq!(again.status.code(), Some(1));
}
