use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn vpseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vpseg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// SHA-256 over every file below `dir`, in path order.
fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(f).unwrap());
    }
    format!("{:x}", h.finalize())
}

const TINY: &[&str] = &["--desk", "--base-channels", "4", "--heads", "2"];

fn setup(dir: &Path) {
    let mut gen = vec!["gen-data", "--out", "data", "--clips", "2", "--frames", "7"];
    gen.extend(TINY);
    ok(&gen, dir);
    let mut train = vec!["train", "--out", "m.safetensors", "--log", "train.jsonl", "--max-steps", "2", "--train-clips", "2"];
    train.extend(TINY);
    ok(&train, dir);
}

fn predictions_only(out: &Path) -> String {
    tree_hash(&out.join("preds"))
}

#[test]
fn repeated_inference_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    ok(&["infer", "--checkpoint", "m.safetensors", "--input", "data/clip_0000", "--out", "a"], d);
    ok(&["infer", "--checkpoint", "m.safetensors", "--input", "data/clip_0000", "--out", "b"], d);
    assert_eq!(predictions_only(&d.join("a")), predictions_only(&d.join("b")));
    assert_eq!(std::fs::read_dir(d.join("a/preds")).unwrap().count(), 7);

    // the audit differs only in measured latency
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("latency_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(&d.join("a/audit.jsonl")), strip(&d.join("b/audit.jsonl")));
}

#[test]
fn training_is_reproducible_and_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let mut again = vec!["train", "--out", "m2.safetensors", "--log", "t2.jsonl", "--max-steps", "2", "--train-clips", "2"];
    again.extend(TINY);
    ok(&again, d);
    let same = std::fs::read(d.join("m.safetensors")).unwrap() == std::fs::read(d.join("m2.safetensors")).unwrap();
    assert!(same, "checkpoints differ");
    let log = std::fs::read_to_string(d.join("train.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["event"], "config");
    assert_eq!(lines[0]["config"]["learning_rate"], 1e-4);
    assert_eq!(lines.iter().filter(|l| l.get("step").is_some() && l.get("event").is_none()).count(), 2);
    assert_eq!(lines.last().unwrap()["event"], "done");
}

#[test]
fn zero_epochs_and_directory_training() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let mut zero = vec!["train", "--out", "z.safetensors", "--log", "z.jsonl", "--epochs", "0"];
    zero.extend(TINY);
    ok(&zero, d);
    let mut from_dir = vec!["train", "--out", "dir.safetensors", "--log", "d.jsonl", "--data", "data", "--max-steps", "1"];
    from_dir.extend(TINY);
    ok(&from_dir, d);
    assert!(d.join("dir.safetensors").is_file());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut gen = vec!["gen-data", "--out", "data", "--clips", "2", "--frames", "4"];
    gen.extend(TINY);
    ok(&gen, d);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred", "data/clip_0000/masks", "--gt", "data/clip_0000", "--json"], d)).unwrap();
    let m = &report["metrics"];
    for k in ["dice", "iou", "s_measure", "e_measure_mean", "weighted_f"] {
        assert!((m[k].as_f64().unwrap() - 1.0).abs() < 1e-6, "{k} = {}", m[k]);
    }
    assert_eq!(m["mae"].as_f64().unwrap(), 0.0);
    assert_eq!(report["num_frames"], 4);

    let table = ok(&["eval", "--pred", "data", "--gt", "data", "--name", "gt"], d);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["name", "S_alpha", "E_phi_mn", "F_beta_w", "Dice", "IoU", "MAE"]);
}

#[test]
fn overlay_writes_one_image_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    ok(&["infer", "--checkpoint", "m.safetensors", "--input", "data", "--out", "out"], d);
    ok(&["overlay", "--pred", "out/clip_0001", "--frames", "data/clip_0001", "--out", "ov"], d);
    assert_eq!(std::fs::read_dir(d.join("ov")).unwrap().count(), 7);
}

#[test]
fn check_passes_on_a_fresh_build() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["check"], tmp.path());
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["passed"], true);
}

#[test]
fn bad_inputs_fail_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("junk.safetensors"), b"not a checkpoint").unwrap();
    std::fs::create_dir(d.join("empty")).unwrap();
    let out = vpseg(&["infer", "--checkpoint", "junk.safetensors", "--input", "empty", "--out", "o"], d);
    assert!(!out.status.success());
    let out = vpseg(&["train", "--out", "x", "--clip-len", "3", "--references", "2"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip length"));
}
