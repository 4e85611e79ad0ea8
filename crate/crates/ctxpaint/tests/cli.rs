use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ctxpaint");

fn ctxpaint(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CTXPAINT_CHECKPOINT_ROOT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ctxpaint(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(task: &str, run: &str, masks: &str) -> String {
    serde_json::json!({
        "task": task,
        "backbone": {"kind": "toy", "config": {"channels": [8, 8, 8], "context_dim": 16, "time_dim": 16, "groups": 2}},
        "hyper": {"steps": 4, "checkpoint_every": 2, "log_every": 1, "batch_size": 2},
        "data": {"manifest": "data/manifest.jsonl", "frozen_masks": masks},
        "run_dir": run,
    })
    .to_string()
}

/// Shared workspace with a toy dataset and one small trained run per task used below.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(
            &dir,
            &[
                "prep-data",
                "--toy",
                "--n",
                "12",
                "--seed",
                "3",
                "--out",
                "data",
            ],
        );
        for (task, run) in [("ref_inpaint", "run_ref"), ("nvs", "run_nvs")] {
            let masks = format!("masks_{task}");
            ok(
                &dir,
                &[
                    "make-masks",
                    "--manifest",
                    "data/manifest.jsonl",
                    "--task",
                    task,
                    "--out",
                    &masks,
                ],
            );
            let cfg = dir.join(format!("{task}.json"));
            fs::write(&cfg, tiny_config(task, run, &masks)).unwrap();
            ok(&dir, &["train", "--config", cfg.to_str().unwrap()]);
        }
        dir
    })
}

fn first_val_record(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("masks_ref_inpaint/index.jsonl")).unwrap();
    let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["id"].as_str().unwrap().to_string()
}

#[test]
fn malformed_manifest_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("m.jsonl"),
        "\n{\"id\": \"x\", \"split\": \"train\"}\n",
    )
    .unwrap();
    let out = ctxpaint(
        dir.path(),
        &[
            "make-masks",
            "--manifest",
            "m.jsonl",
            "--task",
            "inpaint",
            "--out",
            "masks",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("m.jsonl:2"), "{err}");
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        ctxpaint(dir.path(), &["train", "--steps", "many"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(ctxpaint(dir.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn prep_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            dir.path(),
            &[
                "prep-data",
                "--toy",
                "--n",
                "3",
                "--seed",
                "9",
                "--views",
                "2",
                "--out",
                out,
            ],
        );
    }
    let a = fs::read(dir.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/manifest.jsonl")).unwrap());
    for f in [
        "pair-00002/tar.png",
        "pair-00001/matches.json",
        "pair-00000/view-01.png",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn prep_data_filters_external_manifests() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "prep-data",
            "--toy",
            "--n",
            "8",
            "--seed",
            "2",
            "--views",
            "2",
            "--out",
            "src",
        ],
    );
    let out = ok(
        dir.path(),
        &[
            "prep-data",
            "--manifest",
            "src/manifest.jsonl",
            "--filter",
            "0.4",
            "0.7",
            "--out",
            "kept",
        ],
    );
    assert!(out.contains("of 8 records"), "{out}");
    let kept = fs::read_to_string(dir.path().join("kept/manifest.jsonl")).unwrap();
    for line in kept.lines() {
        let c = serde_json::from_str::<Value>(line).unwrap()["cooccurrence"]
            .as_f64()
            .unwrap();
        assert!((0.4..=0.7).contains(&c));
    }
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = workspace();
    ok(
        dir,
        &[
            "eval",
            "--run",
            "run_ref",
            "--oracle",
            "--out",
            "oracle.json",
        ],
    );
    let report: Value =
        serde_json::from_slice(&fs::read(dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["psnr"], "inf");
    assert_eq!(report["ssim"].as_f64(), Some(1.0));
}

#[test]
fn eval_is_deterministic() {
    let dir = workspace();
    for out in ["e1.json", "e2.json"] {
        ok(
            dir,
            &[
                "eval", "--run", "run_ref", "--steps", "4", "--limit", "2", "--out", out, "--grid",
            ],
        );
    }
    assert_eq!(
        fs::read(dir.join("e1.json")).unwrap(),
        fs::read(dir.join("e2.json")).unwrap()
    );
    assert!(dir.join("e1.png").is_file());
}

#[test]
fn eval_without_masks_points_at_make_masks() {
    let dir = workspace();
    let out = ctxpaint(
        dir,
        &[
            "eval", "--run", "run_ref", "--masks", "nowhere", "--out", "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("make-masks"));
}

#[test]
fn view_synthesis_guidance_changes_the_output() {
    let dir = workspace();
    let id = first_val_record(dir);
    for (cfg, out) in [("1.0", "g1"), ("2.5", "g25")] {
        ok(
            dir,
            &[
                "sample", "--run", "run_nvs", "--record", &id, "--steps", "4", "--cfg", cfg,
                "--out", out,
            ],
        );
    }
    let default = "g_default";
    ok(
        dir,
        &[
            "sample", "--run", "run_nvs", "--record", &id, "--steps", "4", "--out", default,
        ],
    );
    let read = |d: &str| fs::read(dir.join(d).join(format!("{id}.png"))).unwrap();
    assert_ne!(read("g1"), read("g25"));
    assert_eq!(read("g25"), read(default));
}

#[test]
fn sample_dumps_the_composed_canvas() {
    let dir = workspace();
    let id = first_val_record(dir);
    ok(
        dir,
        &[
            "sample",
            "--run",
            "run_ref",
            "--record",
            &id,
            "--masks",
            "masks_ref_inpaint",
            "--steps",
            "3",
            "--out",
            "dump",
            "--dump-stitched",
            "--grid",
        ],
    );
    let stitched = image::open(dir.join("dump").join(format!("{id}-stitched.png"))).unwrap();
    let out = image::open(dir.join("dump").join(format!("{id}.png"))).unwrap();
    assert_eq!(stitched.width(), 2 * out.width());
    assert!(dir.join("dump").join(format!("{id}-grid.png")).is_file());
}

#[test]
fn sample_refuses_a_different_backbone() {
    let dir = workspace();
    let copy = dir.join("run_mismatch");
    fs::create_dir_all(copy.join("prompts")).unwrap();
    for f in ["prompts/ref_inpaint.prompt", "state.json"] {
        fs::copy(dir.join("run_ref").join(f), copy.join(f)).unwrap();
    }
    let mut cfg: Value =
        serde_json::from_slice(&fs::read(dir.join("run_ref/config.json")).unwrap()).unwrap();
    cfg["backbone"]["config"]["seed"] = 77.into();
    fs::write(copy.join("config.json"), cfg.to_string()).unwrap();
    let id = first_val_record(dir);
    let out = ctxpaint(
        dir,
        &[
            "sample",
            "--run",
            "run_mismatch",
            "--record",
            &id,
            "--steps",
            "2",
            "--out",
            "mm",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn checkpoint_root_resolves_relative_runs() {
    let dir = workspace();
    let id = first_val_record(dir);
    let out = Command::new(BIN)
        .args([
            "sample", "--run", "run_ref", "--record", &id, "--steps", "2", "--out",
        ])
        .arg(dir.join("rooted"))
        .arg("--manifest")
        .arg(dir.join("data/manifest.jsonl"))
        .env("CTXPAINT_CHECKPOINT_ROOT", dir)
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn attention_maps_cover_layers_and_steps() {
    let dir = workspace();
    let id = first_val_record(dir);
    ok(
        dir,
        &[
            "viz-attn", "--run", "run_ref", "--record", &id, "--steps", "50", "--at", "1,25,50",
            "--out", "attn",
        ],
    );
    let pngs: Vec<_> = fs::read_dir(dir.join("attn"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(pngs.len(), 6);
    for p in &pngs {
        let img = image::open(p).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let out = ctxpaint(
        dir,
        &[
            "viz-attn", "--run", "run_ref", "--record", &id, "--probe", "nope", "--out", "attn2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = workspace();
    let cfg = dir.join("resume.json");
    fs::write(&cfg, tiny_config("inpaint", "whole", "unused")).unwrap();
    ok(dir, &["train", "--config", cfg.to_str().unwrap()]);
    ok(
        dir,
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--run-dir",
            "split",
            "--steps",
            "2",
        ],
    );
    let mut snapshot: Value =
        serde_json::from_slice(&fs::read(dir.join("split/config.json")).unwrap()).unwrap();
    snapshot["hyper"]["steps"] = 4.into();
    fs::write(dir.join("split/config.json"), snapshot.to_string()).unwrap();
    ok(dir, &["train", "--resume", "--run-dir", "split"]);
    let read = |r: &str, f: &str| fs::read(dir.join(r).join(f)).unwrap();
    assert_eq!(
        read("whole", "prompts/inpaint.prompt"),
        read("split", "prompts/inpaint.prompt")
    );
    assert_eq!(
        read("whole", "metrics.jsonl"),
        read("split", "metrics.jsonl")
    );
}
