//! Exercises the installed binary end to end on a tiny fluid config:
//! subcommands, exit codes, and the on-disk artifacts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpdiff"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let cfg = serde_json::json!({
        "schema_version": 1,
        "kind": "fluid",
        "schedule": {"steps": 30, "beta_start": 1e-3, "beta_end": 0.2},
        "denoiser": {"time_embed_dim": 8},
        "fluid": {
            "n_trajectories": 5, "seed": 3, "fine": 16, "mid": 8, "coarse": 8,
            "horizon_steps": 5, "dt": 0.05
        },
        "training": {"epochs": 1, "steps_per_epoch": 10, "lr": 1e-3, "seed": 5},
        "sampling": {"seed": 17},
        "ensemble": {"size": 2, "base_seed": 23},
        "out_dir": out
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_command_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("out");

    let gen = bin().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(out_dir.join("dataset/index.json").exists());

    let train = bin().args(["train", "--config"]).arg(&cfg).args(["--method", "c1"]).output().unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ck = out_dir.join("train/checkpoint_c1.mpd1");
    assert!(ck.exists());
    assert!(out_dir.join("train/loss_c1.csv").exists());

    // the test split exists and samples deterministically
    let sample = bin()
        .args(["sample", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ck)
        .args(["--choice", "1"])
        .output()
        .unwrap();
    assert!(sample.status.success(), "{}", String::from_utf8_lossy(&sample.stderr));

    let eval = bin().args(["evaluate", "--config"]).arg(&cfg).output().unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(out_dir.join("eval/report.csv").exists());
    assert!(out_dir.join("eval/summary.json").exists());

    // uq on the first test record id found in the samples dir
    let sample_name = std::fs::read_dir(out_dir.join("samples"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .find(|n| n.starts_with("sample_") && n.ends_with(".mpf1"))
        .unwrap();
    let id = sample_name.trim_start_matches("sample_").rsplit_once('_').unwrap().0.to_string();
    let uq = bin()
        .args(["uq", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ck)
        .args(["--id", &id])
        .output()
        .unwrap();
    assert!(uq.status.success(), "{}", String::from_utf8_lossy(&uq.stderr));
}

#[test]
fn rejected_input_exits_one_and_missing_dataset_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());

    // invalid choice is a rejected input → exit 1 (no dataset needed)
    let bad_choice = bin()
        .args(["sample", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(tmp.path().join("nope.mpd1"))
        .args(["--choice", "3"])
        .output()
        .unwrap();
    assert_eq!(bad_choice.status.code(), Some(1));

    // training without a dataset is an i/o failure → exit 2
    let train = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(train.status.code(), Some(2), "{}", String::from_utf8_lossy(&train.stderr));

    // malformed config → exit 1
    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, b"{\"schema_version\": 1}").unwrap();
    let gen = bin().args(["gen-data", "--config"]).arg(&bad_cfg).output().unwrap();
    assert_eq!(gen.status.code(), Some(1));
}

#[test]
fn theory_check_runs_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = serde_json::json!({
        "schema_version": 1,
        "kind": "theory",
        "theory": {"chains": 400, "threshold": 0.1, "seed": 1},
        "out_dir": out
    });
    let path = tmp.path().join("theory.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let run = bin().args(["theory-check", "--config"]).arg(&path).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("choice")).count(), 4);
    assert!(out.join("theory/theory_report.json").exists());
}
