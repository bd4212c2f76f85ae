use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fsar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsar")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_train_evaluate_on_a_file_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.emb");
    let data_s = data.to_str().unwrap();
    ok(&fsar(&["gen-data", "--classes", "30", "--videos", "4", "--frames", "8", "--seed", "3", "--out", data_s]));
    assert!(data.exists());
    assert!(dir.path().join("synth.tsv").exists());

    let cfg = write_config(dir.path(), &format!("data = {data_s}\nepisodes_train = 15\nepisodes_eval = 12\n"));
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&fsar(&["train", "--config", &cfg, "--out", run_s, "--every", "5"]));
    for f in ["checkpoint.fsck", "train_log.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 16);

    let ckpt = run.join("checkpoint.fsck");
    let report = dir.path().join("report");
    let stdout = ok(&fsar(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--json",
        "--report",
        report.to_str().unwrap(),
    ]));
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(json["episodes"], 12);
    let acc = json["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report.join("eval_report.json").exists());
    assert_eq!(fs::read_to_string(report.join("eval_episodes.csv")).unwrap().lines().count(), 13);

    let text = ok(&fsar(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "4"]));
    assert!(text.starts_with("4 episodes on test: accuracy"), "{text}");
}

#[test]
fn census_reports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "synth_classes = 10\n");
    let json: serde_json::Value = serde_json::from_str(&ok(&fsar(&["census", "--config", &cfg, "--json"]))).unwrap();
    let groups: Vec<&str> = json["groups"].as_array().unwrap().iter().map(|g| g["group"].as_str().unwrap()).collect();
    for g in ["backbone", "adapters", "fc_text", "tpcm"] {
        assert!(groups.contains(&g), "{g} missing from {groups:?}");
    }
    let tunable: u64 = json["groups"].as_array().unwrap().iter().map(|g| g["tunable"].as_u64().unwrap()).sum();
    assert_eq!(tunable, json["tunable"].as_u64().unwrap());
    let table = ok(&fsar(&["census", "--config", &cfg]));
    assert!(table.contains("tunable ratio"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "way = 5\nbogus_key = 1\n");
    let out = fsar(&["census", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");

    let good = write_config(dir.path(), "synth_classes = 10\n");
    let junk = dir.path().join("junk.fsck");
    fs::write(&junk, b"nope").unwrap();
    let out = fsar(&["eval", "--config", &good, "--checkpoint", junk.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.fsck"));

    assert!(!fsar(&["train", "--config", "/nonexistent/run.cfg", "--out", "x"]).status.success());
}
