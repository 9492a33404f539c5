use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cloak"))
}

fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "dataset": {
            "synthetic": {
                "num_identities": 6,
                "images_per_identity": 4,
                "image_size": 16,
                "channels": 1,
                "nuisance": {},
                "seed": 7
            },
            "fractions": [0.5, 0.25, 0.25],
            "split_mode": "by_identity",
            "split_seed": 3
        },
        "embedder": {
            "spec": {
                "input_size": 16,
                "input_channels": 1,
                "conv_blocks": [
                    { "out_channels": 4, "stride": 1 },
                    { "out_channels": 8, "stride": 2 },
                    { "out_channels": 16, "stride": 2 }
                ],
                "embedding_dim": 8,
                "feature_tap": 3,
                "train": { "epochs": 6, "batch_size": 8, "learning_rate": 1e-3, "seed": 11 }
            }
        },
        "blackbox": { "enabled": false },
        "attack": {
            "config": {
                "adv": { "kind": "cosine", "targeted": false, "target": null },
                "pert": { "kind": "threshold", "threshold": 0.1 },
                "weights": { "alpha": 0.0, "beta": 1.0, "gamma": 10.0 },
                "use_discriminator": false,
                "optimizer": { "lr": 1e-3, "beta1": 0.9, "beta2": 0.999 },
                "epochs": 2,
                "batch_size": 8,
                "seed": 97
            }
        },
        "distill": {
            "optimizer": { "lr": 1e-3, "beta1": 0.9, "beta2": 0.999 },
            "epochs": 2,
            "batch_size": 8,
            "seed": 53
        }
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    for cmd in [
        "synth-data",
        "train-embedder",
        "train-attack",
        "distill",
        "evaluate",
        "visualize",
        "cloak",
        "pipeline",
    ] {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd} --help failed");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("Usage"), "{cmd} --help printed no usage");
    }
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = bin()
        .args(["synth-data", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = tiny_config();
    value["no_such_section"] = serde_json::json!(1);
    let path = write_config(dir.path(), &value);
    let out = bin()
        .args(["synth-data", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_without_artifacts_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config());
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_data_is_deterministic_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config());
    for sub in ["a", "b"] {
        let out = bin()
            .args(["synth-data", "--config"])
            .arg(&path)
            .arg("--out-dir")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |sub: &str| {
        std::fs::read(dir.path().join(sub).join("dataset").join("manifest.json")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
    assert!(dir.path().join("a").join("resolved_config.synth-data.json").exists());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config());
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["pipeline", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in [
        "dataset/manifest.json",
        "embedder.whitebox.manifest.json",
        "attack.manifest.json",
        "attack_loss.csv",
        "student.manifest.json",
        "eval_report.json",
        "tsne.csv",
        "tsne.png",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_report.json")).unwrap())
            .unwrap();
    let wb = report["success_rate_whitebox"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&wb));

    // single-image cloak on a dataset PNG prints elapsed seconds
    let src = out_dir.join("dataset").join("0_0.png");
    let dst = dir.path().join("cloaked.png");
    let out = bin()
        .args(["cloak", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("--in")
        .arg(&src)
        .arg("--out")
        .arg(&dst)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let secs: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(secs >= 0.0 && secs < 60.0);
    assert!(dst.exists());

    // the student path works too
    let out = bin()
        .args(["cloak", "--student", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("--in")
        .arg(&src)
        .arg("--out")
        .arg(dir.path().join("cloaked_student.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_flag_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config());
    for (sub, seed) in [("s1", "100"), ("s2", "200")] {
        let out = bin()
            .args(["synth-data", "--config"])
            .arg(&path)
            .args(["--seed", seed, "--out-dir"])
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |sub: &str| {
        std::fs::read(dir.path().join(sub).join("dataset").join("manifest.json")).unwrap()
    };
    assert_ne!(read("s1"), read("s2"));
}
