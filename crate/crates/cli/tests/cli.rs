use std::path::Path;
use std::process::{Command, Output};

use dmdp_cli::ExperimentConfig;

fn dmdp(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dmdp"));
    cmd.args(args)
        .arg("--set")
        .arg(format!("output_dir={}", dir.display()))
        .env_remove("DMDP_SEED");
    if let Some(s) = seed {
        cmd.env("DMDP_SEED", s);
    }
    cmd.output().expect("binary runs")
}

/// Small and fast: random backbone, tiny pool, a few epochs.
const QUICK: &[&str] = &[
    "--set",
    "pretrain.random_backbone=true",
    "--set",
    "data.n=64",
    "--set",
    r#"data.split={"kind":"k_shot","k":4}"#,
    "--set",
    "train.epochs=4",
];

fn with(cmd: &str, extra: &[&str]) -> Vec<String> {
    let mut v = vec![cmd.to_string()];
    v.extend(QUICK.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn gen_writes_requested_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdp(
        dir.path(),
        &["gen", "--set", "data.case=1", "--set", "data.n=512"],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = dmdp::data::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.len(), 512);
    assert!(m.samples[0].id.starts_with("case1"));
    assert!(dir.path().join("run_meta.json").exists());
    assert!(dir.path().join("vocab.txt").exists());
}

#[test]
fn defaults_use_the_reference_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdp(dir.path(), &["train", "--dry-run"], None);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.prompt.length, 2);
    assert_eq!(cfg.prompt.depth, cfg.encoder.layers);
    assert_eq!(cfg.train.batch_size, 4);
    assert_eq!(cfg.train.lr, 0.0035);
    assert_eq!(cfg.train.warmup_lr, 1e-5);
    assert_eq!(cfg.train.epochs, 100);
}

#[test]
fn dry_run_output_reparses_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dmdp(
        dir.path(),
        &[
            "sweep",
            "--dry-run",
            "--set",
            "prompt.variant=V_TO_T",
            "--set",
            "train.lr=0.01",
        ],
        None,
    );
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(cfg.train.lr, 0.01);
    let path = dir.path().join("resolved.json");
    std::fs::write(&path, &text).unwrap();
    let second = dmdp(
        dir.path(),
        &["sweep", "--dry-run", "--config", path.to_str().unwrap()],
        None,
    );
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdp(dir.path(), &["train", "--set", "train.lrr=1"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("train.lrr") && err.contains("train.lr\n"), "{err}");

    assert_eq!(
        dmdp(dir.path(), &["train", "--set", "train.lr"], None).status.code(),
        Some(2)
    );
    assert_eq!(dmdp(dir.path(), &["frobnicate"], None).status.code(), Some(2));

    let out = dmdp(dir.path(), &["train", "--set", "prompt.length=0"], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("prompt.length"));
    assert_eq!(
        dmdp(dir.path(), &["train", "--set", "data.manifest=/no/such/file"], None)
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        dmdp(dir.path(), &["train", "--dry-run"], Some("abc")).status.code(),
        Some(3)
    );

    // no bank has been trained here
    assert_eq!(dmdp(dir.path(), &["eval"], None).status.code(), Some(4));
}

#[test]
fn seed_variable_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdp(dir.path(), &["train", "--dry-run", "--set", "train.seed=3"], Some("17"));
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.seed, 17);
}

#[test]
fn train_eval_attn_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let train = with("train", &[]);
    assert!(dmdp(p, &args(&train), Some("5")).status.success());
    let history = std::fs::read(p.join("history.json")).unwrap();
    let bank = std::fs::read(p.join("bank.ckpt")).unwrap();
    let meta = std::fs::read(p.join("run_meta.json")).unwrap();
    assert!(dmdp(p, &args(&train), Some("5")).status.success());
    assert_eq!(std::fs::read(p.join("history.json")).unwrap(), history);
    assert_eq!(std::fs::read(p.join("bank.ckpt")).unwrap(), bank);
    assert_eq!(std::fs::read(p.join("run_meta.json")).unwrap(), meta);

    let eval = with("eval", &[]);
    assert!(dmdp(p, &args(&eval), Some("5")).status.success());
    let metrics = std::fs::read(p.join("metrics.json")).unwrap();
    assert!(dmdp(p, &args(&eval), Some("5")).status.success());
    assert_eq!(std::fs::read(p.join("metrics.json")).unwrap(), metrics);

    let attn = with("attn", &["--set", "experiment.attn_samples=2"]);
    assert!(dmdp(p, &args(&attn), Some("5")).status.success());
    let pgms = std::fs::read_dir(p.join("attn"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 2 * 2 * 2);

    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "attn");
    assert_eq!(meta["seed"], 5);
    assert!(meta["checkpoints"]["bank.ckpt"].is_string());
}

#[test]
fn split_pretrain_ablate_and_sweep_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let pre = ["pretrain", "--set", "pretrain.epochs=1", "--set", "pretrain.pairs=16"];
    assert!(dmdp(p, &pre, None).status.success());
    assert!(p.join("backbone.ckpt").exists() && p.join("pretrain.json").exists());

    assert!(dmdp(p, &args(&with("split", &[])), None).status.success());
    assert!(p.join("split/split.json").exists());

    let quick = [
        "--set",
        "experiment.seeds=[0,1]",
        "--set",
        "train.epochs=2",
        "--set",
        "data.n=48",
    ];
    let ablate = [
        &["ablate", "--set", r#"data.split={"kind":"k_shot","k":3}"#][..],
        &quick[..],
    ]
    .concat();
    let out = dmdp(p, &ablate, None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);

    let sweep = [
        &[
            "sweep",
            "--set",
            r#"data.split={"kind":"k_shot","k":3}"#,
            "--set",
            "experiment.lengths=[1,2]",
        ][..],
        &quick[..],
    ]
    .concat();
    assert!(dmdp(p, &sweep, None).status.success());
    let depth = std::fs::read_to_string(p.join("sweep_depth.csv")).unwrap();
    assert!(depth.starts_with("setting,acc_mean,acc_std,f1_mean,f1_std\n1,"));
    assert_eq!(depth.lines().count(), 3);
    assert_eq!(
        std::fs::read_to_string(p.join("sweep_length.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn protocol_config_parses_with_defaults_filled_in() {
    let dir = tempfile::tempdir().unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/protocol.json");
    let out = dmdp(dir.path(), &["train", "--dry-run", "--config", path], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.encoder.layers, cfg.encoder.text_width), (4, 32));
    assert_eq!(cfg.encoder.image_size, 8);
    assert_eq!((cfg.prompt.length, cfg.prompt.depth), (4, 4));
    assert_eq!(cfg.train.lr, 0.1);
}
