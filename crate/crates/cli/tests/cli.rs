use std::path::Path;
use std::process::{Command, Output};

use stlink_core::data::load_dataset;
use stlink_core::Model;

fn stlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlink")).args(args).env_remove("STLINK_SEED").output().expect("run stlink")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--d-model", "8", "--heads", "1", "--n-layers", "2", "--trainable-upper", "2", "--slots", "4", "--top-k-mem", "2", "--experts", "2", "--top-k-exp", "1", "--d-ff",
    "16", "--t-in", "4", "--batch-size", "16", "--lr", "1e-3",
];

#[test]
fn gradcheck_small_model_passes() {
    let out = stlink(&["gradcheck", "--d-model", "8"]);
    assert!(out.status.success(), "{}{}", text(&out.stdout), text(&out.stderr));
    assert!(text(&out.stdout).contains("PASS"));
}

#[test]
fn synth_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ds");
    let out = stlink(&["synth", "--nodes", "5", "--steps", "2016", "--seed", "7", "--out", p(&path)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let b = load_dataset(&path).unwrap();
    assert_eq!((b.n_nodes, b.n_steps(), b.n_features), (5, 2016, 1));
}

#[test]
fn unknown_command_and_flag_print_usage() {
    for args in [&["fly"][..], &["train", "--d-modle", "8"][..]] {
        let out = stlink(args);
        assert!(!out.status.success());
        assert!(text(&out.stderr).contains("Usage"), "{}", text(&out.stderr));
    }
}

#[test]
fn train_eval_forecast_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.ds");
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("run.jsonl");
    let cfg = dir.path().join("run.cfg");
    assert!(stlink(&["synth", "--nodes", "3", "--steps", "400", "--out", p(&data)]).status.success());
    std::fs::write(&cfg, format!("data = {}\nepochs = 2\nd_model = 64\n", data.display())).unwrap();

    let mut args = vec!["train", "--config", p(&cfg), "--out", p(&ckpt), "--log", p(&log), "--csv", "--log-wall-time", "false"];
    args.extend_from_slice(SMALL);
    let out = stlink(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert_eq!(table.lines().next(), Some("horizon,mae,rmse,mape"));
    assert_eq!(table.lines().count(), 5);
    assert_eq!(text(&std::fs::read(&log).unwrap()).lines().count(), 3);
    let model = Model::load(&ckpt).unwrap();
    assert_eq!(model.config.d_model, 8, "flags win over the config file");

    let out = stlink(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--csv"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), table);

    let out = stlink(&["forecast", "--checkpoint", p(&ckpt), "--window", p(&data)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    assert_eq!(csv.lines().next(), Some("step,timestamp,n0,n1,n2"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn eval_with_mismatched_checkpoint_names_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let other = dir.path().join("other.ds");
    let mut args = vec!["train", "--synth-nodes", "3", "--synth-steps", "400", "--epochs", "0", "--out", p(&ckpt)];
    args.extend_from_slice(SMALL);
    assert!(stlink(&args).status.success());
    assert!(stlink(&["synth", "--nodes", "4", "--steps", "400", "--out", p(&other)]).status.success());
    let out = stlink(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other)]);
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("nodes=3") && err.contains("nodes=4"), "{err}");
}

#[test]
fn seeds_flag_writes_one_checkpoint_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut args = vec!["train", "--synth-nodes", "3", "--synth-steps", "400", "--epochs", "1", "--seeds", "2", "--seed", "4", "--out", p(&ckpt)];
    args.extend_from_slice(SMALL);
    let out = stlink(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("mean over 2 seeds"));
    assert_eq!(Model::load(dir.path().join("m.ckpt.seed4")).unwrap().config.seed, 4);
    assert_eq!(Model::load(dir.path().join("m.ckpt.seed5")).unwrap().config.seed, 5);
}

#[test]
fn seed_env_applies_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut args = vec!["train", "--synth-nodes", "3", "--synth-steps", "400", "--epochs", "0", "--out", p(&ckpt)];
    args.extend_from_slice(SMALL);
    let run = |extra: &[&str]| {
        let mut a = args.clone();
        a.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_stlink")).args(&a).env("STLINK_SEED", "11").output().unwrap();
        assert!(out.status.success(), "{}", text(&out.stderr));
        Model::load(&ckpt).unwrap().config.seed
    };
    assert_eq!(run(&[]), 11);
    assert_eq!(run(&["--seed", "3"]), 3);
}
