use stlink_core::data::SplitRatio;
use stlink_core::model::{Ablation, Model};
use stlink_core::runner::*;
use stlink_core::StlinkError;

fn small(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_kv_text(
        "synth_nodes = 3\nsynth_steps = 400\nd_model = 8\nheads = 1\nn_layers = 2\ntrainable_upper = 2\nt_in = 4\nt_out = 12\n\
         slots = 4\ntop_k_mem = 2\nexperts = 2\ntop_k_exp = 1\nd_ff = 16\nbatch_size = 16\nlr = 1e-3\nlog_wall_time = false",
    )
    .unwrap();
    cfg.epochs = epochs;
    cfg
}

fn prepared(cfg: &RunConfig) -> Prepared {
    prepare(load_source(cfg).unwrap(), cfg).unwrap()
}

#[test]
fn config_file_then_overrides() {
    let mut cfg = RunConfig::default();
    cfg.apply_kv_text("# desk run\nd_model = 32\nlr=0.001 # faster\nno_memory = true\ndata = x.ds\n").unwrap();
    assert_eq!((cfg.model.d_model, cfg.lr, cfg.model.ablation.no_memory), (32, 1e-3, true));
    cfg.set("d-model", "16").unwrap();
    assert_eq!(cfg.model.d_model, 16);
    assert!(cfg.set("d_modle", "16").is_err());
    assert!(cfg.set("heads", "two").is_err());
    assert!(cfg.apply_kv_text("lr 0.1").is_err());

    let mut back = RunConfig::default();
    back.apply_kv_text(&cfg.to_kv_text()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn exactly_one_data_source() {
    let mut cfg = RunConfig::default();
    assert!(cfg.validate().is_err());
    cfg.set("synth_nodes", "4").unwrap();
    assert!(cfg.validate().is_ok());
    cfg.set("data", "some.ds").unwrap();
    assert!(cfg.validate().is_err());
}

#[test]
fn seed_env_overrides_config() {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "3").unwrap();
    std::env::set_var(SEED_ENV, "41");
    cfg.apply_seed_env().unwrap();
    std::env::remove_var(SEED_ENV);
    assert_eq!(cfg.model.seed, 41);
}

#[test]
fn zero_epochs_returns_initialization() {
    let cfg = small(0);
    let data = prepared(&cfg);
    let out = train_prepared(&cfg, &data, RunLog::default()).unwrap();
    let mut init = Model::new(model_config_for(&cfg, &data.bundle)).unwrap();
    init.scaler = data.scaler.clone();
    assert_eq!(out.best.to_checkpoint_bytes().unwrap(), init.to_checkpoint_bytes().unwrap());
    assert_eq!(out.log.epochs().count(), 0);
    assert!(out.log.final_record().is_some());
}

#[test]
fn five_node_training_lowers_the_loss() {
    let mut cfg = small(30);
    cfg.set("synth_nodes", "5").unwrap();
    cfg.lr = 1e-4;
    cfg.patience = 30;
    let out = train(&cfg).unwrap();
    let losses = out.log.train_losses();
    assert_eq!(losses.len(), 30);
    assert!(losses[29] < losses[0], "{losses:?}");
}

#[test]
fn same_seed_same_log_and_checkpoint() {
    let mut cfg = small(3);
    cfg.model.dropout = 0.1;
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.best.to_checkpoint_bytes().unwrap(), b.best.to_checkpoint_bytes().unwrap());
    cfg.model.seed = 1;
    let c = train(&cfg).unwrap();
    assert_ne!(a.log.to_jsonl(), c.log.to_jsonl());
}

#[test]
fn seed_changes_initialization_not_splits() {
    let cfg = small(0);
    let mut other = cfg.clone();
    other.model.seed = 99;
    let (a, b) = (prepared(&cfg), prepared(&other));
    assert_eq!(a.splits, b.splits);
    assert_eq!(a.train, b.train);
    assert_eq!(a.scaler, b.scaler);
    let ma = Model::new(model_config_for(&cfg, &a.bundle)).unwrap();
    let mb = Model::new(model_config_for(&other, &b.bundle)).unwrap();
    assert_ne!(ma.to_checkpoint_bytes().unwrap(), mb.to_checkpoint_bytes().unwrap());
}

#[test]
fn best_checkpoint_has_the_lowest_val_mae() {
    let mut cfg = small(6);
    cfg.lr = 3e-3;
    let out = train(&cfg).unwrap();
    let mut best = None;
    let mut vals = Vec::new();
    for r in &out.log.records {
        match r {
            LogRecord::Epoch { val, .. } => vals.push(val.unwrap().mae),
            LogRecord::Final { best_val_mae, .. } => best = *best_val_mae,
        }
    }
    let best = best.unwrap();
    assert!(vals.iter().all(|&v| best <= v));
    let data = prepared(&cfg);
    let again = evaluate_windows(&out.best, &data.val, None).unwrap();
    assert_eq!(again.aggregate.unwrap().mae, best);
}

#[test]
fn evaluation_is_pure_and_has_three_horizons() {
    let cfg = small(2);
    let out = train(&cfg).unwrap();
    let bundle = load_source(&cfg).unwrap();
    let a = evaluate(&out.best, &bundle, cfg.split, SplitName::Test).unwrap();
    let b = evaluate(&out.best, &bundle, cfg.split, SplitName::Test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), vec![3, 6, 12]);
    assert!(a.aggregate.is_some());
    assert_eq!(Some(&a), out.log.final_record().map(|(_, t)| t));
    assert_eq!(format_csv(&a).lines().count(), 5);
    assert_eq!(format_table(&a).lines().count(), 5);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let cfg = small(2);
    let out = train(&cfg).unwrap();
    let bundle = load_source(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.best.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(evaluate(&back, &bundle, cfg.split, SplitName::Test).unwrap(), evaluate(&out.best, &bundle, cfg.split, SplitName::Test).unwrap());
}

#[test]
fn frozen_parameters_survive_training_on_disk() {
    let mut cfg = small(3);
    cfg.model.n_trainable_upper = 1;
    cfg.lr = 1e-2;
    let data = prepared(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let init_path = dir.path().join("init.ckpt");
    let best_path = dir.path().join("best.ckpt");
    let mut init = Model::new(model_config_for(&cfg, &data.bundle)).unwrap();
    init.scaler = data.scaler.clone();
    init.save(&init_path).unwrap();
    train_prepared(&cfg, &data, RunLog::default()).unwrap().best.save(&best_path).unwrap();
    let (a, b) = (Model::load(&init_path).unwrap(), Model::load(&best_path).unwrap());
    let mut frozen = 0;
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        if !p.trainable() {
            frozen += 1;
            assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
        }
    }
    assert!(frozen > 0);
    assert_eq!(a.memory[0], b.memory[0]);
}

#[test]
fn mismatched_checkpoint_is_rejected_with_dimensions() {
    let cfg = small(0);
    let out = train(&cfg).unwrap();
    let mut wider = cfg.clone();
    wider.set("synth_nodes", "4").unwrap();
    let bundle = load_source(&wider).unwrap();
    let err = evaluate(&out.best, &bundle, SplitRatio::default(), SplitName::Test).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("nodes=3") && msg.contains("nodes=4"), "{msg}");
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let mut cfg = small(2);
    cfg.lr = 1e300;
    match train(&cfg) {
        Err(StlinkError::Diverged { epoch, batch, .. }) => assert!(epoch >= 1 && batch < 100),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn no_memory_keys_stay_put_and_contradictions_fail() {
    let mut cfg = small(2);
    cfg.model.ablation = Ablation { no_memory: true, ..Ablation::default() };
    let data = prepared(&cfg);
    let init = Model::new(model_config_for(&cfg, &data.bundle)).unwrap();
    let out = train_prepared(&cfg, &data, RunLog::default()).unwrap();
    assert_eq!(out.best.memory, init.memory);
    cfg.model.ablation.standard_ffn = true;
    assert!(matches!(train(&cfg), Err(StlinkError::ContradictoryAblation(_))));
}

#[test]
fn run_log_round_trips_and_streams() {
    let cfg = small(2);
    let data = prepared(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let out = train_prepared(&cfg, &data, RunLog::with_sink(&path).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, out.log.to_jsonl());
    assert_eq!(text.lines().count(), 3);
    assert_eq!(RunLog::parse_jsonl(&text).unwrap().records, out.log.records);
    assert!(text.lines().next().unwrap().starts_with(r#"{"record":"epoch","epoch":1"#));
}

#[test]
fn seeds_helper_offsets_the_seed() {
    let cfg = small(1);
    let data = prepared(&cfg);
    let runs = run_seeds(&cfg, &data, 2).unwrap();
    assert_eq!(runs.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![0, 1]);
    assert!(runs.iter().all(|(_, o)| test_mae(o).is_some()));
}
