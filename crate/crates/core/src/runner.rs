//! Run configuration, training loop with early stopping, evaluation by horizon,
//! multi-seed runs and the line-delimited run log.
//!
//! Scheduling (epoch budget, early stopping with patience on validation MAE)
//! is this crate's own choice.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use chrono::NaiveDateTime;

use crate::data::{horizon_metrics, HorizonRow, TimeMark, load_dataset, make_windows, split, synth_generate, DatasetBundle, HorizonTable, Metrics, Scaler, SplitRatio, Splits, SynthConfig, WindowSample, WindowSpec};
use crate::error::{shape_err, Result, StlinkError};
use crate::model::{loss_mae_tape, Adam, Batch, Model, ModelConfig, ModelObjective};
use crate::numerics::{grad_check, seeded_rng, GradCheckConfig, GradCheckReport, Precision, Rng, Tape};

pub const SEED_ENV: &str = "STLINK_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub config: SynthConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { nodes: 8, steps: 2016, seed: 0, config: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `n_nodes`, `f_in` and `steps_per_day` are taken from the data at train time.
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub split: SplitRatio,
    pub data: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Record per-epoch wall time in the run log. Off makes logs byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { dropout: 0.1, ..ModelConfig::default() },
            lr: 1e-4,
            batch_size: 64,
            epochs: 30,
            patience: 10,
            split: SplitRatio::default(),
            data: None,
            synth: None,
            log_wall_time: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| StlinkError::InvalidConfig(format!("bad value for '{key}': '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(StlinkError::InvalidConfig(format!("bad boolean for '{key}': '{value}'"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model", "n_layers", "trainable_upper", "heads", "t_in", "t_out", "f_out", "dropout", "slots", "top_k_mem", "experts", "top_k_exp", "d_ff", "alpha",
        "seed", "precision", "lr", "batch_size", "epochs", "patience", "split", "data", "synth_nodes", "synth_steps", "synth_seed", "synth_coupling", "synth_lag",
        "synth_noise", "no_se_attention", "standard_rope", "no_memory", "standard_ffn", "log_wall_time",
    ];

    /// Sets one option by its config-file key. Dashes are accepted in place of underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let m = &mut self.model;
        match k {
            "d_model" => m.d_model = parse(k, value)?,
            "n_layers" => m.n_layers = parse(k, value)?,
            "trainable_upper" => m.n_trainable_upper = parse(k, value)?,
            "heads" => m.heads = parse(k, value)?,
            "t_in" => m.t_in = parse(k, value)?,
            "t_out" => m.t_out = parse(k, value)?,
            "f_out" => m.f_out = parse(k, value)?,
            "dropout" => m.dropout = parse(k, value)?,
            "slots" => m.slots = parse(k, value)?,
            "top_k_mem" => m.top_k_mem = parse(k, value)?,
            "experts" => m.experts = parse(k, value)?,
            "top_k_exp" => m.top_k_exp = parse(k, value)?,
            "d_ff" => m.d_ff = parse(k, value)?,
            "alpha" => m.alpha = parse(k, value)?,
            "seed" => m.seed = parse(k, value)?,
            "precision" => m.precision = Precision::parse(value.trim()).ok_or_else(|| StlinkError::InvalidConfig(format!("precision must be f32 or f64, got '{value}'")))?,
            "no_se_attention" => m.ablation.no_se_attention = parse_bool(k, value)?,
            "standard_rope" => m.ablation.standard_rope = parse_bool(k, value)?,
            "no_memory" => m.ablation.no_memory = parse_bool(k, value)?,
            "standard_ffn" => m.ablation.standard_ffn = parse_bool(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "split" => self.split = value.trim().parse()?,
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "log_wall_time" => self.log_wall_time = parse_bool(k, value)?,
            _ if k.starts_with("synth_") => {
                let s = self.synth.get_or_insert_with(SynthSpec::default);
                match k {
                    "synth_nodes" => s.nodes = parse(k, value)?,
                    "synth_steps" => s.steps = parse(k, value)?,
                    "synth_seed" => s.seed = parse(k, value)?,
                    "synth_coupling" => s.config.coupling = parse(k, value)?,
                    "synth_lag" => s.config.lag = parse(k, value)?,
                    "synth_noise" => s.config.noise_std = parse(k, value)?,
                    _ => return Err(StlinkError::InvalidConfig(format!("unknown option '{key}'"))),
                }
            }
            _ => return Err(StlinkError::InvalidConfig(format!("unknown option '{key}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| StlinkError::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_kv_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.apply_kv_text(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed with `STLINK_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => return Err(StlinkError::InvalidConfig("give either a dataset path or a synthetic spec, not both".into())),
            (None, None) => return Err(StlinkError::InvalidConfig("no data source: set 'data' or the synth_* options".into())),
            _ => {}
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(StlinkError::InvalidConfig("batch_size and lr must be positive".into()));
        }
        self.model.ablation.validate()
    }

    pub fn to_kv_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", m.d_model.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("trainable_upper", m.n_trainable_upper.to_string());
        kv("heads", m.heads.to_string());
        kv("t_in", m.t_in.to_string());
        kv("t_out", m.t_out.to_string());
        kv("f_out", m.f_out.to_string());
        kv("dropout", m.dropout.to_string());
        kv("slots", m.slots.to_string());
        kv("top_k_mem", m.top_k_mem.to_string());
        kv("experts", m.experts.to_string());
        kv("top_k_exp", m.top_k_exp.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("alpha", m.alpha.to_string());
        kv("seed", m.seed.to_string());
        kv("precision", m.precision.as_str().into());
        kv("no_se_attention", m.ablation.no_se_attention.to_string());
        kv("standard_rope", m.ablation.standard_rope.to_string());
        kv("no_memory", m.ablation.no_memory.to_string());
        kv("standard_ffn", m.ablation.standard_ffn.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("split", self.split.to_string());
        kv("log_wall_time", self.log_wall_time.to_string());
        if let Some(p) = &self.data {
            kv("data", p.display().to_string());
        }
        if let Some(sy) = &self.synth {
            kv("synth_nodes", sy.nodes.to_string());
            kv("synth_steps", sy.steps.to_string());
            kv("synth_seed", sy.seed.to_string());
            kv("synth_coupling", sy.config.coupling.to_string());
            kv("synth_lag", sy.config.lag.to_string());
            kv("synth_noise", sy.config.noise_std.to_string());
        }
        s
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec { t_in: self.model.t_in, t_out: self.model.t_out, f_out: self.model.f_out }
    }
}

pub fn load_source(cfg: &RunConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    match (&cfg.data, &cfg.synth) {
        (Some(p), None) => load_dataset(p),
        (None, Some(s)) => synth_generate(s.nodes, s.steps, s.seed, &s.config),
        _ => unreachable!("validated above"),
    }
}

/// Dataset with its split, train scaler and windows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub bundle: DatasetBundle,
    pub splits: Splits,
    pub scaler: Scaler,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn prepare(bundle: DatasetBundle, cfg: &RunConfig) -> Result<Prepared> {
    let spec = cfg.window_spec();
    if spec.f_out > bundle.n_features {
        return Err(shape_err("target features (f_out)", format!("<= {}", bundle.n_features), spec.f_out));
    }
    let splits = split(bundle.n_steps(), cfg.split, spec.t_in + spec.t_out)?;
    let scaler = Scaler::fit(&bundle, &splits.train)?;
    let train = make_windows(&bundle, &splits.train, spec, &scaler);
    let val = make_windows(&bundle, &splits.val, spec, &scaler);
    let test = make_windows(&bundle, &splits.test, spec, &scaler);
    Ok(Prepared { bundle, splits, scaler, train, val, test })
}

/// Model configuration completed with the dataset's shape.
pub fn model_config_for(cfg: &RunConfig, bundle: &DatasetBundle) -> ModelConfig {
    ModelConfig { n_nodes: bundle.n_nodes, f_in: bundle.n_features, steps_per_day: bundle.steps_per_day(), ..cfg.model.clone() }
}

/// Stacks windows into a model batch and the flattened targets.
pub fn make_batch(windows: &[&WindowSample]) -> (Batch, Vec<f64>) {
    let mut x = Vec::new();
    let mut marks = Vec::new();
    let mut y = Vec::new();
    for w in windows {
        x.extend_from_slice(&w.x);
        marks.extend_from_slice(&w.marks);
        y.extend_from_slice(&w.y);
    }
    (Batch { size: windows.len(), x, marks }, y)
}

/// Model, optimizer and the random stream used for shuffling and dropout.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub rng: Rng,
    pub null_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    /// Memory slot selections per layer; empty for layers whose keys do not move.
    pub slot_hits: Vec<Vec<u64>>,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, null_value: Option<f64>) -> Self {
        // a stream separate from initialization, derived from the same seed
        let rng = seeded_rng(model.config.seed ^ 0x5eed_0fda_7a);
        Self { model, opt: Adam::new(lr), rng, null_value }
    }

    /// Forward, loss, backward, key EMA, optimizer step.
    pub fn step(&mut self, windows: &[&WindowSample]) -> Result<StepStats> {
        let (batch, y) = make_batch(windows);
        let mut tape = Tape::new();
        let mut updates = self.model.key_updates();
        let out = self.model.forward_tape(&mut tape, &batch, true, &mut self.rng, Some(&mut updates))?;
        let out = self.model.unscale_tape(&mut tape, out);
        let loss = loss_mae_tape(&mut tape, out, &y, self.null_value);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(StlinkError::NonFinite("training loss".into()));
        }
        tape.backward(loss);
        self.model.store.zero_grad();
        tape.accumulate_param_grads(&mut self.model.store);
        self.model.apply_key_updates(&updates);
        self.opt.step(&mut self.model.store, self.model.config.precision);
        let slot_hits = updates.iter().map(|u| u.as_ref().map(|u| u.hits().to_vec()).unwrap_or_default()).collect();
        Ok(StepStats { loss: value, slot_hits })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch {
        epoch: usize,
        train_loss: f64,
        val: Option<Metrics>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        wall_ms: Option<f64>,
        /// Memory slot selection counts per layer over the epoch.
        slot_hits: Vec<Vec<u64>>,
        improved: bool,
    },
    Final {
        best_epoch: Option<usize>,
        best_val_mae: Option<f64>,
        test: HorizonTable,
    },
}

/// Append-only list of records, one JSON object per line when serialized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<PathBuf>,
}

impl RunLog {
    /// Also appends every record to `path` as it is pushed.
    pub fn with_sink(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::File::create(&path)?;
        Ok(Self { records: Vec::new(), sink: Some(path) })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(path) = &self.sink {
            let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&record).map_err(|e| StlinkError::InvalidConfig(e.to_string()))?)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log records serialize") + "\n").collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| StlinkError::InvalidConfig(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records, sink: None })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs()
            .map(|r| match r {
                LogRecord::Epoch { train_loss, .. } => *train_loss,
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn final_record(&self) -> Option<(&Option<usize>, &HorizonTable)> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Final { best_epoch, test, .. } => Some((best_epoch, test)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE (initialization if none ran).
    pub best: Model,
    pub log: RunLog,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let bundle = load_source(cfg)?;
    let prepared = prepare(bundle, cfg)?;
    train_prepared(cfg, &prepared, RunLog::default())
}

pub fn train_prepared(cfg: &RunConfig, data: &Prepared, mut log: RunLog) -> Result<TrainOutcome> {
    cfg.model.ablation.validate()?;
    if cfg.batch_size == 0 {
        return Err(StlinkError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut model = Model::new(model_config_for(cfg, &data.bundle))?;
    model.scaler = data.scaler.clone();
    let null_value = data.bundle.null_value();
    let mut trainer = Trainer::new(model, cfg.lr, null_value);
    let mut best = trainer.model.clone();
    let mut best_mae: Option<f64> = None;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut trainer.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut hits: Vec<Vec<u64>> = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<&WindowSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let stats = trainer.step(&windows).map_err(|e| match e {
                StlinkError::NonFinite(_) => StlinkError::Diverged { epoch, batch: bi, loss: f64::NAN },
                other => other,
            })?;
            loss_sum += stats.loss;
            batches += 1;
            if hits.is_empty() {
                hits = stats.slot_hits;
            } else {
                for (acc, h) in hits.iter_mut().zip(&stats.slot_hits) {
                    acc.iter_mut().zip(h).for_each(|(a, b)| *a += b);
                }
            }
        }
        let val = evaluate_windows(&trainer.model, &data.val, null_value)?.aggregate;
        let improved = match (val, best_mae) {
            (Some(v), Some(b)) => v.mae < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = trainer.model.clone();
            best_mae = val.map(|v| v.mae);
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(LogRecord::Epoch {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            val,
            wall_ms: cfg.log_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
            slot_hits: hits,
            improved,
        })?;
        if stale >= cfg.patience {
            break;
        }
    }
    let test = evaluate_windows(&best, &data.test, null_value)?;
    log.push(LogRecord::Final { best_epoch, best_val_mae: best_mae, test })?;
    Ok(TrainOutcome { best, log })
}

/// Eval-mode forecasts for `windows`, `samples x T_out x N x F_out` in data units.
pub fn forecast_windows(model: &Model, windows: &[WindowSample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in windows.chunks(64) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (batch, _) = make_batch(&refs);
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

pub fn evaluate_windows(model: &Model, windows: &[WindowSample], null_value: Option<f64>) -> Result<HorizonTable> {
    let c = &model.config;
    let pred = forecast_windows(model, windows)?;
    let truth: Vec<f64> = windows.iter().flat_map(|w| w.y.iter().copied()).collect();
    Ok(horizon_metrics(&pred, &truth, c.t_out, c.n_nodes * c.f_out, null_value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = StlinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(StlinkError::InvalidConfig(format!("split must be train, val or test (got '{s}')"))),
        }
    }
}

/// Checks that a model was built for data shaped like `bundle`.
pub fn check_compatible(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    let c = &model.config;
    let got = (bundle.n_nodes, bundle.n_features, bundle.steps_per_day());
    let want = (c.n_nodes, c.f_in, c.steps_per_day);
    if got != want {
        return Err(shape_err(
            "checkpoint vs dataset (nodes, features, steps per day)",
            format!("nodes={}, features={}, steps_per_day={}", want.0, want.1, want.2),
            format!("nodes={}, features={}, steps_per_day={}", got.0, got.1, got.2),
        ));
    }
    Ok(())
}

/// Eval-mode metrics by horizon on one split of `bundle`. Inputs are scaled with
/// the checkpoint's own scaler.
pub fn evaluate(model: &Model, bundle: &DatasetBundle, ratio: SplitRatio, which: SplitName) -> Result<HorizonTable> {
    check_compatible(model, bundle)?;
    let c = &model.config;
    let spec = WindowSpec { t_in: c.t_in, t_out: c.t_out, f_out: c.f_out };
    let s = split(bundle.n_steps(), ratio, spec.t_in + spec.t_out)?;
    let range = match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
    };
    let windows = make_windows(bundle, &range, spec, &model.scaler);
    evaluate_windows(model, &windows, bundle.null_value())
}

/// Runs `n` seeds `seed, seed + 1, ...` on the same data and split.
pub fn run_seeds(cfg: &RunConfig, data: &Prepared, n: usize) -> Result<Vec<(u64, TrainOutcome)>> {
    (0..n as u64)
        .map(|i| {
            let mut c = cfg.clone();
            c.model.seed = cfg.model.seed + i;
            train_prepared(&c, data, RunLog::default()).map(|o| (c.model.seed, o))
        })
        .collect()
}

pub fn test_mae(outcome: &TrainOutcome) -> Option<f64> {
    outcome.log.final_record().and_then(|(_, t)| t.aggregate.map(|m| m.mae))
}

fn fmt_metric(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Aligned text table of a horizon table.
pub fn format_table(t: &HorizonTable) -> String {
    let mut s = format!("{:<8} {:>10} {:>10} {:>10}\n", "horizon", "MAE", "RMSE", "MAPE%");
    let rows = t.rows.iter().map(|r| (r.horizon.to_string(), r.metrics)).chain(std::iter::once(("all".to_string(), t.aggregate)));
    for (h, m) in rows {
        let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10}", h, fmt_metric(m.map(|m| m.mae)), fmt_metric(m.map(|m| m.rmse)), fmt_metric(m.map(|m| m.mape)));
    }
    s
}

pub fn format_csv(t: &HorizonTable) -> String {
    let mut s = String::from("horizon,mae,rmse,mape\n");
    let rows = t.rows.iter().map(|r| (r.horizon.to_string(), r.metrics)).chain(std::iter::once(("all".to_string(), t.aggregate)));
    for (h, m) in rows {
        let cell = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "{h},{},{},{}", cell(m.map(|m| m.mae)), cell(m.map(|m| m.rmse)), cell(m.map(|m| m.mape)));
    }
    s
}

/// Config used by the whole-model gradient check: two trainable layers, one
/// head, three nodes, four steps in and out, 64-bit.
pub fn gradcheck_config(d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers: 2,
        n_trainable_upper: 2,
        heads: 1,
        t_in: 4,
        t_out: 4,
        n_nodes: 3,
        f_in: 1,
        f_out: 1,
        dropout: 0.0,
        slots: 4,
        top_k_mem: 2,
        experts: 2,
        top_k_exp: 1,
        d_ff: 2 * d_model,
        alpha: 0.1,
        steps_per_day: 288,
        seed,
        precision: Precision::F64,
        ablation: Default::default(),
    }
}

/// Central differences against tape gradients for every trainable scalar of a
/// freshly initialized model on a random two-sample batch.
pub fn gradcheck_fresh(config: ModelConfig, check: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(config.seed ^ 0x9c4e_c4ec);
    let mut model = Model::new(config)?;
    let c = model.config.clone();
    model.scaler = Scaler { mean: (0..c.f_in).map(|_| rng.random_range(-1.0..1.0)).collect(), std: (0..c.f_in).map(|_| rng.random_range(0.5..2.0)).collect() };
    let size = 2;
    let x = (0..size * c.t_in * c.n_nodes * c.f_in).map(|_| rng.random_range(-1.5..1.5)).collect();
    let marks = (0..size * c.t_in).map(|i| TimeMark { slot: (i * 7) % c.steps_per_day, dow: i % 7 }).collect();
    let batch = Batch { size, x, marks };
    let truth: Vec<f64> = (0..size * c.t_out * c.n_nodes * c.f_out).map(|_| rng.random_range(-2.0..2.0)).collect();
    grad_check(&mut ModelObjective { model, batch: &batch, truth: &truth }, check)
}

/// Forecast from the last `T_in` steps of `bundle`. Returns the future
/// timestamps and `T_out x N x F_out` predictions in data units.
pub fn forecast_tail(model: &Model, bundle: &DatasetBundle) -> Result<(Vec<NaiveDateTime>, Vec<f64>)> {
    check_compatible(model, bundle)?;
    let c = &model.config;
    let total = bundle.n_steps();
    if total < c.t_in {
        return Err(StlinkError::Dataset(format!("window file has {total} steps, the model needs {}", c.t_in)));
    }
    let start = total - c.t_in;
    let mut x = Vec::with_capacity(c.t_in * c.n_nodes * c.f_in);
    for t in start..total {
        for node in 0..c.n_nodes {
            for k in 0..c.f_in {
                x.push(model.scaler.transform(bundle.value(node, t, k), k));
            }
        }
    }
    let batch = Batch { size: 1, x, marks: bundle.marks[start..].to_vec() };
    let pred = model.predict(&batch)?;
    let last = bundle.timestamps[total - 1];
    let step = chrono::Duration::minutes(i64::from(bundle.interval_min));
    let times = (1..=c.t_out as i32).map(|h| last + step * h).collect();
    Ok((times, pred))
}

/// One row per forecast step: `step,timestamp,<node>[:<feature>]...`.
pub fn format_forecast_csv(model: &Model, bundle: &DatasetBundle, times: &[NaiveDateTime], pred: &[f64]) -> String {
    let c = &model.config;
    let mut s = String::from("step,timestamp");
    for id in &bundle.node_ids {
        for k in 0..c.f_out {
            if c.f_out == 1 {
                let _ = write!(s, ",{id}");
            } else {
                let _ = write!(s, ",{id}:{k}");
            }
        }
    }
    s.push('\n');
    let width = c.n_nodes * c.f_out;
    for (h, t) in times.iter().enumerate() {
        let _ = write!(s, "{},{}", h + 1, t.format("%Y-%m-%dT%H:%M:%S"));
        for v in &pred[h * width..(h + 1) * width] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Metric-wise mean over runs. A cell is `None` when any run lacks it.
pub fn average_tables(tables: &[HorizonTable]) -> Option<HorizonTable> {
    let first = tables.first()?;
    let mean = |cells: Vec<Option<Metrics>>| -> Option<Metrics> {
        let cells: Option<Vec<Metrics>> = cells.into_iter().collect();
        let cells = cells?;
        let n = cells.len() as f64;
        Some(Metrics {
            mae: cells.iter().map(|m| m.mae).sum::<f64>() / n,
            rmse: cells.iter().map(|m| m.rmse).sum::<f64>() / n,
            mape: cells.iter().map(|m| m.mape).sum::<f64>() / n,
        })
    };
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| HorizonRow { horizon: r.horizon, metrics: mean(tables.iter().map(|t| t.rows.get(i).and_then(|x| x.metrics)).collect()) })
        .collect();
    Some(HorizonTable { rows, aggregate: mean(tables.iter().map(|t| t.aggregate).collect()) })
}
