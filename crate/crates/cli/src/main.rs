//! `stlink`: train, evaluate and query spatio-temporal forecasting models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use stlink_core::data::{load_dataset, save_dataset, synth_generate, SplitRatio, SynthConfig};
use stlink_core::numerics::GradCheckConfig;
use stlink_core::runner::{
    average_tables, evaluate, forecast_tail, format_csv, format_forecast_csv, format_table, gradcheck_config, gradcheck_fresh, load_source, prepare, train_prepared, RunConfig,
    RunLog, SplitName,
};
use stlink_core::{Model, Result, StlinkError};

const BOOL_KEYS: &[&str] = &["no_se_attention", "standard_rope", "no_memory", "standard_ffn", "log_wall_time"];

/// Every run-config key as a `--kebab-case` flag. Only flags given on the
/// command line are recorded, so they override the config file.
#[derive(Debug, Clone, Default)]
struct ConfigFlags(Vec<(String, String)>);

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Vec::new();
        for key in RunConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                out.push((key.to_string(), v.clone()));
            }
        }
        Ok(Self(out))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(mut cmd: Command) -> Command {
        for key in RunConfig::KEYS {
            let mut arg = Arg::new(*key).long(key.replace('_', "-")).value_name("VALUE").action(ArgAction::Set).help_heading("Config options");
            if BOOL_KEYS.contains(key) {
                arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Debug, Parser)]
#[command(name = "stlink", version, about = "Spatio-temporal forecasting with spatial rotary attention and memory-routed experts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a model and write the best-validation checkpoint.
    Train {
        /// Flat `key = value` config file; flags win over it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path. With several seeds, `.seed<N>` is appended.
        #[arg(long, default_value = "stlink.ckpt")]
        out: PathBuf,
        /// Line-delimited JSON run log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Train seeds `seed .. seed + N` and report the mean test table.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Metrics by horizon for a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Supplies the data source and split ratio; model options are ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which split to score: train, val or test.
        #[arg(long, default_value = "test")]
        part: String,
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Forecast from the last input window of a dataset file; prints CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: PathBuf,
    },
    /// Finite-difference check of all gradients of a fresh small model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write a synthetic dataset file.
    Synth {
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 2016)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        coupling: Option<f64>,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(file: Option<&Path>, flags: &ConfigFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_kv_file(path)?;
    }
    cfg.apply_seed_env()?;
    for (k, v) in &flags.0 {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_seed_suffix(path: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".seed{seed}"));
    PathBuf::from(s)
}

fn print_table(t: &stlink_core::HorizonTable, csv: bool) {
    if csv {
        print!("{}", format_csv(t));
    } else {
        print!("{}", format_table(t));
    }
}

fn train_cmd(config: Option<&Path>, out: &Path, log: Option<&Path>, seeds: usize, csv: bool, flags: &ConfigFlags) -> Result<()> {
    if seeds == 0 {
        return Err(StlinkError::InvalidConfig("--seeds must be at least 1".into()));
    }
    let cfg = run_config(config, flags)?;
    let data = prepare(load_source(&cfg)?, &cfg)?;
    let many = seeds > 1;
    let mut tables = Vec::new();
    for i in 0..seeds as u64 {
        let mut c = cfg.clone();
        c.model.seed = cfg.model.seed + i;
        let run_log = match log {
            Some(p) => RunLog::with_sink(with_seed_suffix(p, c.model.seed, many))?,
            None => RunLog::default(),
        };
        let outcome = train_prepared(&c, &data, run_log)?;
        let ckpt = with_seed_suffix(out, c.model.seed, many);
        outcome.best.save(&ckpt)?;
        if let Some((best_epoch, table)) = outcome.log.final_record() {
            let best = best_epoch.map_or_else(|| "init".to_string(), |e| e.to_string());
            let mae = table.aggregate.map_or_else(|| "-".to_string(), |m| format!("{:.4}", m.mae));
            eprintln!("seed {}: best epoch {best}, test MAE {mae}, checkpoint {}", c.model.seed, ckpt.display());
            tables.push(table.clone());
        }
    }
    if let Some(t) = average_tables(&tables) {
        if many && !csv {
            println!("mean over {seeds} seeds");
        }
        print_table(&t, csv);
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, config: Option<&Path>, part: &str, csv: bool, flags: &ConfigFlags) -> Result<()> {
    let which: SplitName = part.parse()?;
    let cfg = run_config(config, flags)?;
    let model = Model::load(checkpoint)?;
    let bundle = load_source(&cfg)?;
    let ratio: SplitRatio = cfg.split;
    print_table(&evaluate(&model, &bundle, ratio, which)?, csv);
    Ok(())
}

fn forecast_cmd(checkpoint: &Path, window: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let bundle = load_dataset(window)?;
    let (times, pred) = forecast_tail(&model, &bundle)?;
    print!("{}", format_forecast_csv(&model, &bundle, &times, &pred));
    Ok(())
}

fn gradcheck_cmd(d_model: usize, seed: u64, tol: f64) -> Result<bool> {
    let check = GradCheckConfig { tol, ..GradCheckConfig::default() };
    let report = gradcheck_fresh(gradcheck_config(d_model, seed), check)?;
    println!("checked {} scalars, max relative error {:.3e} (tol {:.1e})", report.checked, report.max_rel_error, report.tol);
    if let Some(w) = &report.worst {
        println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric);
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(report.passed())
}

fn synth_cmd(nodes: usize, steps: usize, seed: u64, coupling: Option<f64>, lag: Option<usize>, noise: Option<f64>, out: &Path) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(c) = coupling {
        cfg.coupling = c;
    }
    if let Some(l) = lag {
        cfg.lag = l;
    }
    if let Some(n) = noise {
        cfg.noise_std = n;
    }
    save_dataset(&synth_generate(nodes, steps, seed, &cfg)?, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Train { config, out, log, seeds, csv, flags } => train_cmd(config.as_deref(), out, log.as_deref(), *seeds, *csv, flags).map(|_| true),
        Cmd::Eval { checkpoint, config, part, csv, flags } => eval_cmd(checkpoint, config.as_deref(), part, *csv, flags).map(|_| true),
        Cmd::Forecast { checkpoint, window } => forecast_cmd(checkpoint, window).map(|_| true),
        Cmd::Gradcheck { d_model, seed, tol } => gradcheck_cmd(*d_model, *seed, *tol),
        Cmd::Synth { nodes, steps, seed, coupling, lag, noise, out } => synth_cmd(*nodes, *steps, *seed, *coupling, *lag, *noise, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
