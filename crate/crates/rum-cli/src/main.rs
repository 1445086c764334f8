//! Command-line front end: train models, evaluate checkpoints, export
//! kernel heatmaps, and count parameters.
//!
//! Configuration precedence is defaults < `--config` file (flat
//! `key=value` lines) < individual flags < `--set key=value` overrides.

use std::error::Error;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rum_core::cells::Model;
use rum_core::checkpoint::Checkpoint;
use rum_core::export::{diag_dominance, export_heatmap, select_tensor, HeatmapSpec};
use rum_core::rng::Rng;
use rum_core::trainer::{self, MetricsRecord, RunConfig, TrainError, METRICS_HEADER};

#[derive(Parser)]
#[command(
    name = "rum",
    version,
    about = "Rotational Unit of Memory: training, evaluation, and kernel export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or resume an interrupted run).
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out validation stream.
    Eval(EvalArgs),
    /// Export a checkpoint tensor as CSV and PGM heatmap.
    Export(ExportArgs),
    /// Print the trainable-parameter budget of a configuration.
    Params(ConfigArgs),
}

/// Flags mirroring the RunConfig fields; every value is parsed by the
/// same `key=value` machinery as the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat key=value config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// task: copying | recall
    #[arg(long)]
    task: Option<String>,
    /// cell: rum | lstm | gru
    #[arg(long)]
    cell: Option<String>,
    /// Hidden-state size N_h.
    #[arg(long)]
    n_h: Option<String>,
    /// 0 = per-step rotation, 1 = accumulated rotation (rum only).
    #[arg(long)]
    lambda: Option<String>,
    /// Time-normalization target norm, or "none".
    #[arg(long)]
    eta: Option<String>,
    /// Task length parameter T.
    #[arg(long)]
    t: Option<String>,
    /// Batch size N_b.
    #[arg(long)]
    n_b: Option<String>,
    /// Copying alphabet size.
    #[arg(long)]
    n_symbols: Option<String>,
    /// Copying prefix length.
    #[arg(long)]
    copy_len: Option<String>,
    /// optimizer: rmsprop | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// RMSProp decay rate.
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    /// Global-norm gradient clip, or "none".
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    eval_batches: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    orth_check_every: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Record wall-clock seconds in metrics.csv (breaks byte-for-byte
    /// reproducibility across machines).
    #[arg(long)]
    log_timing: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Extra key=value overrides, applied last (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn flag_pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("task", &self.task),
            ("cell", &self.cell),
            ("n_h", &self.n_h),
            ("lambda", &self.lambda),
            ("eta", &self.eta),
            ("t", &self.t),
            ("n_b", &self.n_b),
            ("n_symbols", &self.n_symbols),
            ("copy_len", &self.copy_len),
            ("optimizer", &self.optimizer),
            ("lr", &self.lr),
            ("decay", &self.decay),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("clip_norm", &self.clip_norm),
            ("max_iters", &self.max_iters),
            ("eval_every", &self.eval_every),
            ("eval_batches", &self.eval_batches),
            ("checkpoint_every", &self.checkpoint_every),
            ("orth_check_every", &self.orth_check_every),
            ("seed", &self.seed),
            ("log_timing", &self.log_timing),
            ("out_dir", &self.out_dir),
        ]
    }

    fn build(&self) -> Result<RunConfig, Box<dyn Error>> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    format!(
                        "{}:{}: expected key=value, got '{line}'",
                        path.display(),
                        lineno + 1
                    )
                })?;
                cfg.apply_kv(k.trim(), v.trim())?;
            }
        }
        for (key, value) in self.flag_pairs() {
            if let Some(v) = value {
                cfg.apply_kv(key, v)?;
            }
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| format!("--set expects key=value, got '{s}'"))?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Resume from this checkpoint; configuration then comes from the
    /// checkpoint and only --out-dir applies.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Validation batches to average over.
    #[arg(long, default_value_t = 4)]
    batches: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tensor name; ':u' / ':tau' select the column halves of a paired
    /// kernel (e.g. W_hh:tau).
    #[arg(long)]
    tensor: String,
    /// Output base path; writes <out>.csv and <out>.pgm.
    #[arg(long)]
    out: PathBuf,
    /// Lower color-scale bound (default: auto-symmetric around zero).
    #[arg(long, requires = "max")]
    min: Option<f64>,
    /// Upper color-scale bound.
    #[arg(long, requires = "min")]
    max: Option<f64>,
}

fn cmd_train(args: &TrainArgs) -> Result<(), Box<dyn Error>> {
    println!("{METRICS_HEADER}");
    let printer = |rec: &MetricsRecord, _: &Model| {
        println!("{}", rec.to_csv_line());
        ControlFlow::Continue(())
    };
    let outcome = match &args.resume {
        Some(ckpt) => {
            for (key, value) in args.config.flag_pairs() {
                if key != "out_dir" && value.is_some() {
                    return Err(format!(
                        "--resume takes its configuration from the checkpoint; --{} is not allowed",
                        key.replace('_', "-")
                    )
                    .into());
                }
            }
            if args.config.config.is_some() || !args.config.sets.is_empty() {
                return Err("--resume cannot be combined with --config/--set".into());
            }
            let out_dir = args
                .config
                .out_dir
                .clone()
                .unwrap_or_else(|| "run".to_string());
            trainer::resume_with_observer(ckpt, &out_dir, printer)?
        }
        None => {
            let cfg = args.config.build()?;
            trainer::train_with_observer(&cfg, printer)?
        }
    };
    println!(
        "done: {} iterations, checkpoint {}",
        outcome.final_iteration,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Box<dyn Error>> {
    let (loss, acc) = trainer::evaluate_checkpoint(&args.checkpoint, args.batches)?;
    println!("loss {loss:.6}");
    println!("accuracy {acc:.6}");
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), Box<dyn Error>> {
    let bounds = match (args.min, args.max) {
        (Some(min), Some(max)) => Some((min, max)),
        _ => None,
    };
    let base = args.out.display().to_string();
    let spec = HeatmapSpec {
        checkpoint: args.checkpoint.clone(),
        tensor: args.tensor.clone(),
        bounds,
        csv_out: PathBuf::from(format!("{base}.csv")),
        pgm_out: PathBuf::from(format!("{base}.pgm")),
    };
    let (min, max) = export_heatmap(&spec)?;
    println!("wrote {}", spec.csv_out.display());
    println!("wrote {}", spec.pgm_out.display());
    println!("bounds [{min}, {max}]");
    let ckpt = Checkpoint::load(&spec.checkpoint)?;
    let tensor = select_tensor(&ckpt, &spec.tensor)?;
    if tensor.rank() == 2 {
        let (r, c) = tensor.dims2();
        if r == c && r >= 2 {
            println!("diag_dominance {}", diag_dominance(&tensor)?);
        }
    }
    Ok(())
}

fn cmd_params(args: &ConfigArgs) -> Result<(), Box<dyn Error>> {
    let cfg = args.build()?;
    let total = trainer::count_params(&cfg)?;
    println!(
        "task {} cell {} T {} N_h {} vocab {}→{}",
        cfg.task,
        cfg.cell,
        cfg.t,
        cfg.n_h,
        cfg.vocab_in(),
        cfg.vocab_out()
    );
    let mut rng = Rng::from_seed(0);
    let model = Model::new(cfg.cell, cfg.cell_config(), cfg.vocab_out(), &mut rng)
        .map_err(TrainError::Tensor)?;
    for (name, t) in model.params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("{name} {} {}", dims.join("x"), t.len());
    }
    println!("total {total}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
        Command::Params(args) => cmd_params(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
