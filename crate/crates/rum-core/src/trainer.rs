//! End-to-end training and evaluation loops with metrics, seeding, and
//! checkpointing.
//!
//! Every run is fully deterministic: one seeded stream drives parameter
//! initialization and the per-iteration training batches, while
//! validation recreates its own fixed stream (the run seed mixed with
//! [`VALIDATION_SEED_MIX`]) on every evaluation, so identical configs
//! give byte-identical `metrics.csv` files and checkpoints, and a
//! mid-run save/load continues bit-exactly.

use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cells::{self, build_sequence_loss, one_hot, CellConfig, CellKind, Model};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::optim::{clip_by_global_norm, OptimHyper, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tasks::{gen_copying, gen_recall, TaskBatch, TaskKind};
use crate::tensor::{self, argmax_row, softmax_cross_entropy, Tensor, TensorError};

/// XOR-mixed into the run seed to derive the disjoint validation stream.
pub const VALIDATION_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// `metrics.csv` column header.
pub const METRICS_HEADER: &str = "iteration,train_loss,val_loss,val_acc,seconds";

/// File name of the rolling checkpoint inside the output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Worst tolerated ‖RᵀR − I‖∞ for the accumulated rotation (λ = 1).
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Tensor(TensorError),
    Io(std::io::Error),
    Checkpoint(CheckpointError),
    /// Training aborted: a non-finite value appeared at `iteration` in
    /// the named tensor.
    NonFinite {
        iteration: u64,
        tensor: String,
    },
    /// The accumulated rotation drifted off the orthogonal group.
    RotationDrift {
        iteration: u64,
        max_err: f64,
    },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid config: {msg}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "io error: {e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::NonFinite { iteration, tensor } => {
                write!(
                    f,
                    "non-finite value in '{tensor}' at iteration {iteration}; aborting"
                )
            }
            TrainError::RotationDrift { iteration, max_err } => write!(
                f,
                "accumulated rotation lost orthogonality at iteration {iteration} \
                 (‖RᵀR − I‖∞ = {max_err:.3e})"
            ),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ── Run configuration ────────────────────────────────────────────────────

/// Everything that defines a training run. `out_dir` is runtime plumbing
/// and is not serialized into checkpoints, so runs in different
/// directories still produce byte-identical checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub cell: CellKind,
    pub n_h: usize,
    /// 0: per-step rotation only; 1: accumulate the rotation product.
    pub lambda: u32,
    /// Time-normalization norm; `None` disables it.
    pub eta: Option<f64>,
    /// Task length parameter T.
    pub t: usize,
    pub n_b: usize,
    /// Copying alphabet size n (data symbols).
    pub n_symbols: usize,
    pub copy_len: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub max_iters: u64,
    pub eval_every: u64,
    /// Validation batches per evaluation.
    pub eval_batches: usize,
    pub checkpoint_every: u64,
    /// Cadence of the λ=1 orthogonality re-check.
    pub orth_check_every: u64,
    pub seed: u64,
    /// When false the `seconds` metrics column reads 0.000, keeping the
    /// file byte-reproducible.
    pub log_timing: bool,
    #[serde(skip)]
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Copying,
            cell: CellKind::Rum,
            n_h: 100,
            lambda: 0,
            eta: None,
            t: 100,
            n_b: 128,
            n_symbols: 8,
            copy_len: 10,
            optimizer: OptimizerKind::Rmsprop,
            lr: 0.001,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            max_iters: 10_000,
            eval_every: 50,
            eval_batches: 4,
            checkpoint_every: 1000,
            orth_check_every: 100,
            seed: 1,
            log_timing: false,
            out_dir: "run".to_string(),
        }
    }
}

impl RunConfig {
    pub fn vocab_in(&self) -> usize {
        match self.task {
            TaskKind::Copying => self.n_symbols + 2,
            TaskKind::Recall => self.t / 2 + 11,
        }
    }

    pub fn vocab_out(&self) -> usize {
        match self.task {
            TaskKind::Copying => self.n_symbols + 1,
            TaskKind::Recall => self.t / 2 + 11,
        }
    }

    pub fn cell_config(&self) -> CellConfig {
        CellConfig {
            n_x: self.vocab_in(),
            n_h: self.n_h,
            lambda: self.lambda,
            eta: self.eta,
        }
    }

    pub fn optim_hyper(&self) -> OptimHyper {
        OptimHyper {
            lr: self.lr,
            decay: self.decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn sample_batch(&self, rng: &mut Rng) -> std::result::Result<TaskBatch, TensorError> {
        match self.task {
            TaskKind::Copying => gen_copying(self.n_symbols, self.copy_len, self.t, self.n_b, rng),
            TaskKind::Recall => gen_recall(self.t, self.n_b, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.n_h == 0 || self.t == 0 || self.n_b == 0 {
            return bad(format!(
                "N_h={}, T={}, N_b={} must all be ≥ 1",
                self.n_h, self.t, self.n_b
            ));
        }
        if self.cell != CellKind::Rum && (self.lambda != 0 || self.eta.is_some()) {
            return bad(format!(
                "λ and η apply only to the rum cell (cell = {})",
                self.cell
            ));
        }
        match self.task {
            TaskKind::Copying => {
                if self.n_symbols < 2 {
                    return bad(format!(
                        "copying needs ≥ 2 data symbols, got {}",
                        self.n_symbols
                    ));
                }
                if self.copy_len == 0 {
                    return bad("copy_len must be ≥ 1".to_string());
                }
            }
            TaskKind::Recall => {
                if self.t < 4 || !self.t.is_multiple_of(2) {
                    return bad(format!("recall needs even T ≥ 4, got {}", self.t));
                }
            }
        }
        // NaN fails every comparison, so both predicates reject it too.
        let positive = |x: f64| x > 0.0;
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !positive(self.lr) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !open_unit(self.decay) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return bad(format!(
                "betas must lie in (0, 1), got {}, {}",
                self.beta1, self.beta2
            ));
        }
        if !positive(self.eps) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if let Some(c) = self.clip_norm {
            if !positive(c) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.eval_every == 0
            || self.eval_batches == 0
            || self.checkpoint_every == 0
            || self.orth_check_every == 0
        {
            return bad("eval/checkpoint/orthogonality cadences must be ≥ 1".to_string());
        }
        self.cell_config().validate()?;
        Ok(())
    }

    /// Applies one flat `key=value` override (the config-file and CLI
    /// flag format).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| TrainError::Config(format!("bad value for {key} ('{value}'): {e}")))
        }
        match key {
            "task" => self.task = parse(key, value)?,
            "cell" => self.cell = parse(key, value)?,
            "n_h" => self.n_h = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "eta" => {
                self.eta = match value {
                    "none" | "disabled" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "t" => self.t = parse(key, value)?,
            "n_b" => self.n_b = parse(key, value)?,
            "n_symbols" => self.n_symbols = parse(key, value)?,
            "copy_len" => self.copy_len = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" | "disabled" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "max_iters" => self.max_iters = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_batches" => self.eval_batches = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "orth_check_every" => self.orth_check_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_timing" => self.log_timing = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(TrainError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// Trainable scalars for a run configuration (sum over the checkpoint
/// tensor directory).
pub fn count_params(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    Ok(cells::count_params(
        config.cell,
        &config.cell_config(),
        config.vocab_out(),
    ))
}

// ── Metrics ──────────────────────────────────────────────────────────────

/// One evaluation record; losses are nats per masked position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.iteration, self.train_loss, self.val_loss, self.val_acc, self.seconds
        )
    }
}

/// What a finished (or early-stopped) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub model: Model,
    pub final_iteration: u64,
    pub checkpoint_path: PathBuf,
    pub stopped_early: bool,
}

// ── Training ─────────────────────────────────────────────────────────────

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    train_with_observer(config, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], but invokes `observer` after every metrics record;
/// returning `ControlFlow::Break(())` stops the run early (the final
/// checkpoint is still written).
pub fn train_with_observer<F>(config: &RunConfig, observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord, &Model) -> ControlFlow<()>,
{
    config.validate()?;
    let mut rng = Rng::from_seed(config.seed);
    let model = Model::new(
        config.cell,
        config.cell_config(),
        config.vocab_out(),
        &mut rng,
    )?;
    let shapes: Vec<&[usize]> = model.params().iter().map(|(_, t)| t.shape()).collect();
    let optimizer = Optimizer::new(config.optimizer, config.optim_hyper(), &shapes);
    run_loop(config.clone(), model, optimizer, rng, 0, observer)
}

/// Continues a checkpointed run to its configured `max_iters`, appending
/// to `out_dir/metrics.csv`. Training resumes bit-exactly: parameters,
/// optimizer accumulators, and the rng stream all restart from the
/// saved state.
pub fn resume(ckpt_path: &Path, out_dir: &str) -> Result<TrainOutcome> {
    resume_with_observer(ckpt_path, out_dir, |_, _| ControlFlow::Continue(()))
}

pub fn resume_with_observer<F>(ckpt_path: &Path, out_dir: &str, observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord, &Model) -> ControlFlow<()>,
{
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut config = ckpt.config.clone();
    config.out_dir = out_dir.to_string();
    config.validate()?;
    let model = ckpt.restore_model()?;
    let optimizer = ckpt.restore_optimizer()?;
    let rng = ckpt.restore_rng()?;
    run_loop(config, model, optimizer, rng, ckpt.iteration, observer)
}

fn run_loop<F>(
    config: RunConfig,
    mut model: Model,
    mut optimizer: Optimizer,
    mut rng: Rng,
    start_iteration: u64,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord, &Model) -> ControlFlow<()>,
{
    fs::create_dir_all(&config.out_dir)?;
    let metrics_path = Path::new(&config.out_dir).join("metrics.csv");
    let fresh = !metrics_path.exists();
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if fresh {
        writeln!(metrics_file, "{METRICS_HEADER}")?;
    }
    let checkpoint_path = Path::new(&config.out_dir).join(CHECKPOINT_FILE);

    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let mut iteration = start_iteration;

    while iteration < config.max_iters {
        iteration += 1;
        let batch = config.sample_batch(&mut rng)?;
        let mut tape = Tape::new();
        let graph = match build_sequence_loss(&mut tape, &model, &batch) {
            Ok(g) => g,
            Err(TensorError::NonFinite { .. }) => return Err(non_finite_diag(iteration, &model)),
            Err(e) => return Err(e.into()),
        };
        let train_loss = tape.value(graph.loss).item();
        if !train_loss.is_finite() {
            return Err(non_finite_diag(iteration, &model));
        }
        if config.lambda == 1 && iteration.is_multiple_of(config.orth_check_every) {
            if let Some(r_id) = graph.final_r {
                let max_err = max_orthogonality_error(tape.value(r_id));
                if max_err > ORTHOGONALITY_TOLERANCE {
                    return Err(TrainError::RotationDrift { iteration, max_err });
                }
            }
        }
        let mut grad_map = match tape.backward_scalar(graph.loss) {
            Ok(g) => g,
            Err(TensorError::NonFinite { .. }) => return Err(non_finite_diag(iteration, &model)),
            Err(e) => return Err(e.into()),
        };
        let mut grads: Vec<Option<Tensor>> = graph
            .param_ids
            .iter()
            .map(|&id| grad_map.take(id))
            .collect();
        if let Some(max_norm) = config.clip_norm {
            clip_by_global_norm(&mut grads, max_norm);
        }
        if let Err(e) = optimizer.update(model.params_mut(), &grads) {
            return Err(match e {
                TensorError::NonFinite { .. } => non_finite_diag(iteration, &model),
                other => TrainError::Tensor(other),
            });
        }

        if iteration.is_multiple_of(config.checkpoint_every) {
            Checkpoint::capture(&config, iteration, &model, &optimizer, &rng)
                .save(&checkpoint_path)?;
        }
        if iteration.is_multiple_of(config.eval_every) {
            let (val_loss, val_acc) = evaluate(&model, &config, config.eval_batches)?;
            let record = MetricsRecord {
                iteration,
                train_loss,
                val_loss,
                val_acc,
                seconds: if config.log_timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            writeln!(metrics_file, "{}", record.to_csv_line())?;
            metrics.push(record);
            if let ControlFlow::Break(()) = observer(&record, &model) {
                stopped_early = true;
                break;
            }
        }
    }

    Checkpoint::capture(&config, iteration, &model, &optimizer, &rng).save(&checkpoint_path)?;
    Ok(TrainOutcome {
        metrics,
        model,
        final_iteration: iteration,
        checkpoint_path,
        stopped_early,
    })
}

fn non_finite_diag(iteration: u64, model: &Model) -> TrainError {
    for (name, t) in model.params() {
        if t.data().iter().any(|x| !x.is_finite()) {
            return TrainError::NonFinite {
                iteration,
                tensor: name.clone(),
            };
        }
    }
    TrainError::NonFinite {
        iteration,
        tensor: "loss".to_string(),
    }
}

/// Worst |(RᵀR − I)_{ij}| over all batch elements of a stacked rotation.
fn max_orthogonality_error(r: &Tensor) -> f64 {
    let (nb, n, _) = r.dims3();
    let mut worst = 0.0f64;
    for b in 0..nb {
        let m = r.slab(b);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += m[k * n + i] * m[k * n + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
    }
    worst
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// Runs the model over `num_batches` freshly generated validation
/// batches (fixed stream derived from the config seed) and returns
/// (mean loss in nats, accuracy) over all masked positions.
pub fn evaluate(model: &Model, config: &RunConfig, num_batches: usize) -> Result<(f64, f64)> {
    if num_batches == 0 {
        return Err(TrainError::Config("evaluation needs ≥ 1 batch".to_string()));
    }
    let mut rng = Rng::from_seed(config.seed ^ VALIDATION_SEED_MIX);
    let mut loss_sum = 0.0;
    let mut masked = 0usize;
    let mut correct = 0usize;
    for _ in 0..num_batches {
        let batch = config.sample_batch(&mut rng)?;
        let (l, m, c) = score_model_on_batch(model, &batch)?;
        loss_sum += l;
        masked += m;
        correct += c;
    }
    Ok((loss_sum / masked as f64, correct as f64 / masked as f64))
}

/// Loads a checkpointed model and evaluates it under its stored config.
pub fn evaluate_checkpoint(ckpt_path: &Path, num_batches: usize) -> Result<(f64, f64)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.restore_model()?;
    evaluate(&model, &ckpt.config, num_batches)
}

/// Pure-forward scoring: returns (summed masked loss, masked count,
/// correct count) for one batch.
fn score_model_on_batch(model: &Model, batch: &TaskBatch) -> Result<(f64, usize, usize)> {
    if batch.vocab_in != model.config.n_x || batch.vocab_out != model.n_out {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "evaluate",
            detail: format!(
                "batch vocab {}→{}, model {}→{}",
                batch.vocab_in, batch.vocab_out, model.config.n_x, model.n_out
            ),
        }));
    }
    let (n_b, len) = (batch.n_b, batch.len);
    let w_out = model.param("W_out");
    let b_out = model.param("b_out");
    let mut state = model.init_state(n_b);
    let mut loss_sum = 0.0;
    let mut masked = 0usize;
    let mut correct = 0usize;
    for t in 0..len {
        let tokens: Vec<usize> = (0..n_b).map(|row| batch.inputs[row * len + t]).collect();
        let x = one_hot(&tokens, batch.vocab_in)?;
        state = model.step(&state, &x)?;
        let step_mask: Vec<bool> = (0..n_b).map(|row| batch.mask[row * len + t]).collect();
        if !step_mask.iter().any(|&m| m) {
            continue;
        }
        let logits = tensor::add_row(&tensor::matmul(state.hidden(), w_out)?, b_out)?;
        let step_targets: Vec<usize> = (0..n_b).map(|row| batch.targets[row * len + t]).collect();
        let (l, m, c) = score_step(&logits, &step_targets, &step_mask)?;
        loss_sum += l;
        masked += m;
        correct += c;
    }
    Ok((loss_sum, masked, correct))
}

/// Scores one step's logits: (summed masked loss, masked count, correct
/// count). Correctness is argmax equality at masked rows.
pub(crate) fn score_step(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> std::result::Result<(f64, usize, usize), TensorError> {
    let (mean_loss, _) = softmax_cross_entropy(logits, targets, Some(mask))?;
    let masked = mask.iter().filter(|&&m| m).count();
    let mut correct = 0usize;
    for (row, (&m, &t)) in mask.iter().zip(targets).enumerate() {
        if m && argmax_row(logits, row) == t {
            correct += 1;
        }
    }
    Ok((mean_loss * masked as f64, masked, correct))
}
