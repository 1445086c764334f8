//! Library-level training driver: configure a run with the same
//! `key=value` pairs the CLI accepts, stream evaluation records with
//! wall-clock timing, and report peak memory at the end.
//!
//! Two extra keys demonstrate observer-driven early stopping:
//! `stop_below_val=<loss>` and `stop_at_acc=<accuracy>` end the run at
//! the first evaluation meeting the threshold.
//!
//! ```text
//! cargo run --example train -- task=copying n_h=100 t=100 max_iters=500
//! ```

use std::env;
use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::Instant;

use rum_core::trainer::{self, RunConfig};

fn main() -> ExitCode {
    let mut cfg = RunConfig::default();
    let mut stop_below_val: Option<f64> = None;
    let mut stop_at_acc: Option<f64> = None;
    for arg in env::args().skip(1) {
        let Some((k, v)) = arg.split_once('=') else {
            eprintln!("expected key=value, got '{arg}'");
            return ExitCode::FAILURE;
        };
        let parsed = match k {
            "stop_below_val" => &mut stop_below_val,
            "stop_at_acc" => &mut stop_at_acc,
            _ => {
                if let Err(e) = cfg.apply_kv(k, v) {
                    eprintln!("{e}");
                    return ExitCode::FAILURE;
                }
                continue;
            }
        };
        match v.parse() {
            Ok(x) => *parsed = Some(x),
            Err(e) => {
                eprintln!("bad value for {k} ('{v}'): {e}");
                return ExitCode::FAILURE;
            }
        }
    }

    let start = Instant::now();
    let mut last = Instant::now();
    let mut last_iter = 0u64;
    let outcome = trainer::train_with_observer(&cfg, |rec, _| {
        let now = Instant::now();
        let span = (rec.iteration - last_iter).max(1);
        println!(
            "iter {:>6}  train {:.4}  val {:.4}  acc {:.4}  {:.3} s/iter",
            rec.iteration,
            rec.train_loss,
            rec.val_loss,
            rec.val_acc,
            now.duration_since(last).as_secs_f64() / span as f64
        );
        last = now;
        last_iter = rec.iteration;
        if stop_below_val.is_some_and(|t| rec.val_loss < t)
            || stop_at_acc.is_some_and(|t| rec.val_acc >= t)
        {
            println!("threshold met at iteration {}", rec.iteration);
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "finished {} iterations in {:.1} s, checkpoint {}",
        outcome.final_iteration,
        start.elapsed().as_secs_f64(),
        outcome.checkpoint_path.display()
    );
    if let Ok(status) = std::fs::read_to_string("/proc/self/status") {
        if let Some(line) = status.lines().find(|l| l.starts_with("VmHWM")) {
            println!("peak memory: {}", line.trim_start_matches("VmHWM:").trim());
        }
    }
    ExitCode::SUCCESS
}
