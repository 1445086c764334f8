//! End-to-end tests that drive the compiled `rum` binary: every
//! subcommand, the config precedence chain, and crash-resume parity
//! against an uninterrupted run.

use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::process::{Command, Output};

use rum_core::checkpoint::Checkpoint;
use rum_core::export::read_matrix_csv;
use rum_core::tasks::TaskKind;
use rum_core::trainer::{train_with_observer, RunConfig};
use tempfile::TempDir;

// ── Harness ──────────────────────────────────────────────────────────────

fn rum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rum"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn assert_success(out: &Output) {
    assert!(out.status.success(), "command failed:\n{}", stderr(out));
}

/// Flags for a copying run small enough to finish in milliseconds.
fn tiny_train_args(out_dir: &str) -> Vec<String> {
    [
        "train",
        "--task=copying",
        "--t=4",
        "--n-h=5",
        "--n-b=4",
        "--n-symbols=3",
        "--copy-len=2",
        "--max-iters=4",
        "--eval-every=2",
        "--checkpoint-every=2",
        "--seed=9",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("--out-dir={out_dir}")])
    .collect()
}

fn run_tiny_train(dir: &Path) -> Output {
    let args = tiny_train_args(dir.to_str().unwrap());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    rum(&refs)
}

// ── Subcommands ──────────────────────────────────────────────────────────

#[test]
fn params_reports_known_recall_budget() {
    let out = rum(&["params", "--task", "recall", "--t", "50", "--n-h", "50"]);
    assert_success(&out);
    let text = stdout(&out);
    // Recall at T = 50 has vocabulary 36; the seven tensors sum to
    // 3600 + 5000 + 100 + 1800 + 50 + 1800 + 36 = 12386.
    assert!(text.contains("vocab 36→36"), "summary line missing: {text}");
    assert!(
        text.contains("W_xh 36x100 3600"),
        "per-tensor line missing: {text}"
    );
    assert!(
        text.lines().last().unwrap() == "total 12386",
        "unexpected total: {text}"
    );
}

#[test]
fn train_streams_metrics_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = run_tiny_train(dir.path());
    assert_success(&out);

    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("iteration,train_loss,val_loss,val_acc,seconds")
    );
    // eval_every = 2, max_iters = 4 → records at iterations 2 and 4.
    let streamed: Vec<&str> = lines.clone().take(2).collect();
    assert!(
        streamed[0].starts_with("2,"),
        "first record: {}",
        streamed[0]
    );
    assert!(
        streamed[1].starts_with("4,"),
        "second record: {}",
        streamed[1]
    );
    assert!(
        text.contains("done: 4 iterations"),
        "missing completion line: {text}"
    );

    // The streamed lines are byte-for-byte the persisted metrics file.
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let expected: String = format!(
        "iteration,train_loss,val_loss,val_acc,seconds\n{}\n{}\n",
        streamed[0], streamed[1]
    );
    assert_eq!(csv, expected);
    assert!(dir.path().join("checkpoint.ckpt").exists());
}

#[test]
fn eval_reports_loss_and_accuracy() {
    let dir = TempDir::new().unwrap();
    assert_success(&run_tiny_train(dir.path()));
    let ckpt = dir.path().join("checkpoint.ckpt");
    let out = rum(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--batches",
        "2",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    let mut lines = text.lines();
    let loss_line = lines.next().unwrap();
    let acc_line = lines.next().unwrap();
    let loss: f64 = loss_line.strip_prefix("loss ").unwrap().parse().unwrap();
    let acc: f64 = acc_line.strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!(loss.is_finite() && loss > 0.0, "loss {loss}");
    assert!((0.0..=1.0).contains(&acc), "accuracy {acc}");

    // Same checkpoint, same batches → identical output (fixed stream).
    let again = rum(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--batches",
        "2",
    ]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn export_writes_matching_csv_and_pgm() {
    let dir = TempDir::new().unwrap();
    assert_success(&run_tiny_train(dir.path()));
    let ckpt = dir.path().join("checkpoint.ckpt");
    let base = dir.path().join("w_out");
    let out = rum(&[
        "export",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tensor",
        "W_out",
        "--out",
        base.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("bounds ["), "missing bounds line: {text}");

    // The CSV reparses to the exact checkpoint tensor (W_out is 5×4
    // for this run: N_h = 5, output vocabulary n + 1 = 4).
    let reread = read_matrix_csv(&dir.path().join("w_out.csv")).unwrap();
    let stored = Checkpoint::load(&ckpt).unwrap();
    let original = stored.tensor("W_out").unwrap();
    assert_eq!(reread.shape(), original.shape());
    for (a, b) in reread.data().iter().zip(original.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let pgm = fs::read(dir.path().join("w_out.pgm")).unwrap();
    let header = b"P5\n4 5\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 5 * 4);
}

// ── Configuration precedence ─────────────────────────────────────────────

#[test]
fn config_file_flags_and_sets_apply_in_order() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "# comment line\nn_h = 4\nt = 9\n\ncell = rum\n").unwrap();
    // File sets n_h = 4; the flag raises it to 5; --set wins with 6.
    // t comes from the file alone.
    let out = rum(&[
        "params",
        "--config",
        cfg_path.to_str().unwrap(),
        "--n-h",
        "5",
        "--set",
        "n_h=6",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("T 9 N_h 6"), "precedence not honored: {text}");
}

#[test]
fn bad_keys_and_values_are_rejected() {
    let out = rum(&["params", "--set", "bogus=1"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("unknown config key 'bogus'"),
        "{}",
        stderr(&out)
    );

    let out = rum(&["params", "--task", "nosuch"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

// ── Resume ───────────────────────────────────────────────────────────────

#[test]
fn resume_rejects_configuration_flags() {
    let out = rum(&["train", "--resume", "/nonexistent.ckpt", "--t", "9"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("--t is not allowed"),
        "{}",
        stderr(&out)
    );

    let out = rum(&["train", "--resume", "/nonexistent.ckpt", "--set", "t=9"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--config/--set"), "{}", stderr(&out));
}

#[test]
fn cli_resume_matches_uninterrupted_run() {
    let full_dir = TempDir::new().unwrap();
    let cut_dir = TempDir::new().unwrap();

    // Reference: the same tiny run, end to end, through the CLI.
    assert_success(&run_tiny_train(full_dir.path()));

    // Interrupted run: stop at the first metrics record (iteration 2),
    // which leaves a mid-run checkpoint behind.
    let cfg = RunConfig {
        task: TaskKind::Copying,
        t: 4,
        n_h: 5,
        n_b: 4,
        n_symbols: 3,
        copy_len: 2,
        max_iters: 4,
        eval_every: 2,
        checkpoint_every: 2,
        seed: 9,
        out_dir: cut_dir.path().to_str().unwrap().to_string(),
        ..RunConfig::default()
    };
    let outcome = train_with_observer(&cfg, |_, _| ControlFlow::Break(())).unwrap();
    assert!(outcome.stopped_early);
    assert_eq!(outcome.final_iteration, 2);

    let ckpt = cut_dir.path().join("checkpoint.ckpt");
    let out = rum(&[
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--out-dir",
        cut_dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(stdout(&out).contains("done: 4 iterations"));

    // Interrupt + resume must be indistinguishable from never stopping.
    for file in ["metrics.csv", "checkpoint.ckpt"] {
        let a = fs::read(full_dir.path().join(file)).unwrap();
        let b = fs::read(cut_dir.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between full and resumed runs");
    }
}
