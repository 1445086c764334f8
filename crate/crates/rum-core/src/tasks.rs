//! Synthetic memory benchmarks: the Copying Memory task and the
//! Associative Recall task, plus their analytic chance baselines.
//!
//! Generators are pure functions of their parameters and the rng state;
//! identical seeds give identical batches.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Which benchmark a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copying,
    Recall,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Copying => "copying",
            TaskKind::Recall => "recall",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copying" => Ok(TaskKind::Copying),
            "recall" => Ok(TaskKind::Recall),
            other => Err(format!(
                "unknown task '{other}' (expected copying or recall)"
            )),
        }
    }
}

/// One batch of token sequences. `inputs`, `targets`, and `mask` are
/// N_b×L row-major; the mask selects the positions where the loss (and
/// accuracy) is evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub n_b: usize,
    pub len: usize,
    pub vocab_in: usize,
    pub vocab_out: usize,
}

// ── Copying memory ───────────────────────────────────────────────────────

/// Copying Memory batch. Each sequence of length T + 2·copy_len is:
/// `copy_len` data symbols from {0..n−1}, then T−1 blanks, one marker,
/// and `copy_len` trailing blanks. Targets are blank everywhere except
/// the final `copy_len` positions, which repeat the data in order. The
/// loss covers every position (mask all true).
///
/// Input vocabulary: n data symbols + blank (id n) + marker (id n+1).
/// Output vocabulary: n data symbols + blank (id n).
pub fn gen_copying(
    n: usize,
    copy_len: usize,
    t: usize,
    n_b: usize,
    rng: &mut Rng,
) -> Result<TaskBatch> {
    if n < 1 || copy_len < 1 || t < 1 || n_b < 1 {
        return Err(TensorError::InvalidShape {
            detail: format!(
                "gen_copying(n={n}, copy_len={copy_len}, T={t}, N_b={n_b}): all must be ≥ 1"
            ),
        });
    }
    let len = t + 2 * copy_len;
    let blank = n;
    let marker = n + 1;
    let mut inputs = vec![blank; n_b * len];
    let mut targets = vec![blank; n_b * len];
    for row in 0..n_b {
        let base = row * len;
        for i in 0..copy_len {
            let sym = rng.below(n);
            inputs[base + i] = sym;
            targets[base + len - copy_len + i] = sym;
        }
        inputs[base + copy_len + t - 1] = marker;
    }
    Ok(TaskBatch {
        inputs,
        targets,
        mask: vec![true; n_b * len],
        n_b,
        len,
        vocab_in: n + 2,
        vocab_out: n + 1,
    })
}

/// Loss (nats per position) of the optimal memoryless predictor on the
/// copying task: it is certain of the blanks and uniform over the n data
/// symbols at the final copy_len positions, giving
/// copy_len·ln(n)/(T + 2·copy_len).
pub fn copying_baseline(n: usize, copy_len: usize, t: usize) -> f64 {
    copy_len as f64 * (n as f64).ln() / (t + 2 * copy_len) as f64
}

// ── Associative recall ───────────────────────────────────────────────────

/// Token layout for one recall sequence: T/2 (character, number) pairs,
/// the separator "??", and the key character; length T + 3.
///
/// Characters are ids 0..T/2−1 (each appears exactly once, a random
/// permutation), numbers are T/2 + digit for digit ∈ 0..9, and '?' is the
/// final vocabulary id T/2 + 10. Total vocabulary: T/2 + 10 + 1.
pub(crate) fn encode_recall_row(
    chars: &[usize],
    digits: &[usize],
    key_idx: usize,
    out_inputs: &mut [usize],
) {
    let n_char = chars.len();
    let question = n_char + 10;
    for i in 0..n_char {
        out_inputs[2 * i] = chars[i];
        out_inputs[2 * i + 1] = n_char + digits[i];
    }
    out_inputs[2 * n_char] = question;
    out_inputs[2 * n_char + 1] = question;
    out_inputs[2 * n_char + 2] = chars[key_idx];
}

/// Associative Recall batch; the single masked target (at the last
/// position) is the number token paired with the key character.
pub fn gen_recall(t: usize, n_b: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if t < 4 || !t.is_multiple_of(2) {
        return Err(TensorError::InvalidShape {
            detail: format!("gen_recall(T={t}): T must be even and ≥ 4"),
        });
    }
    if n_b < 1 {
        return Err(TensorError::InvalidShape {
            detail: "gen_recall: N_b must be ≥ 1".into(),
        });
    }
    let n_char = t / 2;
    let vocab = n_char + 10 + 1;
    let len = t + 3;
    let mut inputs = vec![0usize; n_b * len];
    let mut targets = vec![0usize; n_b * len];
    let mut mask = vec![false; n_b * len];
    let mut chars: Vec<usize> = (0..n_char).collect();
    for row in 0..n_b {
        let base = row * len;
        // Draw order per row: character permutation, then one digit per
        // pair, then the key position.
        for (i, c) in chars.iter_mut().enumerate() {
            *c = i;
        }
        rng.shuffle(&mut chars);
        let digits: Vec<usize> = (0..n_char).map(|_| rng.below(10)).collect();
        let key_idx = rng.below(n_char);
        encode_recall_row(&chars, &digits, key_idx, &mut inputs[base..base + len]);
        targets[base + len - 1] = n_char + digits[key_idx];
        mask[base + len - 1] = true;
    }
    Ok(TaskBatch {
        inputs,
        targets,
        mask,
        n_b,
        len,
        vocab_in: vocab,
        vocab_out: vocab,
    })
}

/// Chance accuracy on recall: numbers are uniform over 10.
pub fn recall_chance(_t: usize) -> f64 {
    0.1
}
