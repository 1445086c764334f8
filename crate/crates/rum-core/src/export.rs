//! Kernel export and diagnostics: exact-round-trip CSV, 8-bit grayscale
//! PGM heatmaps, and the diagonal-dominance ratio.
//!
//! Exports only read checkpoints; they never modify them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{self, Tensor, TensorError};

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum ExportError {
    Io(std::io::Error),
    Checkpoint(CheckpointError),
    Tensor(TensorError),
    MissingTensor {
        name: String,
        available: Vec<String>,
    },
    BadBounds {
        min: f64,
        max: f64,
    },
    NotMatrix {
        shape: Vec<usize>,
    },
    NotSquare {
        shape: Vec<usize>,
    },
    /// 1×1 matrices have no off-diagonal entries to compare with.
    NoOffDiagonal,
    BadCsv(String),
}

impl std::fmt::Display for ExportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExportError::Io(e) => write!(f, "export io error: {e}"),
            ExportError::Checkpoint(e) => write!(f, "{e}"),
            ExportError::Tensor(e) => write!(f, "{e}"),
            ExportError::MissingTensor { name, available } => {
                write!(
                    f,
                    "no tensor '{name}' in checkpoint (available: {})",
                    available.join(", ")
                )
            }
            ExportError::BadBounds { min, max } => {
                write!(f, "bounds must satisfy min < max, got [{min}, {max}]")
            }
            ExportError::NotMatrix { shape } => {
                write!(f, "expected a vector or matrix, got shape {shape:?}")
            }
            ExportError::NotSquare { shape } => {
                write!(f, "expected a square matrix, got {shape:?}")
            }
            ExportError::NoOffDiagonal => {
                write!(f, "diag_dominance needs at least a 2×2 matrix")
            }
            ExportError::BadCsv(msg) => write!(f, "bad csv: {msg}"),
        }
    }
}

impl std::error::Error for ExportError {}

impl From<std::io::Error> for ExportError {
    fn from(e: std::io::Error) -> Self {
        ExportError::Io(e)
    }
}

impl From<CheckpointError> for ExportError {
    fn from(e: CheckpointError) -> Self {
        ExportError::Checkpoint(e)
    }
}

impl From<TensorError> for ExportError {
    fn from(e: TensorError) -> Self {
        ExportError::Tensor(e)
    }
}

pub type Result<T> = std::result::Result<T, ExportError>;

// ── Float formatting ─────────────────────────────────────────────────────

/// Formats with 17 significant digits in the style of printf `%.17g`
/// (trailing zeros trimmed, scientific notation outside [1e-4, 1e17)).
/// 17 significant digits are always enough to reparse the exact f64.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x < 0.0 {
            "-inf".to_string()
        } else {
            "inf".to_string()
        };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".to_string()
        } else {
            "0".to_string()
        };
    }
    let sci = format!("{:.16e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:.16e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 17);
    let body = if !(-4..17).contains(&exp) {
        let frac = digits[1..].trim_end_matches('0');
        let m = if frac.is_empty() {
            digits[..1].to_string()
        } else {
            format!("{}.{frac}", &digits[..1])
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else if exp >= 0 {
        let split = (exp + 1) as usize;
        let frac = digits[split..].trim_end_matches('0');
        if frac.is_empty() {
            digits[..split].to_string()
        } else {
            format!("{}.{frac}", &digits[..split])
        }
    } else {
        let zeros = "0".repeat((-exp - 1) as usize);
        let all = format!("{zeros}{digits}");
        format!("0.{}", all.trim_end_matches('0'))
    };
    if x < 0.0 {
        format!("-{body}")
    } else {
        body
    }
}

// ── Matrix views ─────────────────────────────────────────────────────────

/// (rows, cols) treating a vector as a single row.
fn matrix_view(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        1 => Ok((1, t.len())),
        2 => Ok(t.dims2()),
        _ => Err(ExportError::NotMatrix {
            shape: t.shape().to_vec(),
        }),
    }
}

// ── CSV ──────────────────────────────────────────────────────────────────

/// Writes a vector/matrix as comma-separated `%.17g` values, one row per
/// line. Reparsing recovers every f64 bit-for-bit.
pub fn write_matrix_csv(t: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = matrix_view(t)?;
    let mut s = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            s.push_str(&format_g17(t.data()[r * cols + c]));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Parses a CSV written by [`write_matrix_csv`] back into a rank-2
/// tensor (accepts both `\n` and `\r\n` line endings).
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut n = 0usize;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| ExportError::BadCsv(format!("line {}: '{field}'", lineno + 1)))?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(ExportError::BadCsv(format!(
                    "line {} has {n} fields, expected {c}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| ExportError::BadCsv("empty file".to_string()))?;
    Ok(Tensor::new(&[rows, cols], data)?)
}

// ── PGM ──────────────────────────────────────────────────────────────────

/// Writes a binary PGM (P5, maxval 255) mapping [min, max] linearly to
/// [0, 255]; out-of-range values clamp. Pixel = ⌊255·(v − min)/(max −
/// min)⌋.
pub fn write_pgm(t: &Tensor, min: f64, max: f64, path: &Path) -> Result<()> {
    if min.is_nan() || max.is_nan() || min >= max {
        return Err(ExportError::BadBounds { min, max });
    }
    let (rows, cols) = matrix_view(t)?;
    let mut out = Vec::with_capacity(32 + rows * cols);
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    let scale = 255.0 / (max - min);
    for &v in t.data() {
        out.push(((v - min) * scale).floor().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Symmetric bounds (−m, m) around zero from the largest magnitude;
/// (−1, 1) for an all-zero tensor.
pub fn auto_symmetric_bounds(t: &Tensor) -> (f64, f64) {
    let m = t.data().iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if m == 0.0 {
        (-1.0, 1.0)
    } else {
        (-m, m)
    }
}

// ── Tensor selection ─────────────────────────────────────────────────────

/// Finds a tensor by name. A `name:half` suffix with `half` ∈ {u, tau}
/// selects the left/right column half of an even-column matrix — the
/// per-target kernels packed side by side in `W_hh` (and `W_xh`).
pub fn select_tensor(ckpt: &Checkpoint, name: &str) -> Result<Tensor> {
    let missing = |n: &str| ExportError::MissingTensor {
        name: n.to_string(),
        available: ckpt.tensor_names().iter().map(|s| s.to_string()).collect(),
    };
    match name.split_once(':') {
        None => ckpt.tensor(name).cloned().ok_or_else(|| missing(name)),
        Some((base, half)) => {
            let t = ckpt.tensor(base).ok_or_else(|| missing(base))?;
            if t.rank() != 2 {
                return Err(ExportError::NotMatrix {
                    shape: t.shape().to_vec(),
                });
            }
            let (_, cols) = t.dims2();
            if cols % 2 != 0 {
                return Err(ExportError::BadCsv(format!(
                    "cannot halve '{base}' with odd column count {cols}"
                )));
            }
            match half {
                "u" => Ok(tensor::slice_cols(t, 0, cols / 2)?),
                "tau" => Ok(tensor::slice_cols(t, cols / 2, cols)?),
                other => Err(ExportError::MissingTensor {
                    name: format!("{base}:{other} (halves are :u and :tau)"),
                    available: ckpt.tensor_names().iter().map(|s| s.to_string()).collect(),
                }),
            }
        }
    }
}

// ── Heatmap export ───────────────────────────────────────────────────────

/// What to export and where.
#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    pub checkpoint: PathBuf,
    pub tensor: String,
    /// `None` → auto-symmetric bounds around zero.
    pub bounds: Option<(f64, f64)>,
    pub csv_out: PathBuf,
    pub pgm_out: PathBuf,
}

/// Writes the named tensor as CSV plus PGM heatmap. Returns the bounds
/// actually used for the pixel mapping.
pub fn export_heatmap(spec: &HeatmapSpec) -> Result<(f64, f64)> {
    let ckpt = Checkpoint::load(&spec.checkpoint)?;
    let t = select_tensor(&ckpt, &spec.tensor)?;
    let (min, max) = match spec.bounds {
        Some(b) => b,
        None => auto_symmetric_bounds(&t),
    };
    write_matrix_csv(&t, &spec.csv_out)?;
    write_pgm(&t, min, max, &spec.pgm_out)?;
    Ok((min, max))
}

// ── Diagonal dominance ───────────────────────────────────────────────────

/// mean(|diag|)/mean(|off-diag|); `Unbounded` when the off-diagonal mean
/// is exactly zero (e.g. the identity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiagDominance {
    Ratio(f64),
    Unbounded,
}

impl std::fmt::Display for DiagDominance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiagDominance::Ratio(r) => write!(f, "{r:.6}"),
            DiagDominance::Unbounded => f.write_str("unbounded"),
        }
    }
}

pub fn diag_dominance(t: &Tensor) -> Result<DiagDominance> {
    if t.rank() != 2 {
        return Err(ExportError::NotMatrix {
            shape: t.shape().to_vec(),
        });
    }
    let (rows, cols) = t.dims2();
    if rows != cols {
        return Err(ExportError::NotSquare {
            shape: t.shape().to_vec(),
        });
    }
    if rows < 2 {
        return Err(ExportError::NoOffDiagonal);
    }
    let n = rows;
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = t.data()[i * n + j].abs();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let mean_diag = diag / n as f64;
    let mean_off = off / (n * n - n) as f64;
    if mean_off == 0.0 {
        Ok(DiagDominance::Unbounded)
    } else {
        Ok(DiagDominance::Ratio(mean_diag / mean_off))
    }
}
