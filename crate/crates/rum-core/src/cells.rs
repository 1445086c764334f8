//! Recurrent cells: the rotational unit of memory (RUM) and the LSTM/GRU
//! baselines, with shared initialization, pure single-step functions, and
//! the tape unroll used for training.
//!
//! The RUM step, computed in order per batch row:
//!
//! ```text
//! (u′, τ) = x_t·W_xh + h_{t−1}·W_hh + b          (split into N_h halves)
//! u       = sigmoid(u′)
//! ε̃       = x_t·W̃_xh + b̃
//! R_t     = Rotation(ε̃, τ)            λ=0   (applied matrix-free)
//!         = R_{t−1}·Rotation(ε̃, τ)    λ=1   (accumulated, per batch row)
//! h̃       = ReLU(ε̃ + R_t·h_{t−1})
//! h′      = u ⊙ h_{t−1} + (1 − u) ⊙ h̃
//! h_t     = η·h′/‖h′‖ when η is enabled, else h′
//! ```
//!
//! The pure step functions and the tape unroll run the same kernels in
//! the same order, so their outputs agree to the last bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::rng::Rng;
use crate::rotation;
use crate::tasks::TaskBatch;
use crate::tensor::{self, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rum,
    Lstm,
    Gru,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Rum => "rum",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rum" => Ok(CellKind::Rum),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!(
                "unknown cell '{other}' (expected rum, lstm, or gru)"
            )),
        }
    }
}

/// Sizes and RUM hyper-parameters of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub n_x: usize,
    pub n_h: usize,
    /// Associative-memory power; 0 (fresh rotation each step) or 1
    /// (accumulated rotation). Ignored by the baselines.
    pub lambda: u32,
    /// Time-normalization target norm; `None` disables normalization.
    pub eta: Option<f64>,
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::InvalidShape { detail });
        if self.n_x < 1 || self.n_h < 1 {
            return bad(format!("N_x={} N_h={} must be ≥ 1", self.n_x, self.n_h));
        }
        if self.lambda > 1 {
            return bad(format!("lambda={} unsupported (0 or 1)", self.lambda));
        }
        if let Some(eta) = self.eta {
            if eta <= 0.0 || !eta.is_finite() {
                return bad(format!("eta={eta} must be positive and finite"));
            }
        }
        Ok(())
    }
}

// ── States ───────────────────────────────────────────────────────────────

/// RUM state: hidden rows plus (for λ=1) one rotation matrix per row.
#[derive(Debug, Clone)]
pub struct RumState {
    pub h: Tensor,
    /// N_b×N_h×N_h accumulated rotations; present iff λ=1.
    pub r: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Cell-agnostic state for evaluation loops.
#[derive(Debug, Clone)]
pub enum State {
    Rum(RumState),
    Lstm(LstmState),
    Gru(Tensor),
}

impl State {
    pub fn hidden(&self) -> &Tensor {
        match self {
            State::Rum(s) => &s.h,
            State::Lstm(s) => &s.h,
            State::Gru(h) => h,
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────────

/// A cell plus its output projection, held as named tensors in a fixed
/// order (the checkpoint directory order).
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: CellKind,
    pub config: CellConfig,
    /// Output vocabulary (logit dimension).
    pub n_out: usize,
    params: Vec<(String, Tensor)>,
}

/// Per-kind parameter names, in initialization/checkpoint order.
pub fn param_names(kind: CellKind) -> &'static [&'static str] {
    match kind {
        CellKind::Rum => &[
            "W_xh",
            "W_hh",
            "b",
            "W_xh_tilde",
            "b_tilde",
            "W_out",
            "b_out",
        ],
        CellKind::Lstm => &["W_x", "W_h", "b", "W_out", "b_out"],
        CellKind::Gru => &["W_x", "W_h_zr", "W_h_c", "b", "W_out", "b_out"],
    }
}

fn param_shape(kind: CellKind, cfg: &CellConfig, n_out: usize, name: &str) -> Vec<usize> {
    let (nx, nh) = (cfg.n_x, cfg.n_h);
    match (kind, name) {
        (CellKind::Rum, "W_xh") => vec![nx, 2 * nh],
        (CellKind::Rum, "W_hh") => vec![nh, 2 * nh],
        (CellKind::Rum, "b") => vec![2 * nh],
        (CellKind::Rum, "W_xh_tilde") => vec![nx, nh],
        (CellKind::Rum, "b_tilde") => vec![nh],
        (CellKind::Lstm, "W_x") => vec![nx, 4 * nh],
        (CellKind::Lstm, "W_h") => vec![nh, 4 * nh],
        (CellKind::Lstm, "b") => vec![4 * nh],
        (CellKind::Gru, "W_x") => vec![nx, 3 * nh],
        (CellKind::Gru, "W_h_zr") => vec![nh, 2 * nh],
        (CellKind::Gru, "W_h_c") => vec![nh, nh],
        (CellKind::Gru, "b") => vec![3 * nh],
        (_, "W_out") => vec![nh, n_out],
        (_, "b_out") => vec![n_out],
        _ => unreachable!("unknown parameter {name}"),
    }
}

/// Total trainable scalars for a cell of the given sizes, including the
/// output projection — the sum over the checkpoint tensor directory.
pub fn count_params(kind: CellKind, cfg: &CellConfig, n_out: usize) -> usize {
    param_names(kind)
        .iter()
        .map(|name| {
            param_shape(kind, cfg, n_out, name)
                .iter()
                .product::<usize>()
        })
        .sum()
}

impl Model {
    /// Initializes all parameters, consuming the rng in the declared
    /// parameter order: recurrent kernels get orthonormal rows
    /// (Gram–Schmidt over a Gaussian draw), other kernels Glorot-uniform,
    /// biases zero except the LSTM forget-gate slice (+1).
    pub fn new(kind: CellKind, config: CellConfig, n_out: usize, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        if n_out < 1 {
            return Err(TensorError::InvalidShape {
                detail: "n_out must be ≥ 1".into(),
            });
        }
        let mut params = Vec::new();
        for &name in param_names(kind) {
            let shape = param_shape(kind, &config, n_out, name);
            let t = match (kind, name) {
                (CellKind::Rum, "W_hh")
                | (CellKind::Lstm, "W_h")
                | (CellKind::Gru, "W_h_zr")
                | (CellKind::Gru, "W_h_c") => orthonormal_rows(rng, shape[0], shape[1]),
                (CellKind::Lstm, "b") => {
                    let nh = config.n_h;
                    let mut b = Tensor::zeros(&shape);
                    // Gate order (i, f, g, o): forget slice starts at N_h.
                    for v in &mut b.data_mut()[nh..2 * nh] {
                        *v = 1.0;
                    }
                    b
                }
                (_, name) if name.starts_with('b') => Tensor::zeros(&shape),
                _ => glorot_uniform(rng, &shape),
            };
            params.push((name.to_string(), t));
        }
        Ok(Model {
            kind,
            config,
            n_out,
            params,
        })
    }

    /// Rebuilds a model from checkpointed tensors (names and shapes are
    /// validated against the configuration).
    pub fn from_params(
        kind: CellKind,
        config: CellConfig,
        n_out: usize,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Model> {
        config.validate()?;
        let names = param_names(kind);
        if tensors.len() != names.len() {
            return Err(TensorError::InvalidShape {
                detail: format!(
                    "expected {} parameter tensors, got {}",
                    names.len(),
                    tensors.len()
                ),
            });
        }
        for ((got_name, t), &want_name) in tensors.iter().zip(names) {
            let want_shape = param_shape(kind, &config, n_out, want_name);
            if got_name != want_name || t.shape() != want_shape.as_slice() {
                return Err(TensorError::InvalidShape {
                    detail: format!(
                        "parameter {got_name} {:?}, expected {want_name} {want_shape:?}",
                        t.shape()
                    ),
                });
            }
        }
        Ok(Model {
            kind,
            config,
            n_out,
            params: tensors,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .expect("parameter name")
            .1
    }

    /// Total trainable scalar count (cell + output projection).
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero hidden state (and identity rotation memories for λ=1 RUM).
    pub fn init_state(&self, n_b: usize) -> State {
        let nh = self.config.n_h;
        let h = Tensor::zeros(&[n_b, nh]);
        match self.kind {
            CellKind::Rum => {
                let r = (self.config.lambda == 1).then(|| identity_batch(n_b, nh));
                State::Rum(RumState { h, r })
            }
            CellKind::Lstm => State::Lstm(LstmState {
                c: Tensor::zeros(&[n_b, nh]),
                h,
            }),
            CellKind::Gru => State::Gru(h),
        }
    }

    /// One step of whichever cell this model holds.
    pub fn step(&self, state: &State, x_t: &Tensor) -> Result<State> {
        match (self.kind, state) {
            (CellKind::Rum, State::Rum(s)) => Ok(State::Rum(self.rum_step(s, x_t)?)),
            (CellKind::Lstm, State::Lstm(s)) => Ok(State::Lstm(self.lstm_step(s, x_t)?)),
            (CellKind::Gru, State::Gru(h)) => Ok(State::Gru(self.gru_step(h, x_t)?)),
            _ => Err(TensorError::ShapeMismatch {
                op: "step",
                detail: "state kind does not match cell kind".into(),
            }),
        }
    }

    /// Pure RUM step (no tape). Mirrors the tape unroll operation by
    /// operation so both paths produce identical values.
    pub fn rum_step(&self, state: &RumState, x_t: &Tensor) -> Result<RumState> {
        let nh = self.config.n_h;
        let xw = tensor::matmul(x_t, self.param("W_xh"))?;
        let hw = tensor::matmul(&state.h, self.param("W_hh"))?;
        let pre = tensor::add_row(&tensor::add(&xw, &hw)?, self.param("b"))?;
        let u_pre = tensor::slice_cols(&pre, 0, nh)?;
        let tau = tensor::slice_cols(&pre, nh, 2 * nh)?;
        let u = tensor::sigmoid(&u_pre)?;
        let eps = tensor::add_row(
            &tensor::matmul(x_t, self.param("W_xh_tilde"))?,
            self.param("b_tilde"),
        )?;
        let (n_b, _) = state.h.dims2();
        let (rh, r_new) = if self.config.lambda == 0 {
            let mut rh = state.h.clone();
            for r in 0..n_b {
                let p = rotation::plan(eps.row(r), tau.row(r))?;
                rotation::rotate_in_place(&p, rh.row_mut(r));
            }
            rh.ensure_finite("rum_step")?;
            (rh, None)
        } else {
            let r_prev = state.r.as_ref().expect("λ=1 state carries R");
            let mut r_new = Tensor::zeros(&[n_b, nh, nh]);
            for r in 0..n_b {
                let p = rotation::plan(eps.row(r), tau.row(r))?;
                rotation::compose_right_slab(r_prev.slab(r), &p, r_new.slab_mut(r), nh);
            }
            r_new.ensure_finite("rum_step")?;
            let mut rh = Tensor::zeros(&[n_b, nh]);
            for r in 0..n_b {
                rotation::matvec(
                    r_new.slab(r),
                    nh,
                    state.h.row(r),
                    &mut rh.data_mut()[r * nh..(r + 1) * nh],
                );
            }
            rh.ensure_finite("rum_step")?;
            (rh, Some(r_new))
        };
        let htilde = tensor::relu(&tensor::add(&eps, &rh)?)?;
        let gated_old = tensor::mul(&u, &state.h)?;
        let gated_new = tensor::mul(&tensor::one_minus(&u)?, &htilde)?;
        let h_prime = tensor::add(&gated_old, &gated_new)?;
        let h = match self.config.eta {
            Some(eta) => {
                let out = tensor::row_normalize(&h_prime, eta);
                out.ensure_finite("time_normalize")?;
                out
            }
            None => h_prime,
        };
        Ok(RumState { h, r: r_new })
    }

    /// Canonical LSTM step, gate order (i, f, g, o).
    pub fn lstm_step(&self, state: &LstmState, x_t: &Tensor) -> Result<LstmState> {
        let nh = self.config.n_h;
        let xw = tensor::matmul(x_t, self.param("W_x"))?;
        let hw = tensor::matmul(&state.h, self.param("W_h"))?;
        let pre = tensor::add_row(&tensor::add(&xw, &hw)?, self.param("b"))?;
        let i = tensor::sigmoid(&tensor::slice_cols(&pre, 0, nh)?)?;
        let f = tensor::sigmoid(&tensor::slice_cols(&pre, nh, 2 * nh)?)?;
        let g = tensor::tanh(&tensor::slice_cols(&pre, 2 * nh, 3 * nh)?)?;
        let o = tensor::sigmoid(&tensor::slice_cols(&pre, 3 * nh, 4 * nh)?)?;
        let c = tensor::add(&tensor::mul(&f, &state.c)?, &tensor::mul(&i, &g)?)?;
        let h = tensor::mul(&o, &tensor::tanh(&c)?)?;
        Ok(LstmState { h, c })
    }

    /// Canonical GRU step: z (update) and r (reset) gates, candidate via
    /// the reset-gated hidden state; h_t = z⊙h_{t−1} + (1−z)⊙h̃.
    pub fn gru_step(&self, h_prev: &Tensor, x_t: &Tensor) -> Result<Tensor> {
        let nh = self.config.n_h;
        let xw = tensor::add_row(&tensor::matmul(x_t, self.param("W_x"))?, self.param("b"))?;
        let x_zr = tensor::slice_cols(&xw, 0, 2 * nh)?;
        let x_c = tensor::slice_cols(&xw, 2 * nh, 3 * nh)?;
        let h_zr = tensor::matmul(h_prev, self.param("W_h_zr"))?;
        let zr = tensor::sigmoid(&tensor::add(&x_zr, &h_zr)?)?;
        let z = tensor::slice_cols(&zr, 0, nh)?;
        let r = tensor::slice_cols(&zr, nh, 2 * nh)?;
        let rh = tensor::mul(&r, h_prev)?;
        let c = tensor::tanh(&tensor::add(
            &x_c,
            &tensor::matmul(&rh, self.param("W_h_c"))?,
        )?)?;
        let keep = tensor::mul(&z, h_prev)?;
        let update = tensor::mul(&tensor::one_minus(&z)?, &c)?;
        tensor::add(&keep, &update)
    }
}

/// Rescales every row of `h` to norm `eta` (rows under 1e-12 pass
/// through unchanged).
pub fn time_normalize(h: &Tensor, eta: f64) -> Result<Tensor> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(TensorError::InvalidShape {
            detail: format!("eta={eta} must be positive"),
        });
    }
    let out = tensor::row_normalize(h, eta);
    out.ensure_finite("time_normalize")?;
    Ok(out)
}

/// RUM cell parameter count from the closed form
/// 2·N_x·N_h + 2·N_h² + 2·N_h + N_x·N_h + N_h (output projection not
/// included).
pub fn rum_cell_param_formula(n_x: usize, n_h: usize) -> usize {
    2 * n_x * n_h + 2 * n_h * n_h + 2 * n_h + n_x * n_h + n_h
}

// ── Initialization helpers ───────────────────────────────────────────────

/// Glorot/Xavier uniform: U(−a, a) with a = √(6/(fan_in + fan_out)),
/// fan_in/fan_out taken from a rank-2 shape (rank-1 treated as a row).
fn glorot_uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("parameters are rank ≤ 2"),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.rand_tensor(shape, -a, a)
}

/// Rows of a seeded Gaussian draw, orthonormalized by modified
/// Gram–Schmidt (requires rows ≤ cols, which all recurrent kernels
/// satisfy). The full Gaussian matrix is drawn first so rng consumption
/// is independent of the orthonormalization.
fn orthonormal_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    debug_assert!(rows <= cols);
    let mut m = rng.normal_tensor(&[rows, cols]);
    for i in 0..rows {
        for j in 0..i {
            let proj = tensor::dot_slice(m.row(i), m.row(j));
            let (ri, rj) = (i * cols, j * cols);
            for k in 0..cols {
                m.data_mut()[ri + k] -= proj * m.data()[rj + k];
            }
        }
        let norm = tensor::l2norm_slice(m.row(i));
        assert!(norm > 1e-9, "degenerate Gaussian draw in orthonormal init");
        for v in &mut m.data_mut()[i * cols..(i + 1) * cols] {
            *v /= norm;
        }
    }
    m
}

fn identity_batch(n_b: usize, n: usize) -> Tensor {
    let mut r = Tensor::zeros(&[n_b, n, n]);
    for k in 0..n_b {
        for i in 0..n {
            r.slab_mut(k)[i * n + i] = 1.0;
        }
    }
    r
}

/// One-hot encoding of a token column, N_b×V.
pub fn one_hot(tokens: &[usize], vocab: usize) -> Result<Tensor> {
    let mut x = Tensor::zeros(&[tokens.len(), vocab]);
    for (r, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(TensorError::BadTarget {
                op: "one_hot",
                index: t,
                vocab,
            });
        }
        x.data_mut()[r * vocab + t] = 1.0;
    }
    Ok(x)
}

// ── Tape unroll ──────────────────────────────────────────────────────────

/// Node ids of interest from a full-sequence build.
#[derive(Debug)]
pub struct SequenceGraph {
    /// One id per model parameter, in parameter order.
    pub param_ids: Vec<NodeId>,
    /// Per-step logits (N_b×V), length L.
    pub step_logits: Vec<NodeId>,
    pub final_h: NodeId,
    /// Final accumulated rotation (λ=1 RUM only).
    pub final_r: Option<NodeId>,
    /// Mean cross-entropy over all masked positions, in nats.
    pub loss: NodeId,
    pub masked_count: usize,
}

/// Unrolls the model over a token batch on `tape` and attaches the
/// masked softmax cross-entropy loss. Inputs are one-hot (embedding rows
/// of the input kernels are selected directly).
pub fn build_sequence_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &TaskBatch,
) -> Result<SequenceGraph> {
    let (n_b, len) = (batch.n_b, batch.len);
    let nh = model.config.n_h;
    let param_ids: Vec<NodeId> = model
        .params()
        .iter()
        .map(|(_, t)| tape.input(t.clone()))
        .collect();
    let pid = |name: &str| {
        let idx = param_names(model.kind)
            .iter()
            .position(|&n| n == name)
            .expect("param");
        param_ids[idx]
    };
    let w_out = pid("W_out");
    let b_out = pid("b_out");

    let mut h = tape.input(Tensor::zeros(&[n_b, nh]));
    let mut r = match (model.kind, model.config.lambda) {
        (CellKind::Rum, 1) => Some(tape.input(identity_batch(n_b, nh))),
        _ => None,
    };
    let mut c = match model.kind {
        CellKind::Lstm => Some(tape.input(Tensor::zeros(&[n_b, nh]))),
        _ => None,
    };

    let mut step_logits = Vec::with_capacity(len);
    let mut loss_sum: Option<NodeId> = None;
    let mut masked_count = 0usize;
    for t in 0..len {
        let tokens: Vec<usize> = (0..n_b).map(|row| batch.inputs[row * len + t]).collect();
        match model.kind {
            CellKind::Rum => {
                let xw = tape.embed(pid("W_xh"), tokens.clone())?;
                let hw = tape.matmul(h, pid("W_hh"))?;
                let lin = tape.add(xw, hw)?;
                let pre = tape.add_row(lin, pid("b"))?;
                let u_pre = tape.slice_cols(pre, 0, nh)?;
                let tau = tape.slice_cols(pre, nh, 2 * nh)?;
                let u = tape.sigmoid(u_pre)?;
                let emb = tape.embed(pid("W_xh_tilde"), tokens)?;
                let eps = tape.add_row(emb, pid("b_tilde"))?;
                let rh = match r {
                    None => tape.rotate_gate(eps, tau, h)?,
                    Some(r_prev) => {
                        let r_new = tape.compose_rot(r_prev, eps, tau)?;
                        r = Some(r_new);
                        tape.batch_matvec(r_new, h)?
                    }
                };
                let cand_pre = tape.add(eps, rh)?;
                let htilde = tape.relu(cand_pre)?;
                let keep = tape.mul(u, h)?;
                let inv_u = tape.one_minus(u)?;
                let update = tape.mul(inv_u, htilde)?;
                let h_prime = tape.add(keep, update)?;
                h = match model.config.eta {
                    Some(eta) => tape.time_normalize(h_prime, eta)?,
                    None => h_prime,
                };
            }
            CellKind::Lstm => {
                let xw = tape.embed(pid("W_x"), tokens)?;
                let hw = tape.matmul(h, pid("W_h"))?;
                let lin = tape.add(xw, hw)?;
                let pre = tape.add_row(lin, pid("b"))?;
                let i_pre = tape.slice_cols(pre, 0, nh)?;
                let f_pre = tape.slice_cols(pre, nh, 2 * nh)?;
                let g_pre = tape.slice_cols(pre, 2 * nh, 3 * nh)?;
                let o_pre = tape.slice_cols(pre, 3 * nh, 4 * nh)?;
                let i = tape.sigmoid(i_pre)?;
                let f = tape.sigmoid(f_pre)?;
                let g = tape.tanh(g_pre)?;
                let o = tape.sigmoid(o_pre)?;
                let c_prev = c.expect("LSTM carries c");
                let fc = tape.mul(f, c_prev)?;
                let ig = tape.mul(i, g)?;
                let c_new = tape.add(fc, ig)?;
                c = Some(c_new);
                let tc = tape.tanh(c_new)?;
                h = tape.mul(o, tc)?;
            }
            CellKind::Gru => {
                let emb = tape.embed(pid("W_x"), tokens)?;
                let xw = tape.add_row(emb, pid("b"))?;
                let x_zr = tape.slice_cols(xw, 0, 2 * nh)?;
                let x_c = tape.slice_cols(xw, 2 * nh, 3 * nh)?;
                let h_zr = tape.matmul(h, pid("W_h_zr"))?;
                let zr_pre = tape.add(x_zr, h_zr)?;
                let zr = tape.sigmoid(zr_pre)?;
                let z = tape.slice_cols(zr, 0, nh)?;
                let rg = tape.slice_cols(zr, nh, 2 * nh)?;
                let rh = tape.mul(rg, h)?;
                let rhw = tape.matmul(rh, pid("W_h_c"))?;
                let c_pre = tape.add(x_c, rhw)?;
                let cand = tape.tanh(c_pre)?;
                let keep = tape.mul(z, h)?;
                let inv_z = tape.one_minus(z)?;
                let update = tape.mul(inv_z, cand)?;
                h = tape.add(keep, update)?;
            }
        }
        let proj = tape.matmul(h, w_out)?;
        let logits = tape.add_row(proj, b_out)?;
        step_logits.push(logits);

        let step_mask: Vec<bool> = (0..n_b).map(|row| batch.mask[row * len + t]).collect();
        let active = step_mask.iter().filter(|&&m| m).count();
        if active > 0 {
            let step_targets: Vec<usize> =
                (0..n_b).map(|row| batch.targets[row * len + t]).collect();
            let l = tape.softmax_xent(logits, step_targets, step_mask)?;
            loss_sum = Some(match loss_sum {
                None => l,
                Some(prev) => tape.add(prev, l)?,
            });
            masked_count += active;
        }
    }
    let loss_sum = loss_sum.ok_or(TensorError::EmptyMask {
        op: "build_sequence_loss",
    })?;
    let loss = tape.scale(loss_sum, 1.0 / masked_count as f64)?;
    Ok(SequenceGraph {
        param_ids,
        step_logits,
        final_h: h,
        final_r: r,
        loss,
        masked_count,
    })
}
