//! The rotation operator R(a, b): the orthogonal matrix rotating by the
//! angle between a and b inside span(a, b) and fixing the orthogonal
//! complement.
//!
//! A [`RotationPlan`] holds the Gram–Schmidt pair (u_a, u_b) and angle θ.
//! Applying the rotation never needs the dense matrix: `rotate` runs in
//! O(N) per vector and `compose_right` updates an accumulated rotation in
//! O(N²) via the rank-2 structure. `dense_matrix` exists as the reference
//! oracle.

use crate::tensor::{self, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Norm / collinearity threshold below which a pair is degenerate.
pub const EPS_DEGENERATE: f64 = 1e-12;

/// Cosines are clamped to ±(1 − 1e-12) before arccos, keeping the
/// derivative finite. Tests stay outside the clamped band.
pub const COS_CLAMP: f64 = 1.0 - 1e-12;

/// Orthonormal pair and angle defining one rotation.
///
/// When `degenerate` is set (either input near zero, or the pair
/// collinear) the rotation is the identity: `u_a`/`u_b` are zero and
/// θ = 0.
#[derive(Debug, Clone)]
pub struct RotationPlan {
    pub u_a: Vec<f64>,
    pub u_b: Vec<f64>,
    /// Radians in [0, π].
    pub theta: f64,
    pub degenerate: bool,
    pub(crate) cos_theta: f64,
    pub(crate) sin_theta: f64,
    /// True when the raw cosine fell outside ±COS_CLAMP; the backward
    /// pass treats θ as locally constant in that band.
    pub(crate) clamped: bool,
    pub(crate) norm_a: f64,
    pub(crate) norm_b: f64,
    /// u_a · b, the component of b along u_a.
    pub(crate) proj: f64,
    /// ‖b − (u_a·b)·u_a‖, the norm Gram–Schmidt divides by.
    pub(crate) norm_w: f64,
}

impl RotationPlan {
    pub fn dim(&self) -> usize {
        self.u_a.len()
    }

    fn identity(dim: usize) -> Self {
        RotationPlan {
            u_a: vec![0.0; dim],
            u_b: vec![0.0; dim],
            theta: 0.0,
            degenerate: true,
            cos_theta: 1.0,
            sin_theta: 0.0,
            clamped: false,
            norm_a: 0.0,
            norm_b: 0.0,
            proj: 0.0,
            norm_w: 0.0,
        }
    }
}

/// Ortho-normalizes (a, b) into a plan: u_a = a/‖a‖, u_b the normalized
/// rejection of b from u_a, θ = arccos of the clamped cosine between a
/// and b. Degenerate inputs (near-zero norm or collinear) produce an
/// identity plan.
pub fn plan(a: &[f64], b: &[f64]) -> Result<RotationPlan> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "rotation::plan",
            detail: format!("dims {} vs {} (need equal, ≥ 2)", a.len(), b.len()),
        });
    }
    let n = a.len();
    let norm_a = tensor::l2norm_slice(a);
    let norm_b = tensor::l2norm_slice(b);
    if norm_a < EPS_DEGENERATE || norm_b < EPS_DEGENERATE {
        return Ok(RotationPlan::identity(n));
    }
    let u_a: Vec<f64> = a.iter().map(|&x| x / norm_a).collect();
    let proj = tensor::dot_slice(&u_a, b);
    let w: Vec<f64> = b
        .iter()
        .zip(&u_a)
        .map(|(&bi, &ui)| bi - proj * ui)
        .collect();
    let norm_w = tensor::l2norm_slice(&w);
    if norm_w < EPS_DEGENERATE {
        return Ok(RotationPlan::identity(n));
    }
    let u_b: Vec<f64> = w.iter().map(|&x| x / norm_w).collect();
    let cos_raw = tensor::dot_slice(a, b) / (norm_a * norm_b);
    let clamped = cos_raw.abs() > COS_CLAMP;
    let cos = cos_raw.clamp(-COS_CLAMP, COS_CLAMP);
    let theta = cos.acos();
    Ok(RotationPlan {
        u_a,
        u_b,
        theta,
        degenerate: false,
        cos_theta: cos,
        sin_theta: theta.sin(),
        clamped,
        norm_a,
        norm_b,
        proj,
        norm_w,
    })
}

/// The dense N×N rotation matrix:
/// R = I + (cosθ − 1)(u_a⊗u_a + u_b⊗u_b) + sinθ(u_b⊗u_a − u_a⊗u_b).
/// Reference oracle; the hot paths never materialize this for λ=0.
pub fn dense_matrix(p: &RotationPlan) -> Tensor {
    let n = p.dim();
    if p.degenerate {
        return Tensor::eye(n);
    }
    let (c1, s) = (p.cos_theta - 1.0, p.sin_theta);
    let (ua, ub) = (&p.u_a, &p.u_b);
    let mut out = Tensor::zeros(&[n, n]);
    let data = out.data_mut();
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            data[i * n + j] =
                delta + c1 * (ua[i] * ua[j] + ub[i] * ub[j]) + s * (ub[i] * ua[j] - ua[i] * ub[j]);
        }
    }
    out
}

/// y = R·h without materializing R: only the span(u_a, u_b) component of
/// h moves. O(N) time and memory.
pub fn rotate(p: &RotationPlan, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != p.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "rotation::rotate",
            detail: format!("h dim {} vs plan dim {}", h.len(), p.dim()),
        });
    }
    let mut out = h.to_vec();
    rotate_in_place(p, &mut out);
    Ok(out)
}

/// Applies one plan to every row of an N_b×N batch.
pub fn rotate_batch(p: &RotationPlan, h: &Tensor) -> Result<Tensor> {
    let (rows, n) = h.dims2();
    if n != p.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "rotation::rotate_batch",
            detail: format!("h cols {} vs plan dim {}", n, p.dim()),
        });
    }
    let mut out = h.clone();
    for r in 0..rows {
        rotate_in_place(p, out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn rotate_in_place(p: &RotationPlan, h: &mut [f64]) {
    if p.degenerate {
        return;
    }
    let alpha = tensor::dot_slice(&p.u_a, h);
    let beta = tensor::dot_slice(&p.u_b, h);
    let c1 = p.cos_theta - 1.0;
    let s = p.sin_theta;
    let ca = c1 * alpha - s * beta;
    let cb = s * alpha + c1 * beta;
    for ((hi, &ua), &ub) in h.iter_mut().zip(&p.u_a).zip(&p.u_b) {
        *hi += ca * ua + cb * ub;
    }
}

/// R_prev · R(plan), computed through the rank-2 structure in O(N²):
/// with v_a = R_prev·u_a and v_b = R_prev·u_b,
/// R_new = R_prev + (cosθ − 1)(v_a⊗u_a + v_b⊗u_b) + sinθ(v_b⊗u_a − v_a⊗u_b).
pub fn compose_right(r_prev: &Tensor, p: &RotationPlan) -> Result<Tensor> {
    let (n, m) = r_prev.dims2();
    if n != m || n != p.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "rotation::compose_right",
            detail: format!("R {n}×{m} vs plan dim {}", p.dim()),
        });
    }
    let mut out = Tensor::zeros(&[n, n]);
    compose_right_slab(r_prev.data(), p, out.data_mut(), n);
    out.ensure_finite("compose_right")?;
    Ok(out)
}

/// Slice form of [`compose_right`] for rank-3 batched memories.
pub(crate) fn compose_right_slab(r_prev: &[f64], p: &RotationPlan, out: &mut [f64], n: usize) {
    if p.degenerate {
        out.copy_from_slice(r_prev);
        return;
    }
    let mut va = vec![0.0; n];
    let mut vb = vec![0.0; n];
    matvec(r_prev, n, &p.u_a, &mut va);
    matvec(r_prev, n, &p.u_b, &mut vb);
    let (c1, s) = (p.cos_theta - 1.0, p.sin_theta);
    let (ua, ub) = (&p.u_a, &p.u_b);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = r_prev[i * n + j]
                + c1 * (va[i] * ua[j] + vb[i] * ub[j])
                + s * (vb[i] * ua[j] - va[i] * ub[j]);
        }
    }
}

/// y = R·x for a row-major N×N slab; ascending-j accumulation.
pub(crate) fn matvec(r: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let row = &r[i * n..(i + 1) * n];
        let mut s = 0.0;
        for (&rv, &xv) in row.iter().zip(x) {
            s += rv * xv;
        }
        y[i] = s;
    }
}

/// y = Rᵀ·x; ascending-i accumulation per output element.
pub(crate) fn matvec_t(r: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    y.fill(0.0);
    for i in 0..n {
        let row = &r[i * n..(i + 1) * n];
        let xi = x[i];
        for (yv, &rv) in y.iter_mut().zip(row) {
            *yv += rv * xi;
        }
    }
}

// ── Backward passes ──────────────────────────────────────────────────────
//
// The autodiff layer treats plan+rotate (and plan+compose) as fused
// primitives; the chain rules below were derived by hand and are pinned
// against finite differences in the test suites. All functions accumulate
// (+=) into their output slices. Degenerate plans are identity maps:
// gradients flow through h (or R_prev) unchanged and (a, b) receive zero.

/// Pulls gradients of y = rotate(plan(a,b), h) back onto h and, via the
/// intermediate (u_a, u_b, θ) quantities, onto a and b.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rotate_vjp(
    p: &RotationPlan,
    a: &[f64],
    b: &[f64],
    h: &[f64],
    y_bar: &[f64],
    a_bar: &mut [f64],
    b_bar: &mut [f64],
    h_bar: &mut [f64],
) {
    if p.degenerate {
        for (hb, &g) in h_bar.iter_mut().zip(y_bar) {
            *hb += g;
        }
        return;
    }
    let (ua, ub) = (&p.u_a, &p.u_b);
    let (c1, s) = (p.cos_theta - 1.0, p.sin_theta);
    let alpha = tensor::dot_slice(ua, h);
    let beta = tensor::dot_slice(ub, h);
    let ga = tensor::dot_slice(ua, y_bar);
    let gb = tensor::dot_slice(ub, y_bar);
    // h̄ = Rᵀ·ȳ, using the same rank-2 structure as the forward map.
    let ka = c1 * ga + s * gb;
    let kb = c1 * gb - s * ga;
    for (((hb, &g), &uav), &ubv) in h_bar.iter_mut().zip(y_bar).zip(ua).zip(ub) {
        *hb += g + ka * uav + kb * ubv;
    }
    // Gradients w.r.t. the plan quantities (u_a, u_b, θ) treated as free.
    let pa = c1 * alpha - s * beta; // coefficient of u_a in the forward
    let qb = s * alpha + c1 * beta; // coefficient of u_b in the forward
    let n = h.len();
    let mut g_ua = vec![0.0; n];
    let mut g_ub = vec![0.0; n];
    for i in 0..n {
        g_ua[i] = pa * y_bar[i] + ka * h[i];
        g_ub[i] = qb * y_bar[i] + kb * h[i];
    }
    let g_theta = ga * (-p.sin_theta * alpha - p.cos_theta * beta)
        + gb * (p.cos_theta * alpha - p.sin_theta * beta);
    plan_vjp(p, a, b, &g_ua, &g_ub, g_theta, a_bar, b_bar);
}

/// Pulls gradients of R_new = compose_right(R_prev, plan(a,b)) back onto
/// R_prev, a, and b; `g` is ∂loss/∂R_new. O(N²), no dense Jacobian.
#[allow(clippy::too_many_arguments)]
pub(crate) fn compose_vjp(
    p: &RotationPlan,
    a: &[f64],
    b: &[f64],
    r_prev: &[f64],
    g: &[f64],
    n: usize,
    a_bar: &mut [f64],
    b_bar: &mut [f64],
    r_prev_bar: &mut [f64],
) {
    if p.degenerate {
        for (rb, &gv) in r_prev_bar.iter_mut().zip(g) {
            *rb += gv;
        }
        return;
    }
    let (ua, ub) = (&p.u_a, &p.u_b);
    let (c1, s) = (p.cos_theta - 1.0, p.sin_theta);
    let mut va = vec![0.0; n];
    let mut vb = vec![0.0; n];
    matvec(r_prev, n, ua, &mut va);
    matvec(r_prev, n, ub, &mut vb);
    let mut w1 = vec![0.0; n]; // Ḡ·u_a
    let mut w2 = vec![0.0; n]; // Ḡ·u_b
    matvec(g, n, ua, &mut w1);
    matvec(g, n, ub, &mut w2);
    // R̄_prev = Ḡ·R(plan)ᵀ = Ḡ + (c−1)(w1⊗u_a + w2⊗u_b) + s(w1⊗u_b − w2⊗u_a).
    for i in 0..n {
        for j in 0..n {
            r_prev_bar[i * n + j] += g[i * n + j]
                + c1 * (w1[i] * ua[j] + w2[i] * ub[j])
                + s * (w1[i] * ub[j] - w2[i] * ua[j]);
        }
    }
    let mut t1 = vec![0.0; n]; // R_prevᵀ·w1
    let mut t2 = vec![0.0; n]; // R_prevᵀ·w2
    matvec_t(r_prev, n, &w1, &mut t1);
    matvec_t(r_prev, n, &w2, &mut t2);
    let mut s1 = vec![0.0; n]; // Ḡᵀ·v_a
    let mut s2 = vec![0.0; n]; // Ḡᵀ·v_b
    matvec_t(g, n, &va, &mut s1);
    matvec_t(g, n, &vb, &mut s2);
    let mut g_ua = vec![0.0; n];
    let mut g_ub = vec![0.0; n];
    for i in 0..n {
        g_ua[i] = c1 * (t1[i] + s1[i]) + s * (s2[i] - t2[i]);
        g_ub[i] = c1 * (t2[i] + s2[i]) + s * (t1[i] - s1[i]);
    }
    let g_theta = -p.sin_theta * (tensor::dot_slice(&va, &w1) + tensor::dot_slice(&vb, &w2))
        + p.cos_theta * (tensor::dot_slice(&vb, &w1) - tensor::dot_slice(&va, &w2));
    plan_vjp(p, a, b, &g_ua, &g_ub, g_theta, a_bar, b_bar);
}

/// Chain rule through the plan construction itself: from gradients w.r.t.
/// (u_a, u_b, θ) to gradients w.r.t. the raw vectors a and b.
#[allow(clippy::too_many_arguments)]
fn plan_vjp(
    p: &RotationPlan,
    a: &[f64],
    b: &[f64],
    g_ua: &[f64],
    g_ub: &[f64],
    g_theta: f64,
    a_bar: &mut [f64],
    b_bar: &mut [f64],
) {
    let n = a.len();
    let (ua, ub) = (&p.u_a, &p.u_b);
    let (na, nb) = (p.norm_a, p.norm_b);
    // θ = arccos(c) with c = (a·b)/(‖a‖‖b‖); zero slope inside the clamp.
    if !p.clamped {
        let c = p.cos_theta;
        let c_bar = -g_theta / (1.0 - c * c).sqrt();
        let inv = 1.0 / (na * nb);
        for i in 0..n {
            a_bar[i] += c_bar * (b[i] * inv - c * a[i] / (na * na));
            b_bar[i] += c_bar * (a[i] * inv - c * b[i] / (nb * nb));
        }
    }
    // u_b = w/‖w‖ with w = b − (u_a·b)·u_a.
    let gub_dot_ub = tensor::dot_slice(g_ub, ub);
    let mut w_bar = vec![0.0; n];
    for i in 0..n {
        w_bar[i] = (g_ub[i] - gub_dot_ub * ub[i]) / p.norm_w;
    }
    let wbar_dot_ua = tensor::dot_slice(&w_bar, ua);
    // Total gradient on u_a: the caller's plus the route through w.
    let mut g_ua_total = vec![0.0; n];
    for i in 0..n {
        b_bar[i] += w_bar[i] - wbar_dot_ua * ua[i];
        g_ua_total[i] = g_ua[i] - wbar_dot_ua * b[i] - p.proj * w_bar[i];
    }
    // u_a = a/‖a‖.
    let gua_dot_ua = tensor::dot_slice(&g_ua_total, ua);
    for i in 0..n {
        a_bar[i] += (g_ua_total[i] - gua_dot_ua * ua[i]) / na;
    }
}
