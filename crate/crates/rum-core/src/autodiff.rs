//! Tape-based reverse-mode differentiation over the tensor primitives.
//!
//! A [`Tape`] is an append-only list of nodes in topological order; every
//! recorded operation computes its forward value eagerly and caches it.
//! [`Tape::backward`] walks the list in reverse, accumulating
//! vector–Jacobian products. One tape serves one training step (graphs
//! are rebuilt per step; sequence lengths vary by task).
//!
//! The rotation ops are fused primitives: `rotate_gate` differentiates
//! through plan construction *and* application in one VJP, keeping λ=0
//! training free of N_h×N_h intermediates; `compose_rot` does the same
//! for the accumulated-memory path using the rank-2 structure only.

use crate::rotation;
use crate::tensor::{self, Tensor, TensorError};

pub type NodeId = usize;
pub type Result<T> = std::result::Result<T, TensorError>;

/// Recorded operation kinds. Ids refer to earlier nodes on the same tape.
#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf value (parameter or data).
    Input,
    /// A·B for rank-2 operands.
    Matmul(NodeId, NodeId),
    /// Row-select w[tokens], the one-hot × matrix product.
    Embed {
        w: NodeId,
        tokens: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Rank-2 plus a rank-1 bias row broadcast over rows.
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Neg(NodeId),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    SliceCols {
        x: NodeId,
        from: usize,
        to: usize,
    },
    Dot(NodeId, NodeId),
    Sum(NodeId),
    /// Per-row fused plan+rotate: out[r] = R(a[r], b[r])·h[r]. O(N) per row.
    RotateGate {
        a: NodeId,
        b: NodeId,
        h: NodeId,
    },
    /// Per-row memory update: out[r] = R_prev[r]·R(a[r], b[r]). O(N²) per row.
    ComposeRot {
        r_prev: NodeId,
        a: NodeId,
        b: NodeId,
    },
    /// Per-row matrix–vector product: out[r] = R[r]·h[r].
    BatchMatvec {
        r: NodeId,
        h: NodeId,
    },
    /// Rows rescaled to norm eta (norm < 1e-12 rows pass through).
    TimeNormalize {
        x: NodeId,
        eta: f64,
    },
    /// Scalar Σ over masked rows of softmax cross-entropy (sum, not mean;
    /// callers scale by 1/count to form means).
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Gradients indexed by node id; `None` where no gradient flowed.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Registers a leaf value and returns its id.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        self.nodes.len() - 1
    }

    /// Records `op`, computing and caching its forward value.
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    // Convenience builders.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul(a, b))
    }
    pub fn embed(&mut self, w: NodeId, tokens: Vec<usize>) -> Result<NodeId> {
        self.record(Op::Embed { w, tokens })
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow { x, row })
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale { x, c })
    }
    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Neg(x))
    }
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::OneMinus(x))
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid(x))
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(x))
    }
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.record(Op::SliceCols { x, from, to })
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Dot(a, b))
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }
    pub fn rotate_gate(&mut self, a: NodeId, b: NodeId, h: NodeId) -> Result<NodeId> {
        self.record(Op::RotateGate { a, b, h })
    }
    pub fn compose_rot(&mut self, r_prev: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::ComposeRot { r_prev, a, b })
    }
    pub fn batch_matvec(&mut self, r: NodeId, h: NodeId) -> Result<NodeId> {
        self.record(Op::BatchMatvec { r, h })
    }
    pub fn time_normalize(&mut self, x: NodeId, eta: f64) -> Result<NodeId> {
        self.record(Op::TimeNormalize { x, eta })
    }
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<NodeId> {
        self.record(Op::SoftmaxXent {
            logits,
            targets,
            mask,
        })
    }

    /// Recomputes every non-input node from the inputs, returning a fresh
    /// tape. Used to verify that cached values are reproducible.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape::new();
        for node in &self.nodes {
            let value = match &node.op {
                Op::Input => node.value.clone(),
                op => eval(op, &out.nodes)?,
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(out)
    }

    /// Reverse-mode sweep from `output` with the given seed gradient
    /// (shape must match the output value). Returns gradients for every
    /// node the output depends on.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<GradMap> {
        if seed.shape() != self.nodes[output].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.nodes[output].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.push_vjp(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(GradMap { grads })
    }

    /// backward() from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<GradMap> {
        if self.nodes[output].value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward_scalar",
                detail: format!(
                    "output shape {:?} is not scalar",
                    self.nodes[output].value.shape()
                ),
            });
        }
        self.backward(output, Tensor::scalar(1.0))
    }

    /// Accumulates the VJPs of node `id` (output gradient `g`) into its
    /// inputs' slots.
    fn push_vjp(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |nid: NodeId| &self.nodes[nid].value;
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Matmul(a, b) => {
                let da = tensor::matmul(g, &tensor::transpose(val(*b)))?;
                accum(grads, *a, &da);
                let db = tensor::matmul_tn(val(*a), g)?;
                accum(grads, *b, &db);
            }
            Op::Embed { w, tokens } => {
                let (_, d) = val(*w).dims2();
                let slot = slot(grads, *w, val(*w).shape());
                for (r, &t) in tokens.iter().enumerate() {
                    let grow = g.row(r);
                    for (o, &gv) in slot.data_mut()[t * d..(t + 1) * d].iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
            }
            Op::Add(a, b) => {
                accum(grads, *a, g);
                accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g);
                accum_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let da = tensor::mul(g, val(*b))?;
                accum(grads, *a, &da);
                let db = tensor::mul(g, val(*a))?;
                accum(grads, *b, &db);
            }
            Op::AddRow { x, row } => {
                accum(grads, *x, g);
                let (m, n) = g.dims2();
                let slot = slot(grads, *row, val(*row).shape());
                for r in 0..m {
                    for (o, &gv) in slot.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                let _ = (m, n);
            }
            Op::Scale { x, c } => accum_scaled(grads, *x, g, *c),
            Op::Neg(x) => accum_scaled(grads, *x, g, -1.0),
            Op::OneMinus(x) => accum_scaled(grads, *x, g, -1.0),
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                let slot = slot(grads, *x, y.shape());
                for ((o, &gv), &yv) in slot.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let slot = slot(grads, *x, xv.shape());
                for ((o, &gv), &x0) in slot.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if x0 > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id].value;
                let slot = slot(grads, *x, y.shape());
                for ((o, &gv), &yv) in slot.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - yv * yv);
                }
            }
            Op::SliceCols { x, from, to } => {
                let (m, n) = val(*x).dims2();
                let w = to - from;
                let slot = slot(grads, *x, &[m, n]);
                for r in 0..m {
                    let dst = &mut slot.data_mut()[r * n + from..r * n + to];
                    for (o, &gv) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                        *o += gv;
                    }
                }
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                accum_scaled(grads, *a, val(*b), gs);
                accum_scaled(grads, *b, val(*a), gs);
            }
            Op::Sum(x) => {
                let gs = g.item();
                let slot = slot(grads, *x, val(*x).shape());
                for o in slot.data_mut() {
                    *o += gs;
                }
            }
            Op::RotateGate { a, b, h } => {
                let (nb, n) = val(*h).dims2();
                // Three slots are needed at once; work in scratch buffers,
                // then accumulate, keeping the borrow checker satisfied.
                let mut da = Tensor::zeros(&[nb, n]);
                let mut db = Tensor::zeros(&[nb, n]);
                let mut dh = Tensor::zeros(&[nb, n]);
                for r in 0..nb {
                    let ar = &val(*a).data()[r * n..(r + 1) * n];
                    let br = &val(*b).data()[r * n..(r + 1) * n];
                    let hr = &val(*h).data()[r * n..(r + 1) * n];
                    let p = rotation::plan(ar, br)?;
                    let (da_r, db_r, dh_r) = three_rows(&mut da, &mut db, &mut dh, r, n);
                    rotation::rotate_vjp(&p, ar, br, hr, g.row(r), da_r, db_r, dh_r);
                }
                accum(grads, *a, &da);
                accum(grads, *b, &db);
                accum(grads, *h, &dh);
            }
            Op::ComposeRot { r_prev, a, b } => {
                let (nb, n, _) = val(*r_prev).dims3();
                let mut da = Tensor::zeros(&[nb, n]);
                let mut db = Tensor::zeros(&[nb, n]);
                let mut dr = Tensor::zeros(&[nb, n, n]);
                for r in 0..nb {
                    let ar = &val(*a).data()[r * n..(r + 1) * n];
                    let br = &val(*b).data()[r * n..(r + 1) * n];
                    let p = rotation::plan(ar, br)?;
                    let prev = val(*r_prev).slab(r);
                    let gs = g.slab(r);
                    let (da_r, db_r) = two_rows(&mut da, &mut db, r, n);
                    rotation::compose_vjp(&p, ar, br, prev, gs, n, da_r, db_r, dr.slab_mut(r));
                }
                accum(grads, *a, &da);
                accum(grads, *b, &db);
                accum(grads, *r_prev, &dr);
            }
            Op::BatchMatvec { r, h } => {
                let (nb, n, _) = val(*r).dims3();
                let mut dr = Tensor::zeros(&[nb, n, n]);
                let mut dh = Tensor::zeros(&[nb, n]);
                for k in 0..nb {
                    let gk = &g.data()[k * n..(k + 1) * n];
                    let hk = &val(*h).data()[k * n..(k + 1) * n];
                    let rk = val(*r).slab(k);
                    // R̄[k] = ȳ[k] ⊗ h[k]
                    let drk = dr.slab_mut(k);
                    for i in 0..n {
                        for j in 0..n {
                            drk[i * n + j] = gk[i] * hk[j];
                        }
                    }
                    // h̄[k] = R[k]ᵀ·ȳ[k]
                    rotation::matvec_t(rk, n, gk, &mut dh.data_mut()[k * n..(k + 1) * n]);
                }
                accum(grads, *r, &dr);
                accum(grads, *h, &dh);
            }
            Op::TimeNormalize { x, eta } => {
                let xv = val(*x);
                let (m, n) = xv.dims2();
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let norm = tensor::l2norm_slice(xr);
                    let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                    if norm < 1e-12 {
                        dst.copy_from_slice(gr);
                        continue;
                    }
                    let xg = tensor::dot_slice(xr, gr);
                    let s = eta / norm;
                    let t = xg / (norm * norm);
                    for ((o, &gv), &xvv) in dst.iter_mut().zip(gr).zip(xr) {
                        *o = s * (gv - t * xvv);
                    }
                }
                accum(grads, *x, &dx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
            } => {
                let gs = g.item();
                let lv = val(*logits);
                let (p, v) = lv.dims2();
                let slot = slot(grads, *logits, &[p, v]);
                for r in 0..p {
                    if !mask[r] {
                        continue;
                    }
                    let row = lv.row(r);
                    let (lse, max) = softmax_parts(row);
                    let dst = &mut slot.data_mut()[r * v..(r + 1) * v];
                    let z = (lse - max).exp();
                    for (j, (o, &x)) in dst.iter_mut().zip(row).enumerate() {
                        let prob = (x - max).exp() / z;
                        let delta = if j == targets[r] { 1.0 } else { 0.0 };
                        *o += gs * (prob - delta);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gets (or zero-initializes) the gradient slot for `id`.
fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
    let slot = slot(grads, id, delta.shape());
    for (o, &d) in slot.data_mut().iter_mut().zip(delta.data()) {
        *o += d;
    }
}

fn accum_scaled(grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, c: f64) {
    let slot = slot(grads, id, delta.shape());
    for (o, &d) in slot.data_mut().iter_mut().zip(delta.data()) {
        *o += c * d;
    }
}

/// Disjoint mutable row views into three equally shaped rank-2 tensors.
fn three_rows<'a>(
    a: &'a mut Tensor,
    b: &'a mut Tensor,
    c: &'a mut Tensor,
    r: usize,
    n: usize,
) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
    let ar = &mut a.data_mut()[r * n..(r + 1) * n] as *mut [f64];
    let br = &mut b.data_mut()[r * n..(r + 1) * n] as *mut [f64];
    let cr = &mut c.data_mut()[r * n..(r + 1) * n] as *mut [f64];
    // Safe: three distinct tensors, so the slices cannot alias.
    unsafe { (&mut *ar, &mut *br, &mut *cr) }
}

fn two_rows<'a>(
    a: &'a mut Tensor,
    b: &'a mut Tensor,
    r: usize,
    n: usize,
) -> (&'a mut [f64], &'a mut [f64]) {
    let ar = &mut a.data_mut()[r * n..(r + 1) * n] as *mut [f64];
    let br = &mut b.data_mut()[r * n..(r + 1) * n] as *mut [f64];
    // Safe: two distinct tensors.
    unsafe { (&mut *ar, &mut *br) }
}

fn softmax_parts(row: &[f64]) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut s = 0.0;
    for &x in row {
        s += (x - max).exp();
    }
    (max + s.ln(), max)
}

/// Forward evaluation of one op against already-computed nodes.
fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |id: NodeId| &nodes[id].value;
    match op {
        Op::Input => unreachable!("inputs are recorded via Tape::input"),
        Op::Matmul(a, b) => tensor::matmul(v(*a), v(*b)),
        Op::Embed { w, tokens } => tensor::embed(v(*w), tokens),
        Op::Add(a, b) => tensor::add(v(*a), v(*b)),
        Op::Sub(a, b) => tensor::sub(v(*a), v(*b)),
        Op::Mul(a, b) => tensor::mul(v(*a), v(*b)),
        Op::AddRow { x, row } => tensor::add_row(v(*x), v(*row)),
        Op::Scale { x, c } => tensor::scale(v(*x), *c),
        Op::Neg(x) => tensor::neg(v(*x)),
        Op::OneMinus(x) => tensor::one_minus(v(*x)),
        Op::Sigmoid(x) => tensor::sigmoid(v(*x)),
        Op::Relu(x) => tensor::relu(v(*x)),
        Op::Tanh(x) => tensor::tanh(v(*x)),
        Op::SliceCols { x, from, to } => tensor::slice_cols(v(*x), *from, *to),
        Op::Dot(a, b) => Ok(Tensor::scalar(tensor::dot(v(*a), v(*b))?)),
        Op::Sum(x) => Ok(Tensor::scalar(tensor::sum(v(*x)))),
        Op::RotateGate { a, b, h } => {
            let (av, bv, hv) = (v(*a), v(*b), v(*h));
            if av.shape() != bv.shape() || av.shape() != hv.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "rotate_gate",
                    detail: format!("{:?}/{:?}/{:?}", av.shape(), bv.shape(), hv.shape()),
                });
            }
            let (nb, n) = hv.dims2();
            let mut out = hv.clone();
            for r in 0..nb {
                let p = rotation::plan(
                    &av.data()[r * n..(r + 1) * n],
                    &bv.data()[r * n..(r + 1) * n],
                )?;
                rotation::rotate_in_place(&p, out.row_mut(r));
            }
            out.ensure_finite("rotate_gate")?;
            Ok(out)
        }
        Op::ComposeRot { r_prev, a, b } => {
            let (rv, av, bv) = (v(*r_prev), v(*a), v(*b));
            let (nb, n, n2) = rv.dims3();
            if n != n2 || av.shape() != [nb, n] || bv.shape() != [nb, n] {
                return Err(TensorError::ShapeMismatch {
                    op: "compose_rot",
                    detail: format!("R {:?}, a {:?}, b {:?}", rv.shape(), av.shape(), bv.shape()),
                });
            }
            let mut out = Tensor::zeros(&[nb, n, n]);
            for r in 0..nb {
                let p = rotation::plan(
                    &av.data()[r * n..(r + 1) * n],
                    &bv.data()[r * n..(r + 1) * n],
                )?;
                rotation::compose_right_slab(rv.slab(r), &p, out.slab_mut(r), n);
            }
            out.ensure_finite("compose_rot")?;
            Ok(out)
        }
        Op::BatchMatvec { r, h } => {
            let (rv, hv) = (v(*r), v(*h));
            let (nb, n, n2) = rv.dims3();
            if n != n2 || hv.shape() != [nb, n] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_matvec",
                    detail: format!("R {:?}, h {:?}", rv.shape(), hv.shape()),
                });
            }
            let mut out = Tensor::zeros(&[nb, n]);
            for k in 0..nb {
                rotation::matvec(
                    rv.slab(k),
                    n,
                    hv.row(k),
                    &mut out.data_mut()[k * n..(k + 1) * n],
                );
            }
            out.ensure_finite("batch_matvec")?;
            Ok(out)
        }
        Op::TimeNormalize { x, eta } => {
            let out = tensor::row_normalize(v(*x), *eta);
            out.ensure_finite("time_normalize")?;
            Ok(out)
        }
        Op::SoftmaxXent {
            logits,
            targets,
            mask,
        } => {
            let lv = v(*logits);
            let (p, vdim) = lv.dims2();
            if targets.len() != p || mask.len() != p {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_xent",
                    detail: format!("{p} rows, {} targets, {} mask", targets.len(), mask.len()),
                });
            }
            let mut total = 0.0;
            let mut any = false;
            for r in 0..p {
                if !mask[r] {
                    continue;
                }
                let t = targets[r];
                if t >= vdim {
                    return Err(TensorError::BadTarget {
                        op: "softmax_xent",
                        index: t,
                        vocab: vdim,
                    });
                }
                let row = lv.row(r);
                let (lse, _) = softmax_parts(row);
                total += lse - row[t];
                any = true;
            }
            if !any {
                return Err(TensorError::EmptyMask { op: "softmax_xent" });
            }
            if !total.is_finite() {
                return Err(TensorError::NonFinite { op: "softmax_xent" });
            }
            Ok(Tensor::scalar(total))
        }
    }
}

// ── Finite-difference checking ───────────────────────────────────────────

/// Outcome of a finite-difference comparison. NaNs encountered while
/// probing are counted, not raised.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub nan_encounters: usize,
    /// The (numeric, analytic) pair behind `max_rel_err`.
    pub worst_pair: (f64, f64),
}

/// Relative error with an absolute floor, so near-zero pairs compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, 1e-6)
}

fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients against central differences of `value` at
/// `params`. Tensors with more than 1000 coordinates are probed along 16
/// seeded unit directions instead of per-coordinate.
///
/// The relative-error floor scales with |value| at the base point: a
/// central difference of step h carries round-off noise of order
/// |f|·ε/h, so gradient coordinates smaller than that cannot be checked
/// relatively and would otherwise report round-off as gradient error.
pub fn grad_check<F>(
    mut value: F,
    params: &[Tensor],
    analytic: &[Option<&Tensor>],
    eps: f64,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        nan_encounters: 0,
        worst_pair: (0.0, 0.0),
    };
    let mut point: Vec<Tensor> = params.to_vec();
    let floor = 1e-6 * value(&point).abs().max(1.0);
    for (pi, ana) in analytic.iter().enumerate() {
        let Some(ana) = ana else { continue };
        let ncoord = params[pi].len();
        if ncoord <= 1000 {
            for c in 0..ncoord {
                let x0 = params[pi].data()[c];
                point[pi].data_mut()[c] = x0 + eps;
                let fp = value(&point);
                point[pi].data_mut()[c] = x0 - eps;
                let fm = value(&point);
                point[pi].data_mut()[c] = x0;
                let numeric = (fp - fm) / (2.0 * eps);
                compare(numeric, ana.data()[c], floor, &mut report);
            }
        } else {
            let mut rng =
                crate::rng::Rng::from_seed(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for _ in 0..16 {
                let mut dir: Vec<f64> = (0..ncoord).map(|_| rng.normal()).collect();
                let norm = tensor::l2norm_slice(&dir);
                for d in &mut dir {
                    *d /= norm;
                }
                for (x, (&p0, &d)) in point[pi]
                    .data_mut()
                    .iter_mut()
                    .zip(params[pi].data().iter().zip(&dir))
                {
                    *x = p0 + eps * d;
                }
                let fp = value(&point);
                for (x, (&p0, &d)) in point[pi]
                    .data_mut()
                    .iter_mut()
                    .zip(params[pi].data().iter().zip(&dir))
                {
                    *x = p0 - eps * d;
                }
                let fm = value(&point);
                point[pi].data_mut().copy_from_slice(params[pi].data());
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic_dir = tensor::dot_slice(ana.data(), &dir);
                compare(numeric, analytic_dir, floor, &mut report);
            }
        }
    }
    report
}

fn compare(numeric: f64, analytic: f64, floor: f64, report: &mut GradCheckReport) {
    if !numeric.is_finite() || !analytic.is_finite() {
        report.nan_encounters += 1;
        return;
    }
    let e = rel_err_floored(numeric, analytic, floor);
    if e > report.max_rel_err {
        report.max_rel_err = e;
        report.worst_pair = (numeric, analytic);
    }
    report.coords_checked += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn recording_matmul_identity_caches_operand() {
        let mut t = Tape::new();
        let a = t.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.input(Tensor::eye(2));
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c), t.value(a));
    }

    #[test]
    fn three_op_chain_replays_exactly() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let r = t.relu(s).unwrap();
        let l = t.sum(r).unwrap();
        assert_eq!(t.len(), 4);
        let replayed = t.replay().unwrap();
        for id in 0..t.len() {
            assert_eq!(t.value(id), replayed.value(id), "node {id} mismatch");
        }
        let _ = l;
    }

    #[test]
    fn identity_gradient_is_seed() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let g = t.backward(x, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn dot_self_gradient_is_2x() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let l = t.dot(x, x).unwrap();
        let g = t.backward_scalar(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // u = sigmoid(x); w = (2u) ⊙ (1 − u); L = Σw.
        // Closed form: dL/dx = (2 − 4u) ⊙ u(1 − u).
        let mut t = Tape::new();
        let x = t.input(Tensor::new(&[3], vec![0.3, -1.2, 0.8]).unwrap());
        let u = t.sigmoid(x).unwrap();
        let v1 = t.scale(u, 2.0).unwrap();
        let v2 = t.one_minus(u).unwrap();
        let w = t.mul(v1, v2).unwrap();
        let l = t.sum(w).unwrap();
        let g = t.backward_scalar(l).unwrap();
        for (i, &gx) in g.get(x).unwrap().data().iter().enumerate() {
            let uv = t.value(u).data()[i];
            let want = (2.0 - 4.0 * uv) * uv * (1.0 - uv);
            assert!((gx - want).abs() < 1e-12, "coord {i}: {gx} vs {want}");
        }
    }

    #[test]
    fn linear_function_checks_to_1e10() {
        let mut rng = Rng::from_seed(2);
        let x0 = rng.rand_tensor(&[6], -1.0, 1.0);
        let w = rng.rand_tensor(&[6], -1.0, 1.0);
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let wi = t.input(w.clone());
        let l = t.dot(x, wi).unwrap();
        let grads = t.backward_scalar(l).unwrap();
        let w2 = w.clone();
        let report = grad_check(
            move |ps| {
                let mut t = Tape::new();
                let x = t.input(ps[0].clone());
                let wi = t.input(w2.clone());
                let l = t.dot(x, wi).unwrap();
                t.value(l).item()
            },
            &[x0],
            &[Some(grads.get(x).unwrap())],
            1e-5,
            77,
        );
        assert!(report.max_rel_err < 1e-10, "{report:?}");
        assert_eq!(report.nan_encounters, 0);
    }

    #[test]
    fn sigmoid_chain_checks_to_1e6() {
        let mut rng = Rng::from_seed(4);
        let x0 = rng.rand_tensor(&[2, 4], -2.0, 2.0);
        let build = |p: &Tensor| {
            let mut t = Tape::new();
            let x = t.input(p.clone());
            let s = t.sigmoid(x).unwrap();
            let s2 = t.sigmoid(s).unwrap();
            let l = t.sum(s2).unwrap();
            (t, x, l)
        };
        let (t, x, l) = build(&x0);
        let grads = t.backward_scalar(l).unwrap();
        let report = grad_check(
            |ps| {
                let (t, _, l) = build(&ps[0]);
                t.value(l).item()
            },
            std::slice::from_ref(&x0),
            &[Some(grads.get(x).unwrap())],
            1e-5,
            78,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn rotation_jacobian_preserves_gradient_norm() {
        // Loss depends on h only through the rotation, so the gradient
        // norm must survive the pullback: ‖∂L/∂h_in‖ = ‖∂L/∂h_out‖.
        let mut rng = Rng::from_seed(6);
        let a = rng.rand_tensor(&[3, 8], -1.0, 1.0);
        let b = rng.rand_tensor(&[3, 8], -1.0, 1.0);
        let h = rng.rand_tensor(&[3, 8], -1.0, 1.0);
        let seed = rng.rand_tensor(&[3, 8], -1.0, 1.0);
        let mut t = Tape::new();
        let (ai, bi, hi) = (t.input(a), t.input(b), t.input(h));
        let y = t.rotate_gate(ai, bi, hi).unwrap();
        let grads = t.backward(y, seed.clone()).unwrap();
        let gh = grads.get(hi).unwrap();
        for r in 0..3 {
            let gin = tensor::l2norm_slice(gh.row(r));
            let gout = tensor::l2norm_slice(seed.row(r));
            assert!((gin - gout).abs() < 1e-10, "row {r}: {gin} vs {gout}");
        }
    }

    /// Every primitive against central differences: 100 seeded instances
    /// per op, dims 2–32, relative error < 1e-4 at step 1e-5.
    #[test]
    fn primitives_match_finite_differences() {
        let mut worst: f64 = 0.0;
        let mut rng = Rng::from_seed(100);
        for inst in 0..100 {
            let m = rng.below(7) + 2; // 2..=8
            let k = rng.below(7) + 2;
            let n = rng.below(31) + 2; // 2..=32
            let nb = rng.below(3) + 2; // 2..=4
            let (e, pair) = check_instance(inst as u64, m, k, n, nb);
            if e > worst {
                worst = e;
                if e >= 1e-4 {
                    eprintln!("instance {inst}: rel err {e:.3e} at (numeric, analytic) = {pair:?}");
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    /// Builds one random instance exercising every op kind in a single
    /// scalar-valued graph, and finite-difference checks every input.
    fn check_instance(seed: u64, m: usize, k: usize, n: usize, nb: usize) -> (f64, (f64, f64)) {
        let mut rng = Rng::from_seed(0xC0FFEE ^ seed);
        let a0 = rng.rand_tensor(&[m, k], -1.5, 1.5);
        let b0 = rng.rand_tensor(&[k, n], -1.5, 1.5);
        let bias0 = rng.rand_tensor(&[n], -1.0, 1.0);
        let w0 = rng.rand_tensor(&[5, m], -1.0, 1.0); // embedding table
        let ra0 = rng.rand_tensor(&[nb, n], -1.5, 1.5);
        let rb0 = rng.rand_tensor(&[nb, n], -1.5, 1.5);
        let rh0 = rng.rand_tensor(&[nb, n], -1.0, 1.0);
        let rp0 = random_orthogonal_batch(&mut rng, nb, n);
        let tokens: Vec<usize> = (0..nb).map(|_| rng.below(5)).collect();
        let targets: Vec<usize> = (0..nb).map(|_| rng.below(n)).collect();
        let mut mask: Vec<bool> = (0..nb).map(|_| rng.below(2) == 0).collect();
        mask[0] = true;
        let inputs = vec![
            a0.clone(),
            b0.clone(),
            bias0.clone(),
            w0.clone(),
            ra0.clone(),
            rb0.clone(),
            rh0.clone(),
            rp0.clone(),
        ];

        let build = |ps: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| t.input(p.clone())).collect();
            let (a, b, bias, w, ra, rb, rh, rp) = (
                ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7],
            );
            // Dense chain: matmul → add_row → tanh/sigmoid/relu mix.
            let mm = t.matmul(a, b).unwrap();
            let ar = t.add_row(mm, bias).unwrap();
            let th = t.tanh(ar).unwrap();
            let sg = t.sigmoid(ar).unwrap();
            let pr = t.mul(th, sg).unwrap();
            let ng = t.neg(pr).unwrap();
            let om = t.one_minus(ng).unwrap();
            let rl = t.relu(om).unwrap();
            let sc = t.scale(rl, 0.37).unwrap();
            let half = (n / 2).max(1);
            let sl = t.slice_cols(sc, 0, half).unwrap();
            let l1 = t.sum(sl).unwrap();
            // Embed + sub + dot.
            let em = t.embed(w, tokens.clone()).unwrap();
            let em2 = t.embed(w, tokens.iter().rev().cloned().collect()).unwrap();
            let df = t.sub(em, em2).unwrap();
            let l2 = t.dot(df, df).unwrap();
            // Rotation block: compose, apply, normalize, add, softmax loss.
            let cr = t.compose_rot(rp, ra, rb).unwrap();
            let mv = t.batch_matvec(cr, rh).unwrap();
            let rg = t.rotate_gate(ra, rb, mv).unwrap();
            let tn = t.time_normalize(rg, 1.3).unwrap();
            let ad = t.add(tn, rh).unwrap();
            let l3 = t.softmax_xent(ad, targets.clone(), mask.clone()).unwrap();
            // Combine the scalars.
            let s1 = t.add(l1, l2).unwrap();
            let loss = t.add(s1, l3).unwrap();
            (t, ids, loss)
        };

        let (t, ids, loss) = build(&inputs);
        let grads = t.backward_scalar(loss).unwrap();
        let ana: Vec<Option<&Tensor>> = ids.iter().map(|&id| grads.get(id)).collect();
        let report = grad_check(
            |ps| {
                let (t, _, l) = build(ps);
                t.value(l).item()
            },
            &inputs,
            &ana,
            1e-5,
            seed,
        );
        assert_eq!(report.nan_encounters, 0, "NaN probing instance {seed}");
        (report.max_rel_err, report.worst_pair)
    }

    /// Random batch of special-orthogonal matrices (products of two
    /// random rotations), a well-conditioned point for ComposeRot.
    fn random_orthogonal_batch(rng: &mut Rng, nb: usize, n: usize) -> Tensor {
        let mut out = Tensor::zeros(&[nb, n, n]);
        for kk in 0..nb {
            let mut r = Tensor::eye(n);
            for _ in 0..2 {
                let a: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let p = crate::rotation::plan(&a, &b).unwrap();
                r = crate::rotation::compose_right(&r, &p).unwrap();
            }
            out.slab_mut(kk).copy_from_slice(r.data());
        }
        out
    }

    #[test]
    fn backward_rejects_bad_seed_shape() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x, Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            t.softmax_xent(x, vec![0, 0], vec![false, false]),
            Err(TensorError::EmptyMask { .. })
        ));
    }
}
