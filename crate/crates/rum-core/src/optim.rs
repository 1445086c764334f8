//! RMSProp and Adam with global-norm gradient clipping.
//!
//! Accumulators live in parameter order and start at zero; updates are
//! elementwise with fixed iteration order, so training is deterministic
//! and checkpointable.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!(
                "unknown optimizer '{other}' (expected rmsprop or adam)"
            )),
        }
    }
}

/// Hyper-parameters; `decay` is RMSProp's, the betas are Adam's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 0.001,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: second moments `v` for both kinds, first moments `m`
/// and a step counter for Adam. Accumulator order mirrors parameter
/// order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hyper: OptimHyper,
    pub step: u64,
    pub v: Vec<Tensor>,
    pub m: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let m = match kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::Rmsprop => Vec::new(),
        };
        Optimizer {
            kind,
            hyper,
            step: 0,
            v: zeros,
            m,
        }
    }

    /// One update over all named parameters. `grads[i] = None` is treated
    /// as a zero gradient (the parameter value is left untouched).
    pub fn update(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer_update",
                detail: format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.v.len()
                ),
            });
        }
        self.step += 1;
        let h = self.hyper;
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "optimizer_update",
                        detail: format!("param {name} {:?} vs grad {:?}", p.shape(), g.shape()),
                    });
                }
            }
            match self.kind {
                OptimizerKind::Rmsprop => {
                    let v = self.v[i].data_mut();
                    let pd = p.data_mut();
                    for j in 0..pd.len() {
                        let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                        v[j] = h.decay * v[j] + (1.0 - h.decay) * gj * gj;
                        pd[j] -= h.lr * gj / (v[j].sqrt() + h.eps);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - h.beta1.powi(self.step as i32);
                    let bc2 = 1.0 - h.beta2.powi(self.step as i32);
                    let v = self.v[i].data_mut();
                    let m = self.m[i].data_mut();
                    let pd = p.data_mut();
                    for j in 0..pd.len() {
                        let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        pd[j] -= h.lr * mhat / (vhat.sqrt() + h.eps);
                    }
                }
            }
            p.ensure_finite("optimizer_update")?;
        }
        Ok(())
    }
}

/// Scales the whole gradient set so its global ℓ₂ norm does not exceed
/// `max_norm`; a no-op when already within bounds. Returns the pre-clip
/// norm.
pub fn clip_by_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn hyper() -> OptimHyper {
        OptimHyper::default()
    }

    fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
        ts.into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut p = named(vec![Tensor::new(&[2], vec![1.5, -0.5]).unwrap()]);
            let want = p[0].1.clone();
            let mut o = Optimizer::new(kind, hyper(), &[&[2]]);
            o.update(&mut p, &[Some(Tensor::zeros(&[2]))]).unwrap();
            o.update(&mut p, &[None]).unwrap();
            assert_eq!(p[0].1, want, "{kind}");
        }
    }

    #[test]
    fn rmsprop_first_step_closed_form() {
        // g = 1 from v = 0: v = 0.1, Δp = −lr/(√0.1 + eps).
        let mut p = named(vec![Tensor::zeros(&[3])]);
        let mut o = Optimizer::new(OptimizerKind::Rmsprop, hyper(), &[&[3]]);
        o.update(&mut p, &[Some(Tensor::full(&[3], 1.0))]).unwrap();
        let want = -0.001 / (0.1f64.sqrt() + 1e-8);
        for &x in p[0].1.data() {
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn rmsprop_matches_scalar_reference_on_quadratic() {
        // Minimize p² from p = 1: g = 2p, five steps against a plain
        // scalar loop.
        let mut p = named(vec![Tensor::scalar(1.0)]);
        let mut o = Optimizer::new(OptimizerKind::Rmsprop, hyper(), &[&[1]]);
        let (mut sp, mut sv) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let g = 2.0 * p[0].1.item();
            o.update(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
            let sg = 2.0 * sp;
            sv = 0.9 * sv + 0.1 * sg * sg;
            sp -= 0.001 * sg / (sv.sqrt() + 1e-8);
            assert!((p[0].1.item() - sp).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for g in [3.7, -0.02, 1e4] {
            let mut p = named(vec![Tensor::scalar(0.0)]);
            let mut o = Optimizer::new(OptimizerKind::Adam, hyper(), &[&[1]]);
            o.update(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
            let magnitude = p[0].1.item().abs();
            assert!((magnitude - 0.001).abs() < 1e-6, "g={g}: |Δ|={magnitude}");
            assert_eq!(p[0].1.item() < 0.0, g > 0.0);
        }
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        let mut p = named(vec![Tensor::scalar(1.0)]);
        let mut o = Optimizer::new(OptimizerKind::Adam, hyper(), &[&[1]]);
        let (mut sp, mut sm, mut sv) = (1.0f64, 0.0f64, 0.0f64);
        for step in 1..=5 {
            let g = 2.0 * p[0].1.item();
            o.update(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
            let sg = 2.0 * sp;
            sm = 0.9 * sm + 0.1 * sg;
            sv = 0.999 * sv + 0.001 * sg * sg;
            let mhat = sm / (1.0 - 0.9f64.powi(step));
            let vhat = sv / (1.0 - 0.999f64.powi(step));
            sp -= 0.001 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[0].1.item() - sp).abs() < 1e-15);
        }
    }

    #[test]
    fn per_tensor_zero_grad_is_untouched_in_mixed_update() {
        for kind in [OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut p = named(vec![Tensor::full(&[2], 0.7), Tensor::full(&[2], -0.3)]);
            let frozen = p[0].1.clone();
            let mut o = Optimizer::new(kind, hyper(), &[&[2], &[2]]);
            o.update(&mut p, &[None, Some(Tensor::full(&[2], 1.0))])
                .unwrap();
            assert_eq!(p[0].1, frozen, "{kind}");
            assert_ne!(p[1].1, Tensor::full(&[2], -0.3), "{kind}");
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut g = vec![Some(Tensor::new(&[2], vec![0.3, 0.4]).unwrap())];
        let before = g[0].clone();
        let norm = clip_by_global_norm(&mut g, 1.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(g[0], before);
    }

    #[test]
    fn clip_halves_a_norm_2_gradient() {
        let mut g = vec![Some(Tensor::new(&[2], vec![1.2, 1.6]).unwrap())];
        let norm = clip_by_global_norm(&mut g, 1.0);
        assert!((norm - 2.0).abs() < 1e-12);
        let post = (g[0]
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>())
        .sqrt();
        assert!((post - 1.0).abs() < 1e-12);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn clip_preserves_direction_and_caps_norm() {
        let mut rng = Rng::from_seed(1);
        for _ in 0..20 {
            let originals: Vec<Tensor> = (0..3).map(|_| rng.rand_tensor(&[4], -2.0, 2.0)).collect();
            let mut g: Vec<Option<Tensor>> = originals.iter().cloned().map(Some).collect();
            let before = clip_by_global_norm(&mut g, 1.0);
            let mut sq = 0.0;
            for t in g.iter().flatten() {
                for &x in t.data() {
                    sq += x * x;
                }
            }
            let after = sq.sqrt();
            assert!((after - before.min(1.0)).abs() < 1e-12);
            // Positive scalar multiple of the input direction.
            let scale = if before > 1.0 { 1.0 / before } else { 1.0 };
            for (t, o) in g.iter().flatten().zip(&originals) {
                for (&x, &y) in t.data().iter().zip(o.data()) {
                    assert!((x - scale * y).abs() < 1e-12);
                }
            }
        }
    }
}
