//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! The tape is eager: each op evaluates immediately and records enough to run
//! its backward rule, so node ids are already in topological order and the
//! reverse sweep visits each node exactly once. Graphs are built fresh per
//! use (one per training step); nothing is mutated after construction except
//! by the owner, and `backward` takes `&self`.
//!
//! The op set is deliberately small: matmul (plain and Aᵀ·B), elementwise
//! arithmetic, SiLU/tanh/exp/sqrt, a smoothed absolute value, clamp, the
//! reductions (sum, mean, column mean, squared error), bias-add, column
//! slicing, integer powers, the diagonal-Gaussian KL, and the
//! reparameterization sample. There is no broadcasting beyond
//! scalar-times-tensor and bias-add, which keeps every backward rule short
//! enough to audit by eye.

use crate::tensor::{silu, silu_prime, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A B
    Matmul(NodeId, NodeId),
    /// Aᵀ B (A and B share their row count)
    MatmulTn(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Matrix plus a row vector added to every row.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    /// sqrt(x² + eps), a smooth |x|.
    SmoothAbs(NodeId),
    /// Hard clamp; gradient is zero outside the open interval.
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    /// Column means of a 2-D tensor, shape [1, c].
    ColMean(NodeId),
    /// Σ (a − b)², a scalar.
    SquaredError(NodeId, NodeId),
    /// Columns [lo, hi) of a 2-D tensor.
    ColSlice(NodeId, usize, usize),
    /// Elementwise integer power, k ≥ 1.
    Powi(NodeId, i32),
    /// Σ over entries of KL(N(mu_q, e^{lv_q}) ‖ N(mu_p, e^{lv_p})).
    GaussianKlDiag {
        mu_q: NodeId,
        logvar_q: NodeId,
        mu_p: NodeId,
        logvar_p: NodeId,
    },
    /// mu + exp(logvar/2) ⊙ noise.
    ReparamSample {
        mu: NodeId,
        logvar: NodeId,
        noise: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Build with the op methods, then call [`Tape::backward`].
#[derive(Default)]
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

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Differentiable leaf (a parameter or any input needing a gradient).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, true)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, value: Tensor, context: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context,
                node: Some(self.nodes.len()),
            });
        }
        let requires_grad = op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), v, "matmul")
    }

    /// Aᵀ B without materializing the transpose.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_tn(self.value(b))?;
        self.push(Op::MatmulTn(a, b), v, "matmul_tn")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).div(self.value(b))?;
        self.push(Op::Div(a, b), v, "div")
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_bias(self.value(bias))?;
        self.push(Op::AddBias(a, bias), v, "add_bias")
    }

    /// Affine layer x W + b.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v, "add_scalar")
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(silu);
        self.push(Op::Silu(a), v, "silu")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, "tanh")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v, "sqrt")
    }

    /// sqrt(x² + eps): the smooth |x| used inside training penalties.
    pub fn smooth_abs(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| (x * x + eps).sqrt());
        self.push(Op::SmoothAbs(a), v, "smooth_abs")
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v, "clamp")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v, "mean")
    }

    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).col_mean();
        self.push(Op::ColMean(a), v, "col_mean")
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).squared_error(self.value(b))?);
        self.push(Op::SquaredError(a, b), v, "squared_error")
    }

    pub fn col_slice(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if hi > c || lo >= hi {
            return Err(Error::ShapeMismatch {
                op: "col_slice",
                lhs: t.shape().to_vec(),
                rhs: vec![lo, hi],
            });
        }
        let mut data = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[lo..hi]);
        }
        let v = Tensor::matrix(r, hi - lo, data)?;
        self.push(Op::ColSlice(a, lo, hi), v, "col_slice")
    }

    pub fn powi(&mut self, a: NodeId, k: i32) -> Result<NodeId> {
        debug_assert!(k >= 1);
        let v = self.value(a).map(|x| x.powi(k));
        self.push(Op::Powi(a, k), v, "powi")
    }

    /// Σ over entries of the diagonal-Gaussian KL divergence
    /// KL(N(mu_q, e^{lv_q}) ‖ N(mu_p, e^{lv_p})). All four tensors share one
    /// shape; batches are summed along with coordinates.
    pub fn gaussian_kl_diag(
        &mut self,
        mu_q: NodeId,
        logvar_q: NodeId,
        mu_p: NodeId,
        logvar_p: NodeId,
    ) -> Result<NodeId> {
        let (mq, lq, mp, lp) = (
            self.value(mu_q),
            self.value(logvar_q),
            self.value(mu_p),
            self.value(logvar_p),
        );
        for other in [lq, mp, lp] {
            if mq.shape() != other.shape() {
                return Err(Error::ShapeMismatch {
                    op: "gaussian_kl_diag",
                    lhs: mq.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        let mut kl = 0.0;
        for i in 0..mq.len() {
            let (m0, l0, m1, l1) = (mq.data()[i], lq.data()[i], mp.data()[i], lp.data()[i]);
            let d = m0 - m1;
            kl += 0.5 * ((l0 - l1).exp() + d * d / l1.exp() - 1.0 - l0 + l1);
        }
        self.push(
            Op::GaussianKlDiag {
                mu_q,
                logvar_q,
                mu_p,
                logvar_p,
            },
            Tensor::scalar(kl),
            "gaussian_kl_diag",
        )
    }

    /// mu + exp(logvar/2) ⊙ noise, differentiable in mu and logvar.
    pub fn reparam_sample(&mut self, mu: NodeId, logvar: NodeId, noise: NodeId) -> Result<NodeId> {
        let (m, l, e) = (self.value(mu), self.value(logvar), self.value(noise));
        if m.shape() != l.shape() || m.shape() != e.shape() {
            return Err(Error::ShapeMismatch {
                op: "reparam_sample",
                lhs: m.shape().to_vec(),
                rhs: l.shape().to_vec(),
            });
        }
        let data = (0..m.len())
            .map(|i| m.data()[i] + (0.5 * l.data()[i]).exp() * e.data()[i])
            .collect();
        let v = Tensor::new(m.shape().to_vec(), data)?;
        self.push(Op::ReparamSample { mu, logvar, noise }, v, "reparam_sample")
    }

    // ---- reverse sweep ----

    /// Reverse accumulation from a scalar output. Returns one gradient slot
    /// per node; leaves that the output does not depend on stay `None`.
    pub fn backward(&self, out: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.nodes[out].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[out].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Tensor::new(
            self.nodes[out].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=out).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        context: "backward",
                        node: Some(id),
                    });
                }
            }
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |i: NodeId| &self.nodes[i].value;
        let acc = |grads: &mut [Option<Tensor>], i: NodeId, delta: Tensor| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(t) => t.axpy_from(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                acc(grads, *a, g.matmul_nt(val(*b))?);
                acc(grads, *b, val(*a).matmul_tn(g)?);
            }
            Op::MatmulTn(a, b) => {
                // C = AᵀB: dA = B Cᵀ-grad, dB = A C-grad
                acc(grads, *a, val(*b).matmul_nt(g)?);
                acc(grads, *b, val(*a).matmul(g)?);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.mul(val(*b))?);
                acc(grads, *b, g.mul(val(*a))?);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(grads, *a, g.div(bv)?);
                let d = g
                    .mul(val(*a))?
                    .div(&bv.mul(bv)?)?
                    .scale(-1.0);
                acc(grads, *b, d);
            }
            Op::AddBias(a, bias) => {
                acc(grads, *a, g.clone());
                let gb = g.col_mean().scale(g.rows() as f64);
                let gb = if val(*bias).shape().len() == 1 {
                    Tensor::from_vec(gb.into_data())
                } else {
                    gb
                };
                acc(grads, *bias, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Silu(a) => {
                let d = val(*a).map(silu_prime);
                acc(grads, *a, g.mul(&d)?);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let d = y.map(|t| 1.0 - t * t);
                acc(grads, *a, g.mul(&d)?);
            }
            Op::Exp(a) => {
                acc(grads, *a, g.mul(&self.nodes[id].value)?);
            }
            Op::Sqrt(a) => {
                let d = self.nodes[id].value.map(|y| 0.5 / y);
                acc(grads, *a, g.mul(&d)?);
            }
            Op::SmoothAbs(a) => {
                let d = val(*a).div(&self.nodes[id].value)?;
                acc(grads, *a, g.mul(&d)?);
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                let mask = av.map(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                acc(grads, *a, g.mul(&mask)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::ColMean(a) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut d = Tensor::zeros(&[r, c]);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *dv = gv * inv;
                    }
                }
                acc(grads, *a, d);
            }
            Op::SquaredError(a, b) => {
                let diff = val(*a).sub(val(*b))?;
                let s = 2.0 * g.item();
                acc(grads, *a, diff.scale(s));
                acc(grads, *b, diff.scale(-s));
            }
            Op::ColSlice(a, lo, _hi) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let k = g.cols();
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    d.row_mut(i)[*lo..*lo + k].copy_from_slice(g.row(i));
                }
                acc(grads, *a, d);
            }
            Op::Powi(a, k) => {
                let kk = *k;
                let d = val(*a).map(|x| kk as f64 * x.powi(kk - 1));
                acc(grads, *a, g.mul(&d)?);
            }
            Op::GaussianKlDiag {
                mu_q,
                logvar_q,
                mu_p,
                logvar_p,
            } => {
                let (mq, lq, mp, lp) = (val(*mu_q), val(*logvar_q), val(*mu_p), val(*logvar_p));
                let gv = g.item();
                let n = mq.len();
                let mut d_mq = vec![0.0; n];
                let mut d_lq = vec![0.0; n];
                let mut d_mp = vec![0.0; n];
                let mut d_lp = vec![0.0; n];
                for i in 0..n {
                    let (m0, l0, m1, l1) =
                        (mq.data()[i], lq.data()[i], mp.data()[i], lp.data()[i]);
                    let inv_vp = (-l1).exp();
                    let diff = m0 - m1;
                    d_mq[i] = gv * diff * inv_vp;
                    d_mp[i] = -d_mq[i];
                    d_lq[i] = gv * 0.5 * ((l0 - l1).exp() - 1.0);
                    d_lp[i] = gv * 0.5 * (1.0 - (l0 - l1).exp() - diff * diff * inv_vp);
                }
                let shape = mq.shape().to_vec();
                acc(grads, *mu_q, Tensor::new(shape.clone(), d_mq)?);
                acc(grads, *logvar_q, Tensor::new(shape.clone(), d_lq)?);
                acc(grads, *mu_p, Tensor::new(shape.clone(), d_mp)?);
                acc(grads, *logvar_p, Tensor::new(shape, d_lp)?);
            }
            Op::ReparamSample { mu, logvar, noise } => {
                acc(grads, *mu, g.clone());
                let (l, e) = (val(*logvar), val(*noise));
                let n = l.len();
                let mut d_l = vec![0.0; n];
                for i in 0..n {
                    d_l[i] = g.data()[i] * 0.5 * (0.5 * l.data()[i]).exp() * e.data()[i];
                }
                acc(grads, *logvar, Tensor::new(l.shape().to_vec(), d_l)?);
                let d_e = l.map(|x| (0.5 * x).exp()).mul(g)?;
                acc(grads, *noise, d_e);
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b)
        | Op::MatmulTn(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddBias(a, b)
        | Op::SquaredError(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Silu(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::SmoothAbs(a)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::ColMean(a)
        | Op::ColSlice(a, _, _)
        | Op::Powi(a, _) => vec![*a],
        Op::GaussianKlDiag {
            mu_q,
            logvar_q,
            mu_p,
            logvar_p,
        } => vec![*mu_q, *logvar_q, *mu_p, *logvar_p],
        Op::ReparamSample { mu, logvar, noise } => vec![*mu, *logvar, *noise],
    }
}

/// Evaluate a scalar output and the gradients of the requested leaves.
/// Leaves the output does not depend on get zero gradients of their shape.
pub fn eval_and_grad(tape: &Tape, out: NodeId, params: &[NodeId]) -> Result<(f64, Vec<Tensor>)> {
    let grads = tape.backward(out)?;
    let value = tape.value(out).item();
    let mut out_grads = Vec::with_capacity(params.len());
    for &p in params {
        match &grads[p] {
            Some(g) => out_grads.push(g.clone()),
            None => out_grads.push(Tensor::zeros(tape.value(p).shape())),
        }
    }
    Ok((value, out_grads))
}
