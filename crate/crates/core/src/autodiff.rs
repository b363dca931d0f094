//! Reverse-mode differentiation on a per-forward tape, plus a central
//! finite-difference oracle.
//!
//! A [`Tape`] records tensor-valued primitive ops in execution order, so node
//! ids are already a topological order. [`Tape::backward`] runs one reverse
//! sweep from a scalar node and returns a gradient for every registered
//! parameter (zero if the parameter does not reach the output).

use std::collections::BTreeMap;

use crate::error::{arg, Error, Result};
use crate::tensor::{conv1d_circular_batch, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `q · 1{q > 0}`.
    Relu(NodeId),
    /// `1{q > 0}`; derivative is 0 everywhere, including `q = 0`.
    HardGate,
    /// `1 / (1 + exp(-β q))`.
    SoftGate(NodeId, f64),
    Conv1d(NodeId, NodeId),
    /// `[n, c, d] → [n, c]`, `Σ_f z(n, c, f) · mask(n, c, f)`.
    PoolMasked(NodeId, Tensor),
    Reshape(NodeId),
    Sum(NodeId),
    SoftmaxCe(NodeId, Vec<usize>),
    Mse(NodeId, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// All gradients concatenated in parameter-id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.map.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    /// Registers a trainable parameter. Each id may be registered once per tape.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        debug_assert!(
            self.nodes.iter().all(|n| n.param != Some(id)),
            "parameter {id:?} registered twice"
        );
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|q| if q > 0.0 { q } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn hard_gate(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|q| if q > 0.0 { 1.0 } else { 0.0 });
        // No gradient flows through a hard gate, so the node never needs one.
        self.nodes.push(Node {
            value: v,
            op: Op::HardGate,
            param: None,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn soft_gate(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.value(a).map(|q| logistic(beta * q));
        self.push(v, Op::SoftGate(a, beta), &[a])
    }

    pub fn conv1d(&mut self, z: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = conv1d_circular_batch(self.value(z), self.value(kernel))?;
        Ok(self.push(v, Op::Conv1d(z, kernel), &[z, kernel]))
    }

    pub fn pool_masked(&mut self, z: NodeId, mask: Tensor) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.rank() != 3 || zv.shape() != mask.shape() {
            return arg(format!(
                "pool_masked: value {:?} vs mask {:?}",
                zv.shape(),
                mask.shape()
            ));
        }
        let (n, c, d) = (zv.dim(0), zv.dim(1), zv.dim(2));
        let out: Vec<f64> = zv
            .data()
            .chunks(d)
            .zip(mask.data().chunks(d))
            .map(|(zr, mr)| zr.iter().zip(mr).map(|(a, b)| a * b).sum())
            .collect();
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::PoolMasked(z, mask), &[z]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != labels.len() {
            return arg("softmax_ce: logits must be [n, k] with n labels");
        }
        let k = lv.dim(1);
        if labels.iter().any(|&y| y >= k) {
            return arg("softmax_ce: label out of range");
        }
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(v, Op::SoftmaxCe(logits, labels.to_vec()), &[logits]))
    }

    /// Mean over all entries of `(pred - target)²`.
    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return arg("mse: shape mismatch");
        }
        let v = Tensor::scalar(
            pv.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / pv.len() as f64,
        );
        Ok(self.push(v, Op::Mse(pred, target), &[pred]))
    }

    /// Every registered parameter id in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, NodeId(i))))
    }

    /// One reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.param.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.param {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.map.insert(p, g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::HardGate => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                if needs(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose()?;
                    let mut da = vec![0.0; n * k];
                    matmul_into(g.data(), bt.data(), &mut da, n, m, k);
                    accumulate(grads, *a, Tensor::new(vec![n, k], da)?)?;
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g.data(), &mut db, k, n, m);
                    accumulate(grads, *b, Tensor::new(vec![k, m], db)?)?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::Relu(a) => {
                let mask = self.value(*a).map(|q| if q > 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *a, g.mul(&mask)?)?;
            }
            Op::SoftGate(a, beta) => {
                let beta = *beta;
                let local = node.value.map(|s| beta * s * (1.0 - s));
                accumulate(grads, *a, g.mul(&local)?)?;
            }
            Op::Conv1d(z, k) => {
                let (zv, kv) = (self.value(*z), self.value(*k));
                let (n, c_in, d) = (zv.dim(0), zv.dim(1), zv.dim(2));
                let (w_cv, c_out) = (kv.dim(0), kv.dim(2));
                let mut dz = vec![0.0; zv.len()];
                let mut dk = vec![0.0; kv.len()];
                for b in 0..n {
                    for cv in 0..w_cv {
                        for i in 0..c_in {
                            let zrow = &zv.data()[(b * c_in + i) * d..(b * c_in + i + 1) * d];
                            for o in 0..c_out {
                                let grow = &g.data()[(b * c_out + o) * d..(b * c_out + o + 1) * d];
                                let kidx = (cv * c_in + i) * c_out + o;
                                let kval = kv.data()[kidx];
                                let mut acc = 0.0;
                                for (f, &gf) in grow.iter().enumerate() {
                                    let src = (f + cv) % d;
                                    acc += gf * zrow[src];
                                    dz[(b * c_in + i) * d + src] += kval * gf;
                                }
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
                if needs(*z) {
                    accumulate(grads, *z, Tensor::new(zv.shape().to_vec(), dz)?)?;
                }
                if needs(*k) {
                    accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dk)?)?;
                }
            }
            Op::PoolMasked(z, mask) => {
                let d = mask.dim(2);
                let mut dz = mask.clone();
                for (chunk, &gv) in dz.data_mut().chunks_mut(d).zip(g.data()) {
                    chunk.iter_mut().for_each(|m| *m *= gv);
                }
                accumulate(grads, *z, dz)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.reshape(shape)?)?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::filled(av.shape(), g.data()[0]))?;
            }
            Op::SoftmaxCe(a, labels) => {
                let lv = self.value(*a);
                let k = lv.dim(1);
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = Vec::with_capacity(lv.len());
                for (row, &y) in lv.data().chunks(k).zip(labels) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - m).exp() / z;
                        d.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                accumulate(grads, *a, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
            Op::Mse(a, target) => {
                let pv = self.value(*a);
                let scale = 2.0 * g.data()[0] / pv.len() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                accumulate(grads, *a, Tensor::new(pv.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, params: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return arg("finite difference step must be positive");
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(params.shape().to_vec(), out)
}

/// One evaluation of a scalar objective. `regime` fingerprints the gate and
/// ReLU decisions taken; objectives without kinks report a constant.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    pub regime: u64,
}

/// A scalar objective over a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn probe(&self, params: &Tensor) -> Result<Probe>;
    fn gradient(&self, params: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation of up to `±2h` switched a gate.
    pub near_kink: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|ad − fd| / max(|ad|, |fd|, floor)`.
pub fn relative_error(ad: f64, fd: f64, floor: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor)
}

/// Compares the analytic gradient against central differences coordinate by
/// coordinate, using the fourth-order stencil
/// `(f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h` so that steep soft gates do
/// not leave an `O(h²)` truncation error. A coordinate whose perturbation
/// changes the regime straddles a kink and is skipped. Round-off limits a
/// difference quotient to about `ε·|f|/h`; the relative-error denominator is
/// floored so that a discrepancy of that size scores exactly `tol`.
pub fn grad_check(
    objective: &impl Objective,
    params: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return arg("finite difference step must be positive");
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract("gradient length differs from parameter count".into()));
    }
    let base = objective.probe(params)?;
    let floor = f64::EPSILON * base.value.abs().max(1.0) / (h * tol);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        near_kink: Vec::new(),
        tol,
    };
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.data()[i];
        let mut at = |k: f64| -> Result<Probe> {
            probe.data_mut()[i] = orig + k * h;
            objective.probe(&probe)
        };
        let stencil = [at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?];
        probe.data_mut()[i] = orig;
        if stencil.iter().any(|p| p.regime != base.regime) {
            report.near_kink.push(i);
            continue;
        }
        let [m2, m1, p1, p2] = stencil.map(|p| p.value);
        let fd = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let err = relative_error(analytic.data()[i], fd, floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
