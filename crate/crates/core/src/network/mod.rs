//! Gated network models: plain ReLU networks (DNN), deep gated networks (DGN)
//! whose ReLU gating network switches the GaLUs of a separate value network,
//! and their linearly gated variants (DLGN, shallow DLGN).
//!
//! All networks are bias-free. Inputs are `[n, d_in]` batches (a rank-1 input
//! is treated as a batch of one); outputs are `[n, out_dim]` logits.

mod forward;
pub mod spec;

use serde::{Deserialize, Serialize};

pub use spec::{ArchKind, ArchSpec, LayerShape, Pooling};

use crate::autodiff::{logistic, NodeId, Tape};
use crate::error::{arg, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use forward::{load, record, record_gating, Act};

pub const DEFAULT_BETA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dnn,
    Dgn,
    Dlgn,
    DlgnShallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Gating {
    Hard,
    Soft { beta: f64 },
}

impl Gating {
    pub fn soft_default() -> Self {
        Gating::Soft { beta: DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelKind {
    pub family: Family,
    pub gating: Gating,
}

impl ModelKind {
    pub fn dnn() -> Self {
        Self {
            family: Family::Dnn,
            gating: Gating::Hard,
        }
    }

    pub fn new(family: Family, gating: Gating) -> Self {
        Self { family, gating }
    }
}

/// `1{q > 0}` under hard gating, `logistic(β q)` under soft gating.
pub fn gate_fn(q: f64, gating: Gating) -> f64 {
    match gating {
        Gating::Hard => {
            if q > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Gating::Soft { beta } => logistic(beta * q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InitScheme {
    /// Every weight i.i.d. uniform on `{-σ, +σ}`.
    BernoulliPmSigma { sigma: f64 },
    /// `{-σ, +σ}` with `σ = c/√w` for dense layers and `c/√(w·w_cv)` for conv layers.
    BernoulliScaled { c_scale: f64 },
    /// `N(0, c² / fan_in)`.
    GaussianFanIn { c: f64 },
}

impl InitScheme {
    fn check(&self) -> Result<()> {
        let ok = match *self {
            InitScheme::BernoulliPmSigma { sigma } => sigma > 0.0,
            InitScheme::BernoulliScaled { c_scale } => c_scale > 0.0,
            InitScheme::GaussianFanIn { c } => c > 0.0,
        };
        if ok {
            Ok(())
        } else {
            arg(format!("init scale must be positive: {self:?}"))
        }
    }

    fn draw(&self, layer: &LayerShape, width: usize, rng: &mut RngStream) -> Tensor {
        let shape = layer.tensor_shape();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match *self {
            InitScheme::BernoulliPmSigma { sigma } => (0..n).map(|_| sigma * rng.sign()).collect(),
            InitScheme::BernoulliScaled { c_scale } => {
                let sigma = match layer {
                    LayerShape::Dense { .. } => c_scale / (width as f64).sqrt(),
                    LayerShape::Conv { window, .. } => c_scale / ((width * window) as f64).sqrt(),
                };
                (0..n).map(|_| sigma * rng.sign()).collect()
            }
            InitScheme::GaussianFanIn { c } => {
                let std = c / (layer.fan_in() as f64).sqrt();
                (0..n).map(|_| std * rng.normal()).collect()
            }
        };
        Tensor::new(shape, data).expect("layer shape is consistent")
    }
}

/// Per-layer parameter tensors in forward order. Dense layers are
/// `[fan_in, fan_out]`, conv layers `[w_cv, c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tensors: Vec<Tensor>,
}

impl Weights {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Tensor {
        Tensor::vector(self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
    }

    /// Rebuilds weights with the shapes of `self` from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Weights> {
        if flat.len() != self.num_params() {
            return arg(format!(
                "flat vector has {} entries, weights need {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let part = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), part)
            })
            .collect::<Result<_>>()?;
        Ok(Weights { tensors })
    }

    fn check_shapes(&self, expected: &[LayerShape]) -> Result<()> {
        if self.tensors.len() != expected.len() {
            return arg(format!(
                "expected {} weight tensors, got {}",
                expected.len(),
                self.tensors.len()
            ));
        }
        for (i, (t, l)) in self.tensors.iter().zip(expected).enumerate() {
            if t.shape() != l.tensor_shape().as_slice() {
                return arg(format!(
                    "layer {i}: weight shape {:?}, expected {:?}",
                    t.shape(),
                    l.tensor_shape()
                ));
            }
        }
        Ok(())
    }
}

pub fn init_weights(spec: &ArchSpec, scheme: InitScheme, rng: &mut RngStream) -> Result<Weights> {
    spec.validate()?;
    scheme.check()?;
    Ok(Weights::new(
        spec.layers()
            .iter()
            .map(|l| scheme.draw(l, spec.width, rng))
            .collect(),
    ))
}

pub fn init_shallow_gating(spec: &ArchSpec, scheme: InitScheme, rng: &mut RngStream) -> Result<Weights> {
    spec.validate()?;
    scheme.check()?;
    Ok(Weights::new(
        spec.shallow_gate_layers()
            .iter()
            .map(|l| scheme.draw(l, spec.width, rng))
            .collect(),
    ))
}

/// Gate values per gated layer, each with a leading batch axis (`[n, w]` for
/// dense layers, `[n, w, d_in]` for conv layers), plus the pooling selection
/// mask `[n, w, d_in]` when the architecture uses max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStack {
    pub layers: Vec<Tensor>,
    pub pool_mask: Option<Tensor>,
    pub hard: bool,
}

impl GateStack {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |t| t.dim(0))
    }

    /// Gates of example `i` as a batch of one.
    pub fn example(&self, i: usize) -> GateStack {
        GateStack {
            layers: self.layers.iter().map(|t| t.slice_outer(i)).collect(),
            pool_mask: self.pool_mask.as_ref().map(|m| m.slice_outer(i)),
            hard: self.hard,
        }
    }

    /// Splits a batched stack into one stack per example.
    pub fn split(&self) -> Vec<GateStack> {
        (0..self.batch_size()).map(|i| self.example(i)).collect()
    }

    pub fn require_hard(&self) -> Result<()> {
        let binary = self
            .layers
            .iter()
            .all(|t| t.data().iter().all(|&g| g == 0.0 || g == 1.0));
        if self.hard && binary {
            Ok(())
        } else {
            Err(Error::Contract("exact path algebra needs hard (binary) gates".into()))
        }
    }

    fn check(&self, spec: &ArchSpec, n: usize) -> Result<()> {
        if self.layers.len() != spec.gated_layers() {
            return arg(format!(
                "gate stack has {} layers, architecture has {}",
                self.layers.len(),
                spec.gated_layers()
            ));
        }
        for (g, t) in self.layers.iter().enumerate() {
            let mut want = vec![n];
            want.extend(spec.gate_shape(g));
            if t.shape() != want.as_slice() {
                return arg(format!("gate layer {g}: shape {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }
}

/// Reorders gated layers: layer `l` of the result carries the gates of layer `perm[l]`.
pub fn apply_permutation(gates: &GateStack, perm: &[usize]) -> Result<GateStack> {
    check_permutation(perm, gates.layers.len())?;
    for (l, &src) in perm.iter().enumerate() {
        if gates.layers[l].shape() != gates.layers[src].shape() {
            return arg(format!(
                "cannot move gates of layer {src} {:?} into layer {l} {:?}",
                gates.layers[src].shape(),
                gates.layers[l].shape()
            ));
        }
    }
    Ok(GateStack {
        layers: perm.iter().map(|&src| gates.layers[src].clone()).collect(),
        pool_mask: gates.pool_mask.clone(),
        hard: gates.hard,
    })
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return arg(format!("permutation of length {} for {n} layers", perm.len()));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return arg(format!("{perm:?} is not a permutation of 0..{n}"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn as_batch(x: &Tensor, d_in: usize) -> Result<Tensor> {
    match x.rank() {
        1 if x.len() == d_in => x.reshape(vec![1, d_in]),
        2 if x.dim(1) == d_in => Ok(x.clone()),
        _ => arg(format!("input shape {:?} does not match d_in = {d_in}", x.shape())),
    }
}

/// Output of a plain ReLU network together with its ReLU masks.
#[derive(Debug, Clone)]
pub struct DnnForward {
    pub y: Tensor,
    pub gates: GateStack,
    pub preacts: Vec<Tensor>,
}

pub fn forward_dnn(weights: &Weights, x: &Tensor, spec: &ArchSpec) -> Result<DnnForward> {
    spec.validate()?;
    weights.check_shapes(&spec.layers())?;
    let x = as_batch(x, spec.d_in)?;
    let mut tape = Tape::new();
    let params = load(&mut tape, &weights.tensors, 0, false);
    let xn = tape.constant(x);
    let trace = record(&mut tape, spec, &params, xn, Act::Relu, None)?;
    let preacts: Vec<Tensor> = trace.preacts.iter().map(|&q| tape.value(q).clone()).collect();
    let gates = GateStack {
        layers: preacts.iter().map(|q| q.map(|v| gate_fn(v, Gating::Hard))).collect(),
        pool_mask: pool_mask_if_max(spec, trace.pool_mask),
        hard: true,
    };
    Ok(DnnForward {
        y: tape.value(trace.output).clone(),
        gates,
        preacts,
    })
}

fn pool_mask_if_max(spec: &ArchSpec, mask: Option<Tensor>) -> Option<Tensor> {
    match spec.kind {
        ArchKind::ConvGap {
            pooling: Pooling::Max { .. },
            ..
        } => mask,
        _ => None,
    }
}

/// Gates produced by a gating network `theta_f` on `x`. For [`Family::DlgnShallow`]
/// `theta_f` holds the per-layer shallow maps ([`ArchSpec::shallow_gate_layers`]).
pub fn gates_of(
    theta_f: &Weights,
    x: &Tensor,
    family: Family,
    gating: Gating,
    spec: &ArchSpec,
) -> Result<GateStack> {
    spec.validate()?;
    if family == Family::Dnn {
        return Err(Error::Contract(
            "gates_of needs a gated family; use forward_dnn for ReLU masks".into(),
        ));
    }
    check_gating_shapes(theta_f, family, spec)?;
    let x = as_batch(x, spec.d_in)?;
    let mut tape = Tape::new();
    let params = load(&mut tape, &theta_f.tensors, 0, false);
    let xn = tape.constant(x);
    let trace = record_gating(&mut tape, spec, family, gating, &params, xn)?;
    Ok(GateStack {
        layers: trace.gates.iter().map(|&g| tape.value(g).clone()).collect(),
        pool_mask: pool_mask_if_max(spec, trace.pool_mask),
        hard: matches!(gating, Gating::Hard),
    })
}

fn check_gating_shapes(theta_f: &Weights, family: Family, spec: &ArchSpec) -> Result<()> {
    if family == Family::DlgnShallow {
        theta_f.check_shapes(&spec.shallow_gate_layers())
    } else {
        theta_f.check_shapes(&spec.layers())
    }
}

/// GaLU value network: `z_l = (Θ_l z_{l-1}) ⊙ G_l`, with `gates` supplied externally.
pub fn forward_gated(theta_v: &Weights, x_w: &Tensor, gates: &GateStack, spec: &ArchSpec) -> Result<Tensor> {
    spec.validate()?;
    theta_v.check_shapes(&spec.layers())?;
    let x = as_batch(x_w, spec.d_in)?;
    gates.check(spec, x.dim(0))?;
    let mut tape = Tape::new();
    let params = load(&mut tape, &theta_v.tensors, 0, false);
    let xn = tape.constant(x);
    let gate_nodes: Vec<NodeId> = gates.layers.iter().map(|g| tape.constant(g.clone())).collect();
    let trace = record(
        &mut tape,
        spec,
        &params,
        xn,
        Act::Gated(&gate_nodes),
        gates.pool_mask.as_ref(),
    )?;
    Ok(tape.value(trace.output).clone())
}

/// Convolutional forward pass: ReLU network when `gates` is `None`, GaLU network otherwise.
pub fn forward_conv_gap(
    weights: &Weights,
    x: &Tensor,
    spec: &ArchSpec,
    gates: Option<&GateStack>,
) -> Result<(Tensor, GateStack)> {
    if !matches!(spec.kind, ArchKind::ConvGap { .. }) {
        return Err(Error::Contract("forward_conv_gap needs a CONV_GAP spec".into()));
    }
    forward_either(weights, x, spec, gates)
}

/// Residual forward pass: ReLU network when `gates` is `None`, GaLU network otherwise.
pub fn forward_resnet(
    weights: &Weights,
    x: &Tensor,
    spec: &ArchSpec,
    gates: Option<&GateStack>,
) -> Result<(Tensor, GateStack)> {
    if !matches!(spec.kind, ArchKind::Resnet { .. }) {
        return Err(Error::Contract("forward_resnet needs a RESNET spec".into()));
    }
    forward_either(weights, x, spec, gates)
}

fn forward_either(
    weights: &Weights,
    x: &Tensor,
    spec: &ArchSpec,
    gates: Option<&GateStack>,
) -> Result<(Tensor, GateStack)> {
    match gates {
        None => {
            let out = forward_dnn(weights, x, spec)?;
            Ok((out.y, out.gates))
        }
        Some(g) => Ok((forward_gated(weights, x, g, spec)?, g.clone())),
    }
}

/// Layer indices (into [`ArchSpec::layers`]) of ResNet middle block `j` (1-based, `1..=skips`).
pub fn resnet_block_layers(spec: &ArchSpec, j: usize) -> Result<std::ops::Range<usize>> {
    match spec.kind {
        ArchKind::Resnet { skips, block_depth } => {
            if j == 0 || j > skips {
                return arg(format!(
                    "block {j} is not skippable; skippable blocks are 1..={skips}"
                ));
            }
            Ok(j * block_depth..(j + 1) * block_depth)
        }
        _ => Err(Error::Contract("only ResNets have droppable blocks".into())),
    }
}

/// Replaces skippable block `j` with the zero map; its skip connection keeps the
/// signal flowing.
pub fn drop_block(weights: &Weights, spec: &ArchSpec, j: usize) -> Result<Weights> {
    let range = resnet_block_layers(spec, j)?;
    let mut out = weights.clone();
    for t in &mut out.tensors[range] {
        *t = Tensor::zeros(t.shape());
    }
    Ok(out)
}

/// A DNN, or a gated model with separate gating and value networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub kind: ModelKind,
    /// The ReLU network of a DNN, or the value (weight) network of a gated model.
    pub value: Weights,
    /// The gating (feature) network; `None` for DNNs.
    pub gating: Option<Weights>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOptions<'a> {
    pub permutation: Option<&'a [usize]>,
    pub train_value: bool,
    pub train_gating: bool,
}

/// Handles to a model recorded on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub output: NodeId,
    pub value_params: Vec<NodeId>,
    pub gating_params: Vec<NodeId>,
    pub gates: Vec<NodeId>,
    /// Fingerprint of the ReLU / hard-gate / max-pool decisions taken; two
    /// recordings with the same regime lie on the same linear piece.
    pub regime: u64,
}

impl Model {
    pub fn new(
        spec: ArchSpec,
        kind: ModelKind,
        value_init: InitScheme,
        gating_init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if let Gating::Soft { beta } = kind.gating {
            if !(beta > 0.0) {
                return arg("soft gating needs β > 0");
            }
        }
        let value = init_weights(&spec, value_init, &mut RngStream::new(seed, 1))?;
        let mut grng = RngStream::new(seed, 2);
        let gating = match kind.family {
            Family::Dnn => None,
            Family::DlgnShallow => Some(init_shallow_gating(&spec, gating_init, &mut grng)?),
            _ => Some(init_weights(&spec, gating_init, &mut grng)?),
        };
        Ok(Self {
            spec,
            kind,
            value,
            gating,
        })
    }

    pub fn from_parts(spec: ArchSpec, kind: ModelKind, value: Weights, gating: Option<Weights>) -> Result<Self> {
        spec.validate()?;
        value.check_shapes(&spec.layers())?;
        match (&gating, kind.family) {
            (None, Family::Dnn) => {}
            (Some(g), f) if f != Family::Dnn => check_gating_shapes(g, f, &spec)?,
            _ => return arg("gating weights must be present exactly for gated families"),
        }
        Ok(Self {
            spec,
            kind,
            value,
            gating,
        })
    }

    pub fn num_value_params(&self) -> usize {
        self.value.tensors.len()
    }

    /// Records the model on `tape`. DNNs read `x_v`; gated models feed `x_f`
    /// to the gating network and `x_v` to the value network.
    pub fn record(&self, tape: &mut Tape, x_f: &Tensor, x_v: &Tensor, opts: RecordOptions<'_>) -> Result<Recorded> {
        let xv = as_batch(x_v, self.spec.d_in)?;
        let value_params = load(tape, &self.value.tensors, 0, opts.train_value);
        match (&self.gating, self.kind.family) {
            (None, Family::Dnn) => {
                if opts.permutation.is_some() {
                    return Err(Error::Config("a DNN gates itself; gate permutation needs a gated family".into()));
                }
                let xn = tape.constant(xv);
                let trace = record(tape, &self.spec, &value_params, xn, Act::Relu, None)?;
                let regime = forward::dnn_regime(tape, &trace);
                Ok(Recorded {
                    output: trace.output,
                    value_params,
                    gating_params: Vec::new(),
                    gates: Vec::new(),
                    regime,
                })
            }
            (Some(gw), family) => {
                let xf = as_batch(x_f, self.spec.d_in)?;
                if xf.dim(0) != xv.dim(0) {
                    return arg("gating and value inputs have different batch sizes");
                }
                let base = self.value.tensors.len();
                let gating_params = load(tape, &gw.tensors, base, opts.train_gating);
                let xfn = tape.constant(xf);
                let g = record_gating(tape, &self.spec, family, self.kind.gating, &gating_params, xfn)?;
                let gates = match opts.permutation {
                    Some(perm) => {
                        check_permutation(perm, g.gates.len())?;
                        for (l, &src) in perm.iter().enumerate() {
                            if tape.value(g.gates[l]).shape() != tape.value(g.gates[src]).shape() {
                                return Err(Error::Config(format!(
                                    "gated layers {l} and {src} have different shapes"
                                )));
                            }
                        }
                        perm.iter().map(|&src| g.gates[src]).collect()
                    }
                    None => g.gates.clone(),
                };
                let xvn = tape.constant(xv);
                let trace = record(
                    tape,
                    &self.spec,
                    &value_params,
                    xvn,
                    Act::Gated(&gates),
                    g.pool_mask.as_ref(),
                )?;
                Ok(Recorded {
                    output: trace.output,
                    value_params,
                    gating_params,
                    gates,
                    regime: g.regime,
                })
            }
            _ => Err(Error::Contract("gating weights inconsistent with model family".into())),
        }
    }

    /// Gates the model applies for input `x` (the ReLU masks for a DNN).
    pub fn gates(&self, x: &Tensor) -> Result<GateStack> {
        match &self.gating {
            None => Ok(forward_dnn(&self.value, x, &self.spec)?.gates),
            Some(g) => gates_of(g, x, self.kind.family, self.kind.gating, &self.spec),
        }
    }

    pub fn forward(&self, x_f: &Tensor, x_v: &Tensor) -> Result<Tensor> {
        self.forward_permuted(x_f, x_v, None)
    }

    pub fn forward_permuted(&self, x_f: &Tensor, x_v: &Tensor, perm: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(
            &mut tape,
            x_f,
            x_v,
            RecordOptions {
                permutation: perm,
                ..Default::default()
            },
        )?;
        Ok(tape.value(rec.output).clone())
    }

    /// Same model with skippable block `j` zeroed in both networks.
    pub fn drop_block(&self, j: usize) -> Result<Model> {
        let value = drop_block(&self.value, &self.spec, j)?;
        let gating = match (&self.gating, self.kind.family) {
            (None, _) => None,
            (Some(g), Family::DlgnShallow) => {
                let range = resnet_block_layers(&self.spec, j)?;
                let mut g = g.clone();
                // Shallow map `g` feeds gated layer `g`, which is parameter layer `g`.
                for t in &mut g.tensors[range] {
                    *t = Tensor::zeros(t.shape());
                }
                Some(g)
            }
            (Some(g), _) => Some(drop_block(g, &self.spec, j)?),
        };
        Ok(Model {
            spec: self.spec.clone(),
            kind: self.kind,
            value,
            gating,
        })
    }
}

#[cfg(test)]
mod tests;
