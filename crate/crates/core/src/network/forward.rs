//! Tape recording of the three architectures under the three activation
//! regimes (ReLU, identity, externally gated).

use super::spec::{ArchKind, ArchSpec, Pooling};
use super::{Family, Gating};
use crate::autodiff::{NodeId, ParamId, Tape};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
pub(crate) enum Act<'a> {
    Relu,
    Linear,
    Gated(&'a [NodeId]),
}

pub(crate) struct Trace {
    pub output: NodeId,
    pub preacts: Vec<NodeId>,
    pub pool_mask: Option<Tensor>,
}

pub(crate) fn load(tape: &mut Tape, tensors: &[Tensor], base: usize, trainable: bool) -> Vec<NodeId> {
    tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if trainable {
                tape.param(ParamId(base + i), t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn activate(tape: &mut Tape, q: NodeId, act: Act<'_>, g: usize) -> Result<NodeId> {
    match act {
        Act::Relu => Ok(tape.relu(q)),
        Act::Linear => Ok(q),
        Act::Gated(gates) => {
            let gate = *gates
                .get(g)
                .ok_or_else(|| Error::Argument(format!("missing gates for layer {g}")))?;
            if tape.value(gate).shape() != tape.value(q).shape() {
                return Err(Error::Argument(format!(
                    "gate shape {:?} does not match layer {g} pre-activation {:?}",
                    tape.value(gate).shape(),
                    tape.value(q).shape()
                )));
            }
            tape.mul(q, gate)
        }
    }
}

/// Pooling mask for `z: [n, c, d]` and the smallest max-vs-runner-up margin
/// (infinite for average pooling).
pub(crate) fn pool_mask(z: &Tensor, pooling: Pooling) -> Tensor {
    let d = z.dim(2);
    match pooling {
        Pooling::Avg => Tensor::filled(z.shape(), 1.0 / d as f64),
        Pooling::Max { window } => {
            let weight = window as f64 / d as f64;
            let mut mask = Tensor::zeros(z.shape());
            for (zw, mw) in z.data().chunks(window).zip(mask.data_mut().chunks_mut(window)) {
                let mut best = 0;
                for (i, &v) in zw.iter().enumerate() {
                    if v > zw[best] {
                        best = i;
                    }
                }
                mw[best] = weight;
            }
            mask
        }
    }
}

/// Records one network. `x` must be `[n, d_in]`. Under `Act::Gated` with max
/// pooling the selection mask must be supplied in `external_pool`.
pub(crate) fn record(
    tape: &mut Tape,
    spec: &ArchSpec,
    params: &[NodeId],
    x: NodeId,
    act: Act<'_>,
    external_pool: Option<&Tensor>,
) -> Result<Trace> {
    let n = tape.value(x).dim(0);
    let mut preacts = Vec::with_capacity(spec.gated_layers());
    let mut pool_used = None;
    let output = match spec.kind {
        ArchKind::Fc { depth } => {
            let mut z = x;
            for (l, &w) in params.iter().enumerate().take(depth - 1) {
                let q = tape.matmul(z, w)?;
                preacts.push(q);
                z = activate(tape, q, act, l)?;
            }
            tape.matmul(z, params[depth - 1])?
        }
        ArchKind::ConvGap {
            conv_layers,
            fc_layers,
            pooling,
            ..
        } => {
            let mut z = tape.reshape(x, vec![n, 1, spec.d_in])?;
            for (l, &k) in params.iter().enumerate().take(conv_layers) {
                let q = tape.conv1d(z, k)?;
                preacts.push(q);
                z = activate(tape, q, act, l)?;
            }
            let mask = match (act, pooling) {
                (Act::Gated(_), Pooling::Max { .. }) => external_pool
                    .cloned()
                    .ok_or_else(|| Error::Argument("max pooling needs a selection mask".into()))?,
                _ => pool_mask(tape.value(z), pooling),
            };
            pool_used = Some(mask.clone());
            let mut h = tape.pool_masked(z, mask)?;
            for i in 0..fc_layers - 1 {
                let q = tape.matmul(h, params[conv_layers + i])?;
                preacts.push(q);
                h = activate(tape, q, act, conv_layers + i)?;
            }
            tape.matmul(h, params[conv_layers + fc_layers - 1])?
        }
        ArchKind::Resnet { skips, block_depth } => {
            let mut layer = 0;
            let mut u = x;
            for _ in 0..block_depth {
                let q = tape.matmul(u, params[layer])?;
                preacts.push(q);
                u = activate(tape, q, act, layer)?;
                layer += 1;
            }
            for _ in 0..skips {
                let mut h = u;
                for _ in 0..block_depth {
                    let q = tape.matmul(h, params[layer])?;
                    preacts.push(q);
                    h = activate(tape, q, act, layer)?;
                    layer += 1;
                }
                u = tape.add(u, h)?;
            }
            let mut h = u;
            for _ in 0..block_depth - 1 {
                let q = tape.matmul(h, params[layer])?;
                preacts.push(q);
                h = activate(tape, q, act, layer)?;
                layer += 1;
            }
            tape.matmul(h, params[layer])?
        }
    };
    Ok(Trace {
        output,
        preacts,
        pool_mask: pool_used,
    })
}

pub(crate) struct GatingTrace {
    pub gates: Vec<NodeId>,
    pub pool_mask: Option<Tensor>,
    /// Fingerprint of the ReLU / hard-gate / max-pool decisions taken.
    pub regime: u64,
}

/// Hash of every piecewise decision: the sign of each kinked pre-activation
/// and which entries max pooling selected. Equal regimes mean the same linear
/// piece of the network.
fn regime(tape: &Tape, kinked: &[NodeId], pool: Option<&Tensor>) -> u64 {
    let mut h = DefaultHasher::new();
    for &q in kinked {
        for &v in tape.value(q).data() {
            (v > 0.0).hash(&mut h);
        }
    }
    for &v in pool.map(|m| m.data()).unwrap_or(&[]) {
        (v != 0.0).hash(&mut h);
    }
    h.finish()
}

/// Records the gating side of a DGN / DLGN / shallow DLGN and turns its
/// pre-activations into gates.
pub(crate) fn record_gating(
    tape: &mut Tape,
    spec: &ArchSpec,
    family: Family,
    gating: Gating,
    params: &[NodeId],
    x: NodeId,
) -> Result<GatingTrace> {
    let (preacts, pool, relu_net) = match family {
        Family::Dnn => {
            return Err(Error::Contract("a DNN has no separate gating network".into()));
        }
        Family::Dgn | Family::Dlgn => {
            let act = if family == Family::Dgn { Act::Relu } else { Act::Linear };
            let t = record(tape, spec, params, x, act, None)?;
            (t.preacts, t.pool_mask, family == Family::Dgn)
        }
        Family::DlgnShallow => {
            let n = tape.value(x).dim(0);
            let conv = spec.conv_layers();
            let x3 = if conv > 0 {
                Some(tape.reshape(x, vec![n, 1, spec.d_in])?)
            } else {
                None
            };
            let mut pre = Vec::with_capacity(params.len());
            for (g, &p) in params.iter().enumerate() {
                let q = if g < conv {
                    tape.conv1d(x3.expect("conv input"), p)?
                } else {
                    tape.matmul(x, p)?
                };
                pre.push(q);
            }
            let pool = match spec.kind {
                ArchKind::ConvGap {
                    pooling: pooling @ Pooling::Max { .. },
                    ..
                } => Some(pool_mask(tape.value(pre[conv - 1]), pooling)),
                _ => None,
            };
            (pre, pool, false)
        }
    };
    let hard = matches!(gating, Gating::Hard);
    let kinked: &[NodeId] = if relu_net || hard { &preacts } else { &[] };
    let regime = regime(tape, kinked, pool.as_ref());
    let gates = preacts
        .iter()
        .map(|&q| match gating {
            Gating::Hard => tape.hard_gate(q),
            Gating::Soft { beta } => tape.soft_gate(q, beta),
        })
        .collect();
    Ok(GatingTrace {
        gates,
        pool_mask: pool,
        regime,
    })
}

pub(crate) fn dnn_regime(tape: &Tape, trace: &Trace) -> u64 {
    regime(tape, &trace.preacts, trace.pool_mask.as_ref())
}
