//! Exact path-space algebra.
//!
//! A path picks one input coordinate and one hidden unit per traversed layer
//! (plus a filter tap and a spatial position for convolutional layers). Its
//! feature `φ(x, p) = x(I_f0(p)) · A(x, p)` is the input coordinate it starts
//! from times the product of the gates it passes, and its value `v(p)` is the
//! product of the weights it uses. For hard gates the network output is exactly
//! `⟨φ(x), v⟩`.
//!
//! All indices are 0-based. Paths are enumerated in lexicographic order of
//! `(input, [window, channel]..., unit...)`; residual paths are grouped by the
//! set `J` of skippable blocks they pass through, with `J` in increasing
//! bitmask order.
//!
//! For convolutional networks the pooling mask is folded into `φ`, and the
//! vectors returned by [`npf`] and [`npv`] are indexed by bundle: the `d_in`
//! paths that share every filter tap and channel and differ only in their
//! input position.

use std::io::Write;

use crate::error::{arg, Error, Result};
use crate::network::{ArchKind, ArchSpec, GateStack, Model, Weights};
use crate::tensor::Tensor;

pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

/// Coordinates of one path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathIndex {
    pub input: usize,
    /// Hidden unit (channel, for conv layers) per traversed gated layer.
    pub nodes: Vec<usize>,
    /// Filter tap per conv layer.
    pub windows: Vec<usize>,
    /// Spatial position of the path at the output of each conv layer.
    pub positions: Vec<usize>,
    /// Skippable blocks (1-based) the path runs through; `None` outside ResNets.
    pub subset: Option<Vec<usize>>,
}

fn pow(base: usize, exp: usize) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.saturating_mul(base as u128);
    }
    acc
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of paths from the input layer to one output node.
pub fn count_paths(spec: &ArchSpec) -> u128 {
    let (d_in, w) = (spec.d_in, spec.width);
    match spec.kind {
        ArchKind::Fc { depth } => (d_in as u128).saturating_mul(pow(w, depth - 1)),
        ArchKind::ConvGap { .. } => (d_in as u128).saturating_mul(count_bundles(spec)),
        ArchKind::Resnet { skips, block_depth } => (0..=skips)
            .map(|i| binomial(skips, i).saturating_mul(pow(w, (i + 2) * block_depth - 1)))
            .fold(0u128, |a, b| a.saturating_add(b))
            .saturating_mul(d_in as u128),
    }
}

/// Number of bundles of a conv spec (paths up to the choice of input position);
/// for other kinds, the path count.
pub fn count_bundles(spec: &ArchSpec) -> u128 {
    match spec.kind {
        ArchKind::ConvGap {
            conv_layers,
            window,
            fc_layers,
            ..
        } => pow(window * spec.width, conv_layers).saturating_mul(pow(spec.width, fc_layers - 1)),
        _ => count_paths(spec),
    }
}

/// Path count of each residual sub-network, keyed by its block subset `J`.
pub fn paths_per_subset(spec: &ArchSpec) -> Result<Vec<(Vec<usize>, u128)>> {
    match spec.kind {
        ArchKind::Resnet { skips, block_depth } => Ok(subsets(skips)?
            .into_iter()
            .map(|j| {
                let n = (spec.d_in as u128).saturating_mul(pow(spec.width, (j.len() + 2) * block_depth - 1));
                (j, n)
            })
            .collect()),
        _ => Err(Error::Contract("only ResNets have sub-networks".into())),
    }
}

pub(crate) fn subsets(skips: usize) -> Result<Vec<Vec<usize>>> {
    if skips >= 63 {
        return arg(format!("{skips} skippable blocks is too many to enumerate"));
    }
    Ok((0u64..1 << skips)
        .map(|mask| (1..=skips).filter(|j| mask >> (j - 1) & 1 == 1).collect())
        .collect())
}

/// Parameter layers traversed by the residual sub-network `subset`.
pub(crate) fn resnet_chain(spec: &ArchSpec, subset: &[usize]) -> Vec<usize> {
    let ArchKind::Resnet { skips, block_depth } = spec.kind else {
        unreachable!("resnet_chain on a non-residual spec");
    };
    std::iter::once(0)
        .chain(subset.iter().copied())
        .chain(std::iter::once(skips + 1))
        .flat_map(|b| b * block_depth..(b + 1) * block_depth)
        .collect()
}

struct Plan {
    subset: Option<Vec<usize>>,
    radices: Vec<usize>,
}

/// Lexicographic path enumerator. Build it with [`enumerate_paths`].
pub struct PathIter<'a> {
    spec: &'a ArchSpec,
    plans: Vec<Plan>,
    plan: usize,
    digits: Vec<usize>,
    fresh: bool,
}

/// Enumerates every path of `spec`, refusing when there are more than `cap`.
pub fn enumerate_paths(spec: &ArchSpec, cap: u128) -> Result<PathIter<'_>> {
    spec.validate()?;
    let count = count_paths(spec);
    if count > cap {
        return Err(Error::Capacity { count, cap });
    }
    let (d_in, w) = (spec.d_in, spec.width);
    let plans = match spec.kind {
        ArchKind::Fc { depth } => vec![Plan {
            subset: None,
            radices: std::iter::once(d_in).chain(std::iter::repeat_n(w, depth - 1)).collect(),
        }],
        ArchKind::ConvGap {
            conv_layers,
            window,
            fc_layers,
            ..
        } => {
            let mut radices = vec![d_in];
            for _ in 0..conv_layers {
                radices.extend([window, w]);
            }
            radices.extend(std::iter::repeat_n(w, fc_layers - 1));
            vec![Plan { subset: None, radices }]
        }
        ArchKind::Resnet { skips, block_depth } => subsets(skips)?
            .into_iter()
            .map(|j| {
                let hidden = (j.len() + 2) * block_depth - 1;
                Plan {
                    subset: Some(j),
                    radices: std::iter::once(d_in).chain(std::iter::repeat_n(w, hidden)).collect(),
                }
            })
            .collect(),
    };
    let digits = vec![0; plans[0].radices.len()];
    Ok(PathIter {
        spec,
        plans,
        plan: 0,
        digits,
        fresh: true,
    })
}

impl PathIter<'_> {
    fn advance(&mut self) -> bool {
        let radices = &self.plans[self.plan].radices;
        for k in (0..self.digits.len()).rev() {
            self.digits[k] += 1;
            if self.digits[k] < radices[k] {
                return true;
            }
            self.digits[k] = 0;
        }
        self.plan += 1;
        if self.plan < self.plans.len() {
            self.digits = vec![0; self.plans[self.plan].radices.len()];
            true
        } else {
            false
        }
    }

    fn decode(&self) -> PathIndex {
        let plan = &self.plans[self.plan];
        let d = &self.digits;
        match self.spec.kind {
            ArchKind::ConvGap { conv_layers, .. } => {
                let d_in = self.spec.d_in;
                let mut windows = Vec::with_capacity(conv_layers);
                let mut nodes = Vec::with_capacity(d.len() / 2);
                let mut positions = Vec::with_capacity(conv_layers);
                let mut f = d[0];
                for l in 0..conv_layers {
                    let (c, u) = (d[1 + 2 * l], d[2 + 2 * l]);
                    f = (f + d_in - c) % d_in;
                    windows.push(c);
                    nodes.push(u);
                    positions.push(f);
                }
                nodes.extend_from_slice(&d[1 + 2 * conv_layers..]);
                PathIndex {
                    input: d[0],
                    nodes,
                    windows,
                    positions,
                    subset: None,
                }
            }
            _ => PathIndex {
                input: d[0],
                nodes: d[1..].to_vec(),
                windows: Vec::new(),
                positions: Vec::new(),
                subset: plan.subset.clone(),
            },
        }
    }
}

impl Iterator for PathIter<'_> {
    type Item = PathIndex;

    fn next(&mut self) -> Option<PathIndex> {
        if self.plan >= self.plans.len() {
            return None;
        }
        if self.fresh {
            self.fresh = false;
        } else if !self.advance() {
            return None;
        }
        Some(self.decode())
    }
}

/// A conv bundle: the `d_in` paths sharing all taps and channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub id: usize,
    /// Path ids (positions in the enumeration order), one per input position.
    pub members: Vec<usize>,
}

/// Partition of the conv paths into bundles.
pub fn bundles(spec: &ArchSpec, cap: u128) -> Result<Vec<Bundle>> {
    if !matches!(spec.kind, ArchKind::ConvGap { .. }) {
        return Err(Error::Contract("bundles exist only for conv specs".into()));
    }
    let count = count_paths(spec);
    if count > cap {
        return Err(Error::Capacity { count, cap });
    }
    let nb = count_bundles(spec) as usize;
    let mut out: Vec<Bundle> = (0..nb)
        .map(|id| Bundle {
            id,
            members: Vec::with_capacity(spec.d_in),
        })
        .collect();
    let mut key_to_bundle = std::collections::HashMap::with_capacity(nb);
    for (pid, p) in enumerate_paths(spec, cap)?.enumerate() {
        let key = (p.windows, p.nodes);
        let next = key_to_bundle.len();
        let b = *key_to_bundle.entry(key).or_insert(next);
        out[b].members.push(pid);
    }
    Ok(out)
}

fn single(gates: &GateStack) -> Result<()> {
    if gates.batch_size() != 1 {
        return arg(format!(
            "path algebra works on one example, got a batch of {}",
            gates.batch_size()
        ));
    }
    Ok(())
}

fn gate_at(gates: &GateStack, g: usize, node: usize, position: Option<usize>) -> f64 {
    let t = &gates.layers[g];
    match position {
        Some(f) => t.data()[node * t.dim(2) + f],
        None => t.data()[node],
    }
}

/// Gated layers a path traverses, as `(gated layer, node, position)`.
fn gate_coords(spec: &ArchSpec, p: &PathIndex) -> Vec<(usize, usize, Option<usize>)> {
    match spec.kind {
        ArchKind::Fc { .. } => p.nodes.iter().enumerate().map(|(g, &u)| (g, u, None)).collect(),
        ArchKind::ConvGap { conv_layers, .. } => p
            .nodes
            .iter()
            .enumerate()
            .map(|(g, &u)| (g, u, (g < conv_layers).then(|| p.positions[g])))
            .collect(),
        ArchKind::Resnet { .. } => {
            let chain = resnet_chain(spec, p.subset.as_deref().unwrap_or(&[]));
            p.nodes.iter().zip(&chain).map(|(&u, &g)| (g, u, None)).collect()
        }
    }
}

/// Pool weight of a conv path (1 for other kinds).
fn pool_weight(spec: &ArchSpec, gates: &GateStack, p: &PathIndex) -> f64 {
    match spec.kind {
        ArchKind::ConvGap { conv_layers, .. } => {
            let (u, f) = (p.nodes[conv_layers - 1], p.positions[conv_layers - 1]);
            match &gates.pool_mask {
                Some(m) => m.data()[u * spec.d_in + f],
                None => 1.0 / spec.d_in as f64,
            }
        }
        _ => 1.0,
    }
}

fn check_path(spec: &ArchSpec, p: &PathIndex) -> Result<()> {
    let ok = p.input < spec.d_in
        && p.nodes.iter().all(|&u| u < spec.width)
        && match spec.kind {
            ArchKind::Fc { depth } => p.nodes.len() == depth - 1,
            ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                ..
            } => {
                p.nodes.len() == conv_layers + fc_layers - 1
                    && p.windows.len() == conv_layers
                    && p.positions.len() == conv_layers
                    && p.windows.iter().all(|&c| c < window)
            }
            ArchKind::Resnet { skips, block_depth } => match &p.subset {
                Some(j) => {
                    j.iter().all(|&b| (1..=skips).contains(&b))
                        && p.nodes.len() == (j.len() + 2) * block_depth - 1
                }
                None => false,
            },
        };
    if ok {
        Ok(())
    } else {
        arg(format!("path {p:?} does not belong to this architecture"))
    }
}

/// `A(x, p)`: product of the hard gates a path passes through.
pub fn path_activity(gates: &GateStack, p: &PathIndex, spec: &ArchSpec) -> Result<f64> {
    gates.require_hard()?;
    single(gates)?;
    check_path(spec, p)?;
    Ok(activity(spec, gates, p))
}

fn activity(spec: &ArchSpec, gates: &GateStack, p: &PathIndex) -> f64 {
    gate_coords(spec, p)
        .into_iter()
        .map(|(g, u, f)| gate_at(gates, g, u, f))
        .product()
}

/// `v(p)`: product of the weights a path uses, ending in output node `logit`.
pub fn path_value(weights: &Weights, p: &PathIndex, spec: &ArchSpec, logit: usize) -> f64 {
    let t = &weights.tensors;
    let dense = |l: usize, from: usize, to: usize| t[l].data()[from * t[l].dim(1) + to];
    match spec.kind {
        ArchKind::ConvGap { conv_layers, .. } => {
            let mut v = 1.0;
            let mut prev = 0;
            for (l, k) in t.iter().enumerate().take(conv_layers) {
                let (c_in, c_out) = (k.dim(1), k.dim(2));
                v *= k.data()[(p.windows[l] * c_in + prev) * c_out + p.nodes[l]];
                prev = p.nodes[l];
            }
            for (k, &u) in p.nodes[conv_layers..].iter().enumerate() {
                v *= dense(conv_layers + k, prev, u);
                prev = u;
            }
            v * dense(t.len() - 1, prev, logit)
        }
        _ => {
            let chain = match spec.kind {
                ArchKind::Resnet { .. } => resnet_chain(spec, p.subset.as_deref().unwrap_or(&[])),
                _ => (0..t.len()).collect(),
            };
            let mut v = 1.0;
            let mut prev = p.input;
            for (k, &u) in p.nodes.iter().enumerate() {
                v *= dense(chain[k], prev, u);
                prev = u;
            }
            v * dense(chain[chain.len() - 1], prev, logit)
        }
    }
}

fn input_vector(x: &Tensor, d_in: usize) -> Result<&[f64]> {
    if x.len() != d_in || x.rank() > 2 || (x.rank() == 2 && x.dim(0) != 1) {
        return arg(format!("expected one input of length {d_in}, got shape {:?}", x.shape()));
    }
    Ok(x.data())
}

/// Neural path features of `x` under `gates` (one example, hard gates).
/// Conv specs return one entry per bundle with the pooling weight included.
pub fn npf(x: &Tensor, gates: &GateStack, spec: &ArchSpec) -> Result<Tensor> {
    npf_with_cap(x, gates, spec, DEFAULT_PATH_CAP)
}

pub fn npf_with_cap(x: &Tensor, gates: &GateStack, spec: &ArchSpec, cap: u128) -> Result<Tensor> {
    gates.require_hard()?;
    single(gates)?;
    let x = input_vector(x, spec.d_in)?;
    if let ArchKind::ConvGap {
        pooling: crate::network::Pooling::Max { .. },
        ..
    } = spec.kind
    {
        if gates.pool_mask.is_none() {
            return arg("max pooling needs the selection mask in the gate stack");
        }
    }
    let nb = count_bundles(spec) as usize;
    let mut phi = vec![0.0; nb];
    for (pid, p) in enumerate_paths(spec, cap)?.enumerate() {
        let a = activity(spec, gates, &p);
        if a != 0.0 {
            phi[pid % nb] += x[p.input] * a * pool_weight(spec, gates, &p);
        }
    }
    Ok(Tensor::vector(phi))
}

/// Neural path values for output node `logit`, indexed like [`npf`].
pub fn npv(weights: &Weights, spec: &ArchSpec, logit: usize) -> Result<Tensor> {
    npv_with_cap(weights, spec, logit, DEFAULT_PATH_CAP)
}

pub fn npv_with_cap(weights: &Weights, spec: &ArchSpec, logit: usize, cap: u128) -> Result<Tensor> {
    if logit >= spec.out_dim {
        return arg(format!("logit {logit} out of range for {} outputs", spec.out_dim));
    }
    if weights.tensors.len() != spec.layers().len() {
        return arg("weights do not match the architecture");
    }
    let nb = count_bundles(spec) as usize;
    let v: Vec<f64> = enumerate_paths(spec, cap)?
        .take(nb)
        .map(|p| path_value(weights, &p, spec, logit))
        .collect();
    Ok(Tensor::vector(v))
}

/// `⟨φ(x_v), v⟩` for the value network under externally supplied hard gates.
pub fn dual_output(theta_v: &Weights, x_v: &Tensor, gates: &GateStack, spec: &ArchSpec, logit: usize) -> Result<f64> {
    npf(x_v, gates, spec)?.dot(&npv(theta_v, spec, logit)?)
}

/// `⟨φ(x_v), v⟩` for a model whose gates are computed from `x_f`.
pub fn output_via_paths(model: &Model, x_f: &Tensor, x_v: &Tensor, logit: usize) -> Result<f64> {
    let gates = model.gates(x_f)?;
    single(&gates)?;
    dual_output(&model.value, x_v, &gates, &model.spec, logit)
}

/// Paths active for both inputs: in total and split by input node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapTable {
    pub total: u128,
    pub per_input: Vec<u128>,
}

/// Counts the paths active under both gate stacks by enumeration.
pub fn overlap(gates_x: &GateStack, gates_y: &GateStack, spec: &ArchSpec) -> Result<OverlapTable> {
    overlap_with_cap(gates_x, gates_y, spec, DEFAULT_PATH_CAP)
}

pub fn overlap_with_cap(gates_x: &GateStack, gates_y: &GateStack, spec: &ArchSpec, cap: u128) -> Result<OverlapTable> {
    for g in [gates_x, gates_y] {
        g.require_hard()?;
        single(g)?;
    }
    let mut per_input = vec![0u128; spec.d_in];
    for p in enumerate_paths(spec, cap)? {
        if activity(spec, gates_x, &p) == 1.0 && activity(spec, gates_y, &p) == 1.0 {
            per_input[p.input] += 1;
        }
    }
    Ok(OverlapTable {
        total: per_input.iter().sum(),
        per_input,
    })
}

/// Writes `path,phi,v` rows.
pub fn write_npf_csv<W: Write>(out: W, phi: &Tensor, v: &Tensor) -> Result<()> {
    if phi.len() != v.len() {
        return arg("φ and v have different lengths");
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "phi", "v"]).map_err(csv_err)?;
    for (i, (a, b)) in phi.data().iter().zip(v.data()).enumerate() {
        w.write_record([i.to_string(), format!("{a:.16e}"), format!("{b:.16e}")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `input,overlap` rows followed by a `total` row.
pub fn write_overlap_csv<W: Write>(out: W, table: &OverlapTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input", "overlap"]).map_err(csv_err)?;
    for (i, c) in table.per_input.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()]).map_err(csv_err)?;
    }
    w.write_record(["total".to_string(), table.total.to_string()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
