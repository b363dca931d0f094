//! Neural path kernels and the empirical neural tangent kernel.
//!
//! Every NPK route takes the inputs fed to the value network and one hard
//! [`GateStack`] per example, so the same code serves ordinary DGNs (gates
//! computed from the same input) and the all-ones setting (gates from `x`,
//! value input `1`).
//!
//! The conv kernel inherits the pooling weight `1/d_in` folded into each
//! bundle feature, so it is `1/d_in²` times the plain rotation sum of overlap
//! counts.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{arg, Error, Result};
use crate::network::{ArchKind, ArchSpec, GateStack, Model, Pooling, RecordOptions};
use crate::paths::{self, resnet_chain, subsets};
use crate::tensor::{dot, rotate, Tensor};

pub const DEFAULT_ENSEMBLE_CAP: usize = 12;
pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    NpkBrute,
    NpkClosed,
    NtkEmpirical,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::NpkBrute => "NPK_BRUTE",
            Provenance::NpkClosed => "NPK_CLOSED",
            Provenance::NtkEmpirical => "NTK_EMPIRICAL",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Provenance::NpkBrute, Provenance::NpkClosed, Provenance::NtkEmpirical]
            .into_iter()
            .find(|p| p.tag() == tag)
    }
}

/// Symmetric `n × n` kernel matrix with its provenance and the hash of the spec
/// it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
    pub spec_hash: String,
}

impl GramMatrix {
    pub fn new(n: usize, data: Vec<f64>, provenance: Provenance, spec_hash: String) -> Result<Self> {
        if data.len() != n * n {
            return arg(format!("{n}×{n} Gram matrix needs {} entries, got {}", n * n, data.len()));
        }
        for a in 0..n {
            for b in a + 1..n {
                let (x, y) = (data[a * n + b], data[b * n + a]);
                if (x - y).abs() > SYMMETRY_TOL * x.abs().max(y.abs()).max(1.0) {
                    return arg(format!("Gram matrix not symmetric at ({a}, {b}): {x} vs {y}"));
                }
            }
        }
        Ok(Self {
            n,
            data,
            provenance,
            spec_hash,
        })
    }

    /// Builds a Gram matrix from its upper triangle.
    fn from_upper(n: usize, entry: impl Fn(usize, usize) -> Result<f64> + Sync, provenance: Provenance, spec: &ArchSpec) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|a| (a..n).map(|b| entry(a, b)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        let mut data = vec![0.0; n * n];
        for (a, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let b = a + k;
                data[a * n + b] = v;
                data[b * n + a] = v;
            }
        }
        Ok(Self {
            n,
            data,
            provenance,
            spec_hash: spec.hash(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.data.clone()).expect("square")
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &GramMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.n, self.n, &self.data);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Smallest eigenvalue is at least `-1e-8 · trace`.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -PSD_TOL * self.trace().abs()
    }

    /// `# provenance=<tag> spec=<hash> n=<n>` then `n` rows of 17-significant-digit floats.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# provenance={} spec={} n={}", self.provenance.tag(), self.spec_hash, self.n)?;
        for row in self.data.chunks(self.n.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| format_err(0, "missing header"))??;
        let mut provenance = None;
        let mut spec_hash = None;
        let mut n = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("provenance", v)) => provenance = Provenance::from_tag(v),
                Some(("spec", v)) => spec_hash = Some(v.to_string()),
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(provenance), Some(spec_hash), Some(n)) = (provenance, spec_hash, n) else {
            return Err(format_err(0, "header must carry provenance, spec and n"));
        };
        let mut data = Vec::with_capacity(n * n);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                data.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| format_err(row as u64 + 1, &format!("bad float {v:?}: {e}")))?,
                );
            }
        }
        Self::new(n, data, provenance, spec_hash)
    }

    /// `GPGM`, version, `n`, tag and hash (length-prefixed), then `n²` little-endian f64s.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"GPGM")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.n as u64).to_le_bytes())?;
        for s in [self.provenance.tag(), self.spec_hash.as_str()] {
            out.write_all(&(s.len() as u32).to_le_bytes())?;
            out.write_all(s.as_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + k)
                .ok_or_else(|| format_err(pos as u64, "truncated Gram matrix"))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != b"GPGM" {
            return Err(format_err(0, "bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != 1 {
            return Err(format_err(4, &format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut strings = Vec::new();
        for _ in 0..2 {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            strings.push(String::from_utf8_lossy(take(len)?).into_owned());
        }
        let provenance = Provenance::from_tag(&strings[0]).ok_or_else(|| format_err(16, "unknown provenance"))?;
        let count = n
            .checked_mul(n)
            .ok_or_else(|| format_err(8, "matrix size overflows"))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        Self::new(n, data, provenance, strings.remove(1))
    }
}

fn format_err(offset: u64, msg: &str) -> Error {
    Error::Format {
        offset,
        msg: msg.to_string(),
    }
}

/// Gate stacks of a model for each row of `xs`.
pub fn gate_stacks(model: &Model, xs: &Tensor) -> Result<Vec<GateStack>> {
    Ok(model.gates(xs)?.split())
}

fn rows(xs: &Tensor, d_in: usize, gates: &[GateStack]) -> Result<Vec<Tensor>> {
    let xs = crate::network::as_batch(xs, d_in)?;
    if xs.dim(0) != gates.len() {
        return arg(format!("{} inputs but {} gate stacks", xs.dim(0), gates.len()));
    }
    for g in gates {
        g.require_hard()?;
        if g.batch_size() != 1 {
            return arg("each gate stack must hold a single example");
        }
    }
    Ok((0..xs.dim(0)).map(|i| Tensor::vector(xs.row(i).to_vec())).collect())
}

/// NPK by explicit path features: entry `(a, b) = ⟨φ(x_a), φ(x_b)⟩`.
pub fn npk_bruteforce(xs: &Tensor, gates: &[GateStack], spec: &ArchSpec) -> Result<GramMatrix> {
    let x = rows(xs, spec.d_in, gates)?;
    let phi: Vec<Tensor> = x
        .iter()
        .zip(gates)
        .map(|(xi, g)| paths::npf(xi, g, spec))
        .collect::<Result<_>>()?;
    GramMatrix::from_upper(phi.len(), |a, b| phi[a].dot(&phi[b]), Provenance::NpkBrute, spec)
}

/// `⟨G, G'⟩` for one gated layer of two single-example stacks.
fn gate_dot(a: &GateStack, b: &GateStack, g: usize) -> f64 {
    dot(a.layers[g].data(), b.layers[g].data())
}

/// `Π_l ⟨G_l, G'_l⟩`: the number of FC paths from any one input node that are
/// active for both gate stacks.
pub fn fc_overlap_product(a: &GateStack, b: &GateStack) -> u128 {
    (0..a.layers.len())
        .map(|g| gate_dot(a, b, g) as u128)
        .product()
}

fn require_fc(spec: &ArchSpec) -> Result<()> {
    if matches!(spec.kind, ArchKind::Fc { .. }) {
        Ok(())
    } else {
        Err(Error::Contract("the product formula needs an FC spec".into()))
    }
}

/// Product kernel `⟨x, x'⟩ · Π_l ⟨G_l(x), G_l(x')⟩` for FC networks.
pub fn npk_fc_product(xs: &Tensor, gates: &[GateStack], spec: &ArchSpec) -> Result<GramMatrix> {
    require_fc(spec)?;
    let x = rows(xs, spec.d_in, gates)?;
    GramMatrix::from_upper(
        x.len(),
        |a, b| Ok(dot(x[a].data(), x[b].data()) * fc_overlap_product(&gates[a], &gates[b]) as f64),
        Provenance::NpkClosed,
        spec,
    )
}

/// Cross block of the FC product kernel: `[m, n]` entries between `xs_a` and `xs_b`.
pub fn npk_fc_cross(xs_a: &Tensor, gates_a: &[GateStack], xs_b: &Tensor, gates_b: &[GateStack], spec: &ArchSpec) -> Result<Tensor> {
    require_fc(spec)?;
    let a = rows(xs_a, spec.d_in, gates_a)?;
    let b = rows(xs_b, spec.d_in, gates_b)?;
    let data: Vec<f64> = (0..a.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = &a;
            let b = &b;
            (0..b.len()).map(move |j| dot(a[i].data(), b[j].data()) * fc_overlap_product(&gates_a[i], &gates_b[j]) as f64)
        })
        .collect();
    Tensor::new(vec![a.len(), b.len()], data)
}

/// Per-input overlap counts of a conv network by dynamic programming over
/// (channel, position) states, without enumerating paths.
pub fn conv_overlap_dp(a: &GateStack, b: &GateStack, spec: &ArchSpec) -> Result<Vec<f64>> {
    let ArchKind::ConvGap {
        conv_layers, window, ..
    } = spec.kind
    else {
        return Err(Error::Contract("conv_overlap_dp needs a CONV_GAP spec".into()));
    };
    for g in [a, b] {
        g.require_hard()?;
    }
    let (d, w) = (spec.d_in, spec.width);
    let both: Vec<Vec<f64>> = (0..conv_layers)
        .map(|l| {
            a.layers[l]
                .data()
                .iter()
                .zip(b.layers[l].data())
                .map(|(x, y)| x * y)
                .collect()
        })
        .collect();
    let fc: f64 = (conv_layers..a.layers.len()).map(|g| gate_dot(a, b, g)).product();
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        // counts[u][f]: partial paths from input i reaching channel u at position f.
        let mut counts = vec![0.0; d];
        counts[i] = 1.0;
        let mut c_in = 1;
        for mask in &both {
            let mut next = vec![0.0; w * d];
            for f in 0..d {
                let mut s = 0.0;
                for c in 0..window {
                    let src = (f + c) % d;
                    for u in 0..c_in {
                        s += counts[u * d + src];
                    }
                }
                for u in 0..w {
                    next[u * d + f] = mask[u * d + f] * s;
                }
            }
            counts = next;
            c_in = w;
        }
        out.push(counts.iter().sum::<f64>() * fc);
    }
    Ok(out)
}

/// Rotation-sum form of the conv NPK:
/// `(1/d_in²) Σ_r Σ_i x(i) · rot(x', r)(i) · overlap(i, x, rot(x', r))`,
/// with `gates_of` returning the gates of any input (used on every rotation).
pub fn npk_conv_rotsum(
    xs: &Tensor,
    gates_of: &(dyn Fn(&Tensor) -> Result<GateStack> + Sync),
    spec: &ArchSpec,
) -> Result<GramMatrix> {
    match spec.kind {
        ArchKind::ConvGap {
            pooling: Pooling::Avg,
            ..
        } => {}
        ArchKind::ConvGap { .. } => {
            return Err(Error::Contract(
                "the rotation sum holds for average pooling only".into(),
            ))
        }
        _ => return Err(Error::Contract("npk_conv_rotsum needs a CONV_GAP spec".into())),
    }
    let xs = crate::network::as_batch(xs, spec.d_in)?;
    let d = spec.d_in;
    let x: Vec<Tensor> = (0..xs.dim(0)).map(|i| Tensor::vector(xs.row(i).to_vec())).collect();
    // rotated[b][r] = (rot(x_b, r), its gates); r = 0 is x_b itself.
    let rotated: Vec<Vec<(Tensor, GateStack)>> = x
        .par_iter()
        .map(|xb| {
            (0..d)
                .map(|r| {
                    let xr = rotate(xb, r)?;
                    let g = gates_of(&xr)?;
                    Ok((xr, g))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / (d * d) as f64;
    GramMatrix::from_upper(
        x.len(),
        |a, b| {
            let (xa, ga) = &rotated[a][0];
            let mut total = 0.0;
            for (xr, gr) in &rotated[b] {
                let ov = conv_overlap_dp(ga, gr, spec)?;
                total += (0..d).map(|i| xa.data()[i] * xr.data()[i] * ov[i]).sum::<f64>();
            }
            Ok(total * scale)
        },
        Provenance::NpkClosed,
        spec,
    )
}

/// The `2^b` sub-network kernels of a ResNet together with their sum.
#[derive(Debug, Clone)]
pub struct EnsembleNpk {
    pub total: GramMatrix,
    pub components: Vec<(Vec<usize>, GramMatrix)>,
}

/// `NPK^RES = Σ_J NPK^FC_J`, each term the product kernel of sub-network `J`.
pub fn npk_res_ensemble(xs: &Tensor, gates: &[GateStack], spec: &ArchSpec, cap: usize) -> Result<EnsembleNpk> {
    let ArchKind::Resnet { skips, .. } = spec.kind else {
        return Err(Error::Contract("npk_res_ensemble needs a RESNET spec".into()));
    };
    if skips > cap {
        return Err(Error::Capacity {
            count: 1u128 << skips,
            cap: 1u128 << cap,
        });
    }
    let x = rows(xs, spec.d_in, gates)?;
    let n = x.len();
    let mut components = Vec::new();
    let mut sum = vec![0.0; n * n];
    for j in subsets(skips)? {
        let chain = resnet_chain(spec, &j);
        let gated = &chain[..chain.len() - 1];
        let k = GramMatrix::from_upper(
            n,
            |a, b| {
                let prod: f64 = gated.iter().map(|&g| gate_dot(&gates[a], &gates[b], g)).product();
                Ok(dot(x[a].data(), x[b].data()) * prod)
            },
            Provenance::NpkClosed,
            spec,
        )?;
        for (s, v) in sum.iter_mut().zip(k.data()) {
            *s += v;
        }
        components.push((j, k));
    }
    Ok(EnsembleNpk {
        total: GramMatrix::new(n, sum, Provenance::NpkClosed, spec.hash())?,
        components,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    ValueNet,
    All,
}

/// Flat gradient of `Σ_k` logit `k` for one example, one vector per logit.
fn logit_gradients(model: &Model, x_f: &Tensor, x_v: &Tensor, scope: ParamScope) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let rec = model.record(
        &mut tape,
        x_f,
        x_v,
        RecordOptions {
            permutation: None,
            train_value: true,
            train_gating: scope == ParamScope::All && model.gating.is_some(),
        },
    )?;
    let out_dim = model.spec.out_dim;
    (0..out_dim)
        .map(|k| {
            let node = if out_dim == 1 {
                rec.output
            } else {
                let mut onehot = vec![0.0; out_dim];
                onehot[k] = 1.0;
                let mask = tape.constant(Tensor::new(vec![1, out_dim], onehot)?);
                let picked = tape.mul(rec.output, mask)?;
                tape.sum(picked)
            };
            Ok(tape.backward(node)?.flatten())
        })
        .collect()
}

/// `NTK(x, x') = Σ_k ⟨∇_Θ ŷ_k(x), ∇_Θ ŷ_k(x')⟩` over the chosen parameters.
/// Gated models read gates from `xs_f` and values from `xs_v`; DNNs use `xs_v`.
pub fn empirical_ntk(model: &Model, xs_f: &Tensor, xs_v: &Tensor, scope: ParamScope) -> Result<GramMatrix> {
    let xf = crate::network::as_batch(xs_f, model.spec.d_in)?;
    let xv = crate::network::as_batch(xs_v, model.spec.d_in)?;
    if xf.dim(0) != xv.dim(0) {
        return arg("gating and value inputs have different batch sizes");
    }
    let grads: Vec<Vec<Vec<f64>>> = (0..xv.dim(0))
        .into_par_iter()
        .map(|i| logit_gradients(model, &xf.slice_outer(i), &xv.slice_outer(i), scope))
        .collect::<Result<_>>()?;
    GramMatrix::from_upper(
        grads.len(),
        |a, b| Ok(grads[a].iter().zip(&grads[b]).map(|(u, v)| dot(u, v)).sum()),
        Provenance::NtkEmpirical,
        &model.spec,
    )
}

/// Infinite-width constants relating the NTK to the NPK under `±σ` value weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitConstants {
    pub c_scale: f64,
    pub kind: LimitKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LimitKind {
    /// `σ = c/√w`, `fc_const = d · σ^{2(d−1)}`.
    Fc { sigma: f64, fc_const: f64 },
    /// `σ_cv = c/√(w·w_cv)`, `σ_fc = c/√w`, and `factor = β_cv / d_in²`, the
    /// multiplier of the count-based rotation sum.
    Conv {
        sigma_cv: f64,
        sigma_fc: f64,
        beta_cv: f64,
        factor: f64,
    },
    /// `β_res^J = (|J|+2) · d_blk · σ^{2((|J|+2)d_blk − 1)}` per sub-network.
    Resnet { sigma: f64, beta: Vec<(Vec<usize>, f64)> },
}

impl LimitConstants {
    /// Multiplier turning this crate's NPK into the limiting NTK. For conv
    /// specs the NPK already carries `1/d_in²`, so the multiplier is `β_cv`.
    pub fn npk_multiplier(&self) -> Option<f64> {
        match &self.kind {
            LimitKind::Fc { fc_const, .. } => Some(*fc_const),
            LimitKind::Conv { beta_cv, .. } => Some(*beta_cv),
            LimitKind::Resnet { .. } => None,
        }
    }
}

pub fn limit_constants(spec: &ArchSpec, c_scale: f64) -> Result<LimitConstants> {
    spec.validate()?;
    if !(c_scale > 0.0) {
        return arg("c_scale must be positive");
    }
    let w = spec.width as f64;
    let kind = match spec.kind {
        ArchKind::Fc { depth } => {
            let sigma = c_scale / w.sqrt();
            LimitKind::Fc {
                sigma,
                fc_const: depth as f64 * sigma.powi(2 * (depth as i32 - 1)),
            }
        }
        ArchKind::ConvGap {
            conv_layers,
            window,
            fc_layers,
            ..
        } => {
            let sigma_cv = c_scale / (w * window as f64).sqrt();
            let sigma_fc = c_scale / w.sqrt();
            let (dc, df) = (conv_layers as i32, fc_layers as i32);
            let beta_cv = dc as f64 * sigma_cv.powi(2 * (dc - 1)) * sigma_fc.powi(2 * df)
                + df as f64 * sigma_cv.powi(2 * dc) * sigma_fc.powi(2 * (df - 1));
            LimitKind::Conv {
                sigma_cv,
                sigma_fc,
                beta_cv,
                factor: beta_cv / (spec.d_in * spec.d_in) as f64,
            }
        }
        ArchKind::Resnet { skips, block_depth } => {
            let sigma = c_scale / w.sqrt();
            let beta = subsets(skips)?
                .into_iter()
                .map(|j| {
                    let layers = (j.len() + 2) * block_depth;
                    let b = layers as f64 * sigma.powi(2 * (layers as i32 - 1));
                    (j, b)
                })
                .collect();
            LimitKind::Resnet { sigma, beta }
        }
    };
    Ok(LimitConstants { c_scale, kind })
}

/// Solves `(K + λI) α = y` and returns `K_test α`. `y` is `[n]` or `[n, k]`,
/// `k_test` is `[m, n]`; the result is `[m, k]`.
pub fn kernel_ridge_predict(gram: &GramMatrix, y: &Tensor, k_test: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return arg(format!("ridge λ must be non-negative, got {lambda}"));
    }
    let n = gram.n();
    let k = if y.rank() == 1 { 1 } else { y.dim(1) };
    if y.dim(0) != n || y.len() != n * k {
        return arg(format!("targets of shape {:?} do not match n = {n}", y.shape()));
    }
    if k_test.rank() != 2 || k_test.dim(1) != n {
        return arg(format!("test kernel of shape {:?} does not have {n} columns", k_test.shape()));
    }
    let mut a = DMatrix::from_row_slice(n, n, gram.data());
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let rhs = DMatrix::from_row_slice(n, k, y.data());
    let lu = a.lu();
    let alpha = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solver(format!("K + λI is singular (λ = {lambda})")))?;
    if !alpha.iter().all(|v| v.is_finite()) {
        return Err(Error::Solver(format!("ridge solution is not finite (λ = {lambda})")));
    }
    let kt = DMatrix::from_row_slice(k_test.dim(0), n, k_test.data());
    let pred = kt * alpha;
    let m = k_test.dim(0);
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        for j in 0..k {
            out.push(pred[(i, j)]);
        }
    }
    Tensor::new(vec![m, k], out)
}

/// Kernel ridge classifier on one-hot targets: the predicted class of each test row.
pub fn kernel_ridge_classify(gram: &GramMatrix, labels: &[usize], classes: usize, k_test: &Tensor, lambda: f64) -> Result<Vec<usize>> {
    if labels.iter().any(|&l| l >= classes) {
        return arg("label out of range");
    }
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        y[i * classes + l] = 1.0;
    }
    let pred = kernel_ridge_predict(gram, &Tensor::new(vec![labels.len(), classes], y)?, k_test, lambda)?;
    Ok((0..pred.dim(0)).map(|i| argmax(pred.row(i))).collect())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

mod ratio;
pub use ratio::{ntk_npk_ratio_study, InputKind, RatioRow, RatioStudy, RatioStudyConfig};
