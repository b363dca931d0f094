//! Finite-width study of `NTK / (const · NPK)` for FC DGNs with hard random gates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{empirical_ntk, gate_stacks, limit_constants, npk_fc_product, ParamScope};
use crate::error::{arg, Error, Result};
use crate::network::{ArchSpec, Family, Gating, InitScheme, Model, ModelKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Uniform on the unit sphere.
    UnitSphere,
    /// Absolute values of a unit-sphere draw (the positive orthant).
    PositiveUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStudyConfig {
    pub d_in: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub seeds: u64,
    pub n_inputs: usize,
    pub c_scale: f64,
    pub inputs: InputKind,
    pub base_seed: u64,
}

impl Default for RatioStudyConfig {
    fn default() -> Self {
        Self {
            d_in: 4,
            depth: 3,
            widths: vec![64, 256, 1024],
            seeds: 5,
            n_inputs: 10,
            c_scale: 1.0,
            inputs: InputKind::PositiveUnit,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub width: usize,
    /// Mean of `|NTK / (const · NPK) − 1|` over retained pairs and seeds.
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub retained: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStudy {
    pub rows: Vec<RatioRow>,
}

impl RatioStudy {
    /// Mean deviation never increases with width (rows are in width order).
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_deviation <= w[0].mean_deviation)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["width", "mean_deviation", "max_deviation", "retained", "filtered"])
            .map_err(crate::paths::csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.width.to_string(),
                format!("{:.16e}", r.mean_deviation),
                format!("{:.16e}", r.max_deviation),
                r.retained.to_string(),
                r.filtered.to_string(),
            ])
            .map_err(crate::paths::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn random_inputs(n: usize, d_in: usize, kind: InputKind, rng: &mut RngStream) -> Tensor {
    let mut data = Vec::with_capacity(n * d_in);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for x in &mut v {
            *x /= norm;
            if kind == InputKind::PositiveUnit {
                *x = x.abs();
            }
        }
        data.extend(v);
    }
    Tensor::new(vec![n, d_in], data).expect("n × d_in")
}

/// Deviations of one (seed, width) cell, after dropping pairs with `|NPK|`
/// below `1e-6 · median |NPK|`.
fn cell(cfg: &RatioStudyConfig, width: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let spec = ArchSpec::fc(cfg.d_in, width, cfg.depth, 1);
    let xs = random_inputs(cfg.n_inputs, cfg.d_in, cfg.inputs, &mut RngStream::new(seed, 100));
    let model_seed = seed ^ (width as u64).rotate_left(32);
    let model = Model::new(
        spec.clone(),
        ModelKind::new(Family::Dgn, Gating::Hard),
        InitScheme::BernoulliScaled { c_scale: cfg.c_scale },
        InitScheme::GaussianFanIn { c: 2f64.sqrt() },
        model_seed,
    )?;
    let gates = gate_stacks(&model, &xs)?;
    let npk = npk_fc_product(&xs, &gates, &spec)?;
    let ntk = empirical_ntk(&model, &xs, &xs, ParamScope::ValueNet)?;
    let k = limit_constants(&spec, cfg.c_scale)?
        .npk_multiplier()
        .expect("FC constant");
    let n = npk.n();
    let mut mags: Vec<f64> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).map(|(a, b)| npk.get(a, b).abs()).collect();
    mags.sort_by(f64::total_cmp);
    let floor = 1e-6 * mags[mags.len() / 2];
    let mut devs = Vec::new();
    let mut filtered = 0;
    for a in 0..n {
        for b in a..n {
            let p = npk.get(a, b);
            if p.abs() < floor || p == 0.0 {
                filtered += 1;
                continue;
            }
            devs.push((ntk.get(a, b) / (k * p) - 1.0).abs());
        }
    }
    Ok((devs, filtered))
}

pub fn ntk_npk_ratio_study(cfg: &RatioStudyConfig) -> Result<RatioStudy> {
    if cfg.widths.is_empty() || cfg.seeds == 0 || cfg.n_inputs == 0 {
        return arg("ratio study needs widths, seeds and inputs");
    }
    let mut rows = Vec::with_capacity(cfg.widths.len());
    for &width in &cfg.widths {
        let mut all = Vec::new();
        let mut filtered = 0;
        for s in 0..cfg.seeds {
            let (d, f) = cell(cfg, width, cfg.base_seed + s)?;
            all.extend(d);
            filtered += f;
        }
        if all.is_empty() {
            return Err(Error::Degenerate(format!(
                "every NPK entry at width {width} fell below the floor"
            )));
        }
        rows.push(RatioRow {
            width,
            mean_deviation: all.iter().sum::<f64>() / all.len() as f64,
            max_deviation: all.iter().copied().fold(0.0, f64::max),
            retained: all.len(),
            filtered,
        });
    }
    Ok(RatioStudy { rows })
}
