//! Datasets, configuration files and on-disk artifacts.

mod config;
mod idx;
mod store;

pub use config::{DataSource, ExperimentConfig, OutputPaths};
pub use idx::{load_idx, write_idx};
pub use store::{
    append_ledger, cache_dir, read_checkpoint, read_ledger, resolve_data_path, run_id, write_checkpoint,
    write_run_json, DirLock, LedgerRow, CACHE_ENV,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Distance of blob centres from the origin.
pub const BLOB_RADIUS: f64 = 2.0;
/// Revolutions made by each spiral arm.
pub const SPIRAL_TURNS: f64 = 1.0;
/// Standard deviation of the label-free coordinates spirals carry beyond the third.
pub const DISTRACTOR_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples, one row of `inputs` per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() != 2 {
            return arg("dataset inputs must be an [n, d_in] matrix");
        }
        if inputs.dim(0) != labels.len() {
            return arg(format!("{} input rows but {} labels", inputs.dim(0), labels.len()));
        }
        if !inputs.is_finite() {
            return arg("dataset inputs must be finite");
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return arg(format!("label {bad} outside 0..{classes}"));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.dim(1)
    }

    /// Rows `idx` as an `[idx.len(), d_in]` batch with their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.d_in();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("rows have width d_in");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sub-dataset with rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(idx);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    /// Each row as its own `[d_in]` vector.
    pub fn rows(&self) -> Vec<Tensor> {
        (0..self.len())
            .map(|i| Tensor::vector(self.inputs.row(i).to_vec()))
            .collect()
    }

    /// Content hash over (input row, label) pairs. Row order and the split tag
    /// do not enter; values are hashed as little-endian bytes.
    pub fn hash(&self) -> String {
        let mut rows: Vec<[u8; 32]> = (0..self.len())
            .map(|i| {
                let mut h = Sha256::new();
                for v in self.inputs.row(i) {
                    h.update(v.to_le_bytes());
                }
                h.update((self.labels[i] as u64).to_le_bytes());
                h.finalize().into()
            })
            .collect();
        rows.sort_unstable();
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.d_in() as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for r in &rows {
            h.update(r);
        }
        hex::encode(h.finalize())
    }
}

/// A training set and its held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs,
    TwoSpirals,
}

/// A seeded generator of one synthetic task. Train and test draws share the
/// task geometry (blob centres) but use different sample streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    pub kind: SyntheticKind,
    pub d_in: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn generate(&self, n: usize, split: Split) -> Result<Dataset> {
        if self.classes < 2 || n < self.classes {
            return arg(format!("invalid class count {} for n = {n}", self.classes));
        }
        if !(self.noise >= 0.0) {
            return arg("noise must be non-negative");
        }
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = RngStream::new(self.seed, stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        rng.shuffle(&mut labels);
        let rows = match self.kind {
            SyntheticKind::GaussianBlobs => {
                if self.d_in == 0 {
                    return arg("blobs need d_in ≥ 1");
                }
                let centres = self.blob_centres();
                labels
                    .iter()
                    .flat_map(|&y| {
                        centres[y]
                            .iter()
                            .map(|c| c + self.noise * rng.normal())
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            SyntheticKind::TwoSpirals => {
                if self.d_in < 3 {
                    return arg("spirals need d_in ≥ 3: two plane coordinates and a constant feature");
                }
                let mut rows = Vec::with_capacity(n * self.d_in);
                for &y in &labels {
                    let t = rng.uniform();
                    let r = 0.1 + 0.9 * t;
                    let angle = 2.0 * PI * (SPIRAL_TURNS * t + y as f64 / self.classes as f64);
                    rows.push(r * angle.cos() + self.noise * rng.normal());
                    rows.push(r * angle.sin() + self.noise * rng.normal());
                    rows.push(1.0);
                    for _ in 3..self.d_in {
                        rows.push(DISTRACTOR_SCALE * rng.normal());
                    }
                }
                rows
            }
        };
        Dataset::new(Tensor::new(vec![n, self.d_in], rows)?, labels, self.classes, split)
    }

    /// Blob centres on the sphere of radius [`BLOB_RADIUS`]; orthogonal when
    /// `classes ≤ d_in`.
    pub fn blob_centres(&self) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(self.seed, 0);
        let mut centres: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let mut c: Vec<f64> = (0..self.d_in).map(|_| rng.normal()).collect();
            if k < self.d_in {
                for prev in &centres {
                    let p: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (a, b) in c.iter_mut().zip(prev) {
                        *a -= p * b;
                    }
                }
            }
            let norm = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            centres.push(c.iter().map(|a| a / norm).collect());
        }
        for c in &mut centres {
            for a in c.iter_mut() {
                *a *= BLOB_RADIUS;
            }
        }
        centres
    }

    pub fn split(&self, n_train: usize, n_test: usize) -> Result<DataSplit> {
        Ok(DataSplit {
            train: self.generate(n_train, Split::Train)?,
            test: self.generate(n_test, Split::Test)?,
        })
    }
}

/// Training draw of a synthetic task.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    d_in: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticTask {
        kind,
        d_in,
        classes,
        noise,
        seed,
    }
    .generate(n, Split::Train)
}

#[cfg(test)]
mod tests;
