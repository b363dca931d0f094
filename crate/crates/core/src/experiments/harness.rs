use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, train_with, RunOptions, RunResult, TrainConfig, TrainMode, ValueInput};
use crate::autodiff::Tape;
use crate::data_io::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::kernels::{gate_stacks, kernel_ridge_classify, npk_fc_cross, npk_fc_product};
use crate::network::{init_weights, ArchKind, ArchSpec, Family, Gating, InitScheme, Model, ModelKind, RecordOptions, Weights};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Architecture, model kind and initialisation of the models an experiment trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    pub spec: ArchSpec,
    pub kind: ModelKind,
    pub value_init: InitScheme,
    pub gating_init: InitScheme,
}

impl ModelSetup {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::new(self.spec.clone(), self.kind, self.value_init, self.gating_init, seed)
    }

    /// The model at `seed`, with pretrained gates when `cfg` asks for them.
    pub fn prepare(&self, data: &DataSplit, cfg: &TrainConfig, seed: u64) -> Result<Model> {
        let mut model = self.build(seed)?;
        if cfg.mode == TrainMode::Pg && self.kind.family != Family::Dnn {
            model.gating = Some(pretrain_gating(&self.spec, self.gating_init, data, cfg, seed)?);
        }
        Ok(model)
    }
}

/// Trains a ReLU network whose initial weights are exactly the gating weights
/// a DGN built with `seed` would start from, and returns the trained weights.
/// With zero epochs this is the random gating network itself.
pub fn pretrain_gating(
    spec: &ArchSpec,
    gating_init: InitScheme,
    data: &DataSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Weights> {
    let w0 = init_weights(spec, gating_init, &mut RngStream::new(seed, 2))?;
    let dnn = Model::from_parts(spec.clone(), ModelKind::dnn(), w0, None)?;
    let cfg = TrainConfig {
        epochs: cfg.pretrain_epochs.unwrap_or(cfg.epochs),
        ..*cfg
    };
    let (trained, _) = train_with(&dnn, data, &cfg, &RunOptions::default())?;
    Ok(trained.value)
}

/// All permutations of `0..n` in lexicographic order; the identity comes first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn require_gated(kind: ModelKind) -> Result<()> {
    if kind.family == Family::Dnn {
        return Err(Error::Config("this experiment needs a gated family".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllOnesPair {
    pub seed: u64,
    /// Value network reads the example.
    pub same: RunResult,
    /// Value network reads the all-ones vector.
    pub ones: RunResult,
    /// Gates reaching the value network agree bitwise between the two inputs
    /// at the shared initial gating weights.
    pub gates_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllOnesReport {
    pub pairs: Vec<AllOnesPair>,
    pub mean_same: f64,
    pub mean_ones: f64,
}

impl AllOnesReport {
    /// `|acc(x,x) − acc(x,1)|` in percentage points.
    pub fn gap_points(&self) -> f64 {
        100.0 * (self.mean_same - self.mean_ones).abs()
    }
}

/// Gate values the value network receives for `x_f`, recorded alongside `x_v`.
fn fed_gates(model: &Model, x_f: &Tensor, x_v: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, x_f, x_v, RecordOptions::default())?;
    Ok(rec.gates.iter().map(|&g| tape.value(g).clone()).collect())
}

/// Trains each seed twice from the same initial model: once with the value
/// network reading `x` and once reading the all-ones vector.
pub fn run_allones(setup: &ModelSetup, data: &DataSplit, cfg: &TrainConfig, seeds: &[u64]) -> Result<AllOnesReport> {
    require_gated(setup.kind)?;
    let pairs = seeds
        .par_iter()
        .map(|&seed| {
            let model = setup.prepare(data, cfg, seed)?;
            let x = data.test.inputs();
            let gates_identical = fed_gates(&model, x, x)? == fed_gates(&model, x, &Tensor::ones(x.shape()))?;
            let run = |value_input| {
                let opts = RunOptions {
                    value_input,
                    permutation: None,
                };
                train_with(&model, data, cfg, &opts).map(|(_, r)| r)
            };
            Ok(AllOnesPair {
                seed,
                same: run(ValueInput::Data)?,
                ones: run(ValueInput::Ones)?,
                gates_identical,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AllOnesReport {
        mean_same: mean(pairs.iter().map(|p| p.same.test_accuracy)),
        mean_ones: mean(pairs.iter().map(|p| p.ones.test_accuracy)),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRun {
    /// Position in lexicographic order; 0 is the identity.
    pub id: usize,
    pub permutation: Vec<usize>,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationSweep {
    pub runs: Vec<PermutationRun>,
}

impl PermutationSweep {
    pub fn identity_accuracy(&self) -> f64 {
        self.runs[0].result.test_accuracy
    }

    /// Mean and population standard deviation over the non-identity permutations.
    pub fn others(&self) -> (f64, f64) {
        let acc: Vec<f64> = self.runs[1..].iter().map(|r| r.result.test_accuracy).collect();
        let m = mean(acc.iter().copied());
        let var = mean(acc.iter().map(|a| (a - m) * (a - m)));
        (m, var.sqrt())
    }
}

/// One training run per permutation of the gated layers, all from the same
/// initial model. The permutation is applied during training and testing.
pub fn permutation_sweep(setup: &ModelSetup, data: &DataSplit, cfg: &TrainConfig, seed: u64) -> Result<PermutationSweep> {
    require_gated(setup.kind)?;
    let spec = &setup.spec;
    let shapes: Vec<Vec<usize>> = (0..spec.gated_layers()).map(|g| spec.gate_shape(g)).collect();
    if shapes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(
            "gate permutation needs all gated layers to have the same shape".into(),
        ));
    }
    let model = setup.prepare(data, cfg, seed)?;
    let runs = permutations(shapes.len())
        .into_par_iter()
        .enumerate()
        .map(|(id, perm)| {
            let opts = RunOptions {
                value_input: ValueInput::Data,
                permutation: Some(perm.clone()),
            };
            let (_, result) = train_with(&model, data, cfg, &opts)?;
            Ok(PermutationRun {
                id,
                permutation: perm,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PermutationSweep { runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockDrop {
    /// 1-based skippable block.
    pub block: usize,
    pub accuracy: f64,
    /// Accuracy lost by dropping the block.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDropReport {
    pub base_accuracy: f64,
    pub drops: Vec<BlockDrop>,
}

/// Test accuracy of a trained ResNet with each skippable block removed in turn.
pub fn block_drop_eval(model: &Model, test: &Dataset) -> Result<BlockDropReport> {
    let ArchKind::Resnet { skips, .. } = model.spec.kind else {
        return Err(Error::Argument("block dropping needs a RESNET model".into()));
    };
    let opts = RunOptions::default();
    let base_accuracy = accuracy(model, test, &opts)?;
    let drops = (1..=skips)
        .map(|block| {
            let acc = accuracy(&model.drop_block(block)?, test, &opts)?;
            Ok(BlockDrop {
                block,
                accuracy: acc,
                delta: base_accuracy - acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockDropReport { base_accuracy, drops })
}

/// FC model with hidden layers `layers` removed from both networks, so the
/// layer before the range feeds the layer after it directly.
pub fn fc_layer_drop(model: &Model, layers: Range<usize>) -> Result<Model> {
    let ArchKind::Fc { depth } = model.spec.kind else {
        return Err(Error::Argument("layer dropping needs an FC model".into()));
    };
    if layers.start == 0 || layers.end >= depth || layers.is_empty() {
        return Err(Error::Argument(format!(
            "can only drop hidden-to-hidden layers 1..{} of a depth-{depth} model",
            depth - 1
        )));
    }
    let keep = |w: &Weights| Weights::new(
        w.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| !layers.contains(i))
            .map(|(_, t)| t.clone())
            .collect(),
    );
    let mut spec = model.spec.clone();
    spec.kind = ArchKind::Fc {
        depth: depth - layers.len(),
    };
    Model::from_parts(spec, model.kind, keep(&model.value), model.gating.as_ref().map(keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDropComparison {
    pub seeds: Vec<u64>,
    /// Per seed, mean accuracy lost when dropping one ResNet block.
    pub resnet_deltas: Vec<f64>,
    /// Per seed, mean accuracy lost when dropping the same layers from the FC model.
    pub fc_deltas: Vec<f64>,
}

impl LayerDropComparison {
    pub fn mean_resnet_delta(&self) -> f64 {
        mean(self.resnet_deltas.iter().copied())
    }

    pub fn mean_fc_delta(&self) -> f64 {
        mean(self.fc_deltas.iter().copied())
    }
}

/// Trains a ResNet and a plain FC model of the same depth and width, then
/// compares the damage done by removing each skippable block against removing
/// the same layers from the FC model.
pub fn layer_drop_comparison(
    setup: &ModelSetup,
    data: &DataSplit,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<LayerDropComparison> {
    let ArchKind::Resnet { skips, block_depth } = setup.spec.kind else {
        return Err(Error::Argument("layer drop comparison needs a RESNET setup".into()));
    };
    let mut fc_setup = setup.clone();
    fc_setup.spec.kind = ArchKind::Fc {
        depth: (skips + 2) * block_depth,
    };
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let (res, _) = train_with(&setup.prepare(data, cfg, seed)?, data, cfg, &RunOptions::default())?;
            let (fc, _) = train_with(&fc_setup.prepare(data, cfg, seed)?, data, cfg, &RunOptions::default())?;
            let report = block_drop_eval(&res, &data.test)?;
            let fc_base = accuracy(&fc, &data.test, &RunOptions::default())?;
            let fc_drops = (1..=skips)
                .map(|j| {
                    let dropped = fc_layer_drop(&fc, j * block_depth..(j + 1) * block_depth)?;
                    Ok(fc_base - accuracy(&dropped, &data.test, &RunOptions::default())?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                mean(report.drops.iter().map(|d| d.delta)),
                mean(fc_drops),
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(LayerDropComparison {
        seeds: seeds.to_vec(),
        resnet_deltas: per_seed.iter().map(|p| p.0).collect(),
        fc_deltas: per_seed.iter().map(|p| p.1).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrFlSeed {
    pub seed: u64,
    pub fr_accuracy: f64,
    pub fl_accuracy: f64,
    pub fr_kernel_accuracy: f64,
    pub fl_kernel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrFlReport {
    pub seeds: Vec<FrFlSeed>,
}

impl FrFlReport {
    pub fn mean_fr(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.fr_accuracy))
    }

    pub fn mean_fl(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.fl_accuracy))
    }

    pub fn mean_fr_kernel(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.fr_kernel_accuracy))
    }

    pub fn mean_fl_kernel(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.fl_kernel_accuracy))
    }
}

/// Kernel ridge test accuracy with the NPK of the model's frozen gates.
/// `ridge` is the regulariser relative to the mean diagonal of the Gram matrix.
pub fn npk_ridge_accuracy(model: &Model, data: &DataSplit, ridge: f64) -> Result<f64> {
    let (xa, xb) = (data.train.inputs(), data.test.inputs());
    let ga = gate_stacks(model, xa)?;
    let gb = gate_stacks(model, xb)?;
    let gram = npk_fc_product(xa, &ga, &model.spec)?;
    let cross = npk_fc_cross(xb, &gb, xa, &ga, &model.spec)?;
    let lambda = ridge * gram.trace() / gram.n() as f64;
    let pred = kernel_ridge_classify(&gram, data.train.labels(), data.train.classes(), &cross, lambda)?;
    let correct = pred.iter().zip(data.test.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.test.len().max(1) as f64)
}

/// Frozen random (FR) against frozen learnt (FL) gates for an FC DGN. Both
/// arms start from the same value weights and train them in PG mode; the FL
/// arm's gating network is first trained as a ReLU network from the FR arm's
/// gating weights. Each arm's NPK is also scored by kernel ridge regression.
pub fn fr_fl_gate_comparison(
    setup: &ModelSetup,
    data: &DataSplit,
    cfg: &TrainConfig,
    seeds: &[u64],
    ridge: f64,
) -> Result<FrFlReport> {
    if !matches!(setup.spec.kind, ArchKind::Fc { .. }) {
        return Err(Error::Config("the FR/FL comparison uses the FC product kernel".into()));
    }
    if setup.kind != ModelKind::new(Family::Dgn, Gating::Hard) {
        return Err(Error::Config("the FR/FL comparison needs a hard-gated DGN".into()));
    }
    if cfg.mode != TrainMode::Pg {
        return Err(Error::Config("the FR/FL comparison trains with frozen gates (PG mode)".into()));
    }
    let seeds = seeds
        .par_iter()
        .map(|&seed| {
            let fr = setup.build(seed)?;
            let mut fl = fr.clone();
            fl.gating = Some(pretrain_gating(&setup.spec, setup.gating_init, data, cfg, seed)?);
            let score = |m: &Model| -> Result<(f64, f64)> {
                let (_, run) = train_with(m, data, cfg, &RunOptions::default())?;
                Ok((run.test_accuracy, npk_ridge_accuracy(m, data, ridge)?))
            };
            let (fr_accuracy, fr_kernel_accuracy) = score(&fr)?;
            let (fl_accuracy, fl_kernel_accuracy) = score(&fl)?;
            Ok(FrFlSeed {
                seed,
                fr_accuracy,
                fl_accuracy,
                fr_kernel_accuracy,
                fl_kernel_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrFlReport { seeds })
}
