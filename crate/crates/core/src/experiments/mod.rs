//! Training loops and the experiment harnesses built on them.

mod harness;

pub use harness::{
    block_drop_eval, fc_layer_drop, fr_fl_gate_comparison, layer_drop_comparison, npk_ridge_accuracy,
    permutation_sweep, permutations, pretrain_gating, run_allones, AllOnesPair, AllOnesReport, BlockDrop,
    BlockDropReport, FrFlReport, FrFlSeed, LayerDropComparison, ModelSetup, PermutationRun, PermutationSweep,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Objective, ParamId, Probe, Tape};
use crate::data_io::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::kernels::argmax;
use crate::network::{Family, Gating, Model, RecordOptions};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Optimizer {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::SgdMomentum { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match *self {
            Optimizer::SgdMomentum { lr, momentum } => lr > 0.0 && unit(momentum),
            Optimizer::Adam { lr, beta1, beta2, eps } => lr > 0.0 && unit(beta1) && unit(beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftmaxCe,
    Mse,
}

/// How a gated model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Pretrained gates: the gating network is frozen, only the value network learns.
    Pg,
    /// Standalone: both networks learn together through soft gates.
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the minibatch order.
    pub seed: u64,
    pub loss: Loss,
    pub mode: TrainMode,
    /// Epochs of ReLU-network training that produce PG gates; `None` reuses `epochs`.
    pub pretrain_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(3e-4),
            batch_size: 32,
            epochs: 50,
            seed: 0,
            loss: Loss::SoftmaxCe,
            mode: TrainMode::St,
            pretrain_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// What the value network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueInput {
    /// The example itself, same as the gating network.
    #[default]
    Data,
    /// The all-ones vector.
    Ones,
    /// The all-zeros vector.
    Zeros,
}

impl ValueInput {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            ValueInput::Data => x.clone(),
            ValueInput::Ones => Tensor::ones(x.shape()),
            ValueInput::Zeros => Tensor::zeros(x.shape()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub value_input: ValueInput,
    pub permutation: Option<Vec<usize>>,
}

/// Per-step update rule state for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            optimizer,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Argument("optimizer step: parameter count changed".into()));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Argument(format!("optimizer step: gradient {i} has the wrong shape")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match self.optimizer {
                Optimizer::SgdMomentum { lr, momentum } => {
                    for ((w, b), gi) in pd.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *b = momentum * *b + gi;
                        *w -= lr * *b;
                    }
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((w, mi), vi), gi) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Fraction of training examples classified correctly during the epoch.
    pub accuracy: f64,
}

/// Outcome of one training run. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub spec_hash: String,
    pub dataset_hash: String,
    pub value_input: ValueInput,
    pub permutation: Option<Vec<usize>>,
    pub initial_test_accuracy: f64,
    pub epochs: Vec<EpochStats>,
    pub test_accuracy: f64,
    pub weight_hash: String,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// sha256 over both networks' parameters as little-endian bytes.
pub fn weight_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    let nets = std::iter::once(&model.value).chain(model.gating.as_ref());
    for w in nets {
        h.update((w.tensors.len() as u64).to_le_bytes());
        for t in &w.tensors {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn check_options(model: &Model, opts: &RunOptions) -> Result<()> {
    if model.kind.family == Family::Dnn && opts.value_input != ValueInput::Data {
        return Err(Error::Config("a DNN has a single input; the value input cannot be replaced".into()));
    }
    Ok(())
}

/// Logits for every row of `data`.
pub fn predict(model: &Model, data: &Dataset, opts: &RunOptions) -> Result<Tensor> {
    check_options(model, opts)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let xv = opts.value_input.apply(&x);
        parts.push(model.forward_permuted(&x, &xv, opts.permutation.as_deref())?);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, model.spec.out_dim]));
    }
    Tensor::concat_outer(&parts)
}

/// Fraction of `data` whose largest logit is the label.
pub fn accuracy(model: &Model, data: &Dataset, opts: &RunOptions) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = predict(model, data, opts)?;
    let correct = (0..data.len())
        .filter(|&i| argmax(logits.row(i)) == data.labels()[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        t[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], t).expect("one-hot shape")
}

/// Loss of a model on a fixed batch as a function of its flat parameters:
/// the value network, then the gating network when `include_gating` is set.
#[derive(Debug, Clone)]
pub struct LossObjective<'a> {
    pub model: &'a Model,
    pub x_f: Tensor,
    pub x_v: Tensor,
    pub labels: Vec<usize>,
    pub loss: Loss,
    pub include_gating: bool,
}

impl LossObjective<'_> {
    pub fn params(&self) -> Tensor {
        let mut flat = self.model.value.flatten().into_data();
        if self.include_gating {
            if let Some(g) = &self.model.gating {
                flat.extend(g.flatten().into_data());
            }
        }
        Tensor::vector(flat)
    }

    fn record(&self, tape: &mut Tape, p: &Tensor) -> Result<(NodeId, u64)> {
        let mut m = self.model.clone();
        let nv = m.value.num_params();
        let ng = match (&m.gating, self.include_gating) {
            (Some(g), true) => g.num_params(),
            _ => 0,
        };
        if p.len() != nv + ng {
            return Err(Error::Argument("parameter vector has the wrong length".into()));
        }
        m.value = m.value.with_flat(&p.data()[..nv])?;
        if self.include_gating {
            if let Some(g) = &m.gating {
                m.gating = Some(g.with_flat(&p.data()[nv..])?);
            }
        }
        let rec = m.record(
            tape,
            &self.x_f,
            &self.x_v,
            RecordOptions {
                permutation: None,
                train_value: true,
                train_gating: self.include_gating,
            },
        )?;
        let out = match self.loss {
            Loss::SoftmaxCe => tape.softmax_ce(rec.output, &self.labels)?,
            Loss::Mse => tape.mse(rec.output, one_hot(&self.labels, m.spec.out_dim))?,
        };
        Ok((out, rec.regime))
    }
}

impl Objective for LossObjective<'_> {
    fn probe(&self, params: &Tensor) -> Result<Probe> {
        let mut tape = Tape::new();
        let (out, regime) = self.record(&mut tape, params)?;
        Ok(Probe {
            value: tape.value(out).data()[0],
            regime,
        })
    }

    fn gradient(&self, params: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.record(&mut tape, params)?;
        Ok(Tensor::vector(tape.backward(out)?.flatten()))
    }
}

/// Minibatch training. Returns the trained model and a record of the run.
pub fn train(model: &Model, data: &DataSplit, cfg: &TrainConfig) -> Result<(Model, RunResult)> {
    train_with(model, data, cfg, &RunOptions::default())
}

pub fn train_with(model: &Model, data: &DataSplit, cfg: &TrainConfig, opts: &RunOptions) -> Result<(Model, RunResult)> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    check_options(model, opts)?;
    let gated = model.kind.family != Family::Dnn;
    let train_gating = gated && cfg.mode == TrainMode::St;
    if gated {
        match (cfg.mode, model.kind.gating) {
            (TrainMode::St, Gating::Hard) => {
                return Err(Error::Config(
                    "standalone training needs soft gates: no gradient path to gating network".into(),
                ))
            }
            (TrainMode::Pg, Gating::Soft { .. }) => {
                return Err(Error::Config("pretrained gates are applied as hard gates".into()))
            }
            _ => {}
        }
    }
    if model.spec.out_dim != data.train.classes() {
        return Err(Error::Config(format!(
            "out_dim {} does not match {} classes",
            model.spec.out_dim,
            data.train.classes()
        )));
    }
    if data.train.d_in() != model.spec.d_in || data.test.d_in() != model.spec.d_in {
        return Err(Error::Config("dataset width does not match d_in".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }

    let mut model = model.clone();
    let initial_test_accuracy = accuracy(&model, &data.test, opts)?;
    let n_value = model.value.tensors.len();
    let mut value_opt = OptimizerState::new(cfg.optimizer, &model.value.tensors);
    let mut gating_opt = model
        .gating
        .as_ref()
        .filter(|_| train_gating)
        .map(|g| OptimizerState::new(cfg.optimizer, &g.tensors));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = RngStream::new(cfg.seed, 3);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let xv = opts.value_input.apply(&x);
            let mut tape = Tape::new();
            let rec = model.record(
                &mut tape,
                &x,
                &xv,
                RecordOptions {
                    permutation: opts.permutation.as_deref(),
                    train_value: true,
                    train_gating,
                },
            )?;
            let logits = tape.value(rec.output);
            correct += (0..y.len()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
            let loss = match cfg.loss {
                Loss::SoftmaxCe => tape.softmax_ce(rec.output, &y)?,
                Loss::Mse => tape.mse(rec.output, one_hot(&y, model.spec.out_dim))?,
            };
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            let grad = |i: usize| grads.get(ParamId(i)).expect("registered parameter");
            let gv: Vec<&Tensor> = (0..n_value).map(grad).collect();
            value_opt.step(&mut model.value.tensors, &gv)?;
            if let (Some(state), Some(g)) = (gating_opt.as_mut(), model.gating.as_mut()) {
                let gg: Vec<&Tensor> = (0..g.tensors.len()).map(|i| grad(n_value + i)).collect();
                state.step(&mut g.tensors, &gg)?;
            }
        }
        epochs.push(EpochStats {
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / data.train.len() as f64,
        });
    }

    let test_accuracy = accuracy(&model, &data.test, opts)?;
    let result = RunResult {
        config: *cfg,
        spec_hash: model.spec.hash(),
        dataset_hash: data.train.hash(),
        value_input: opts.value_input,
        permutation: opts.permutation.clone(),
        initial_test_accuracy,
        epochs,
        test_accuracy,
        weight_hash: weight_hash(&model),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, result))
}
