use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{resolve_data_path, load_idx, DataSplit, Split, SyntheticKind, SyntheticTask};
use crate::error::{Error, Result};
use crate::experiments::{Loss, ModelSetup, Optimizer, TrainConfig, TrainMode};
use crate::network::{ArchKind, ArchSpec, Family, Gating, InitScheme, ModelKind, Pooling};

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        n_train: usize,
        n_test: usize,
        classes: usize,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub ledger: PathBuf,
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Seeds model initialisation and synthetic data.
    pub seed: u64,
    pub setup: ModelSetup,
    pub train: TrainConfig,
    pub gating_checkpoint: Option<PathBuf>,
    pub data: DataSource,
    pub output: OutputPaths,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    seed: u64,
    arch: ArchDoc,
    model: ModelDoc,
    init: InitDoc,
    train: TrainDoc,
    data: DataDoc,
    output: OutputDoc,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDoc {
    kind: String,
    d_in: usize,
    width: usize,
    out_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conv_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pooling: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pool_window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skips: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    block_depth: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    family: Family,
    gating: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gating_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitDoc {
    value: String,
    value_scale: f64,
    gating: String,
    gating_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDoc {
    optimizer: String,
    lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    loss: Loss,
    mode: TrainMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrain_epochs: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataDoc {
    source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_labels: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputDoc {
    dir: PathBuf,
    ledger: PathBuf,
}

fn need<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}

fn init_to_doc(s: InitScheme) -> (String, f64) {
    match s {
        InitScheme::BernoulliPmSigma { sigma } => ("bernoulli_pm_sigma".into(), sigma),
        InitScheme::BernoulliScaled { c_scale } => ("bernoulli_scaled".into(), c_scale),
        InitScheme::GaussianFanIn { c } => ("gaussian_fan_in".into(), c),
    }
}

fn init_from_doc(name: &str, scale: f64) -> Result<InitScheme> {
    Ok(match name {
        "bernoulli_pm_sigma" => InitScheme::BernoulliPmSigma { sigma: scale },
        "bernoulli_scaled" => InitScheme::BernoulliScaled { c_scale: scale },
        "gaussian_fan_in" => InitScheme::GaussianFanIn { c: scale },
        other => return Err(Error::Config(format!("unknown init scheme `{other}`"))),
    })
}

fn synthetic_name(kind: SyntheticKind) -> &'static str {
    match kind {
        SyntheticKind::GaussianBlobs => "blobs",
        SyntheticKind::TwoSpirals => "spirals",
    }
}

impl ExperimentConfig {
    /// A small FC DGN on Gaussian blobs, trained standalone with Adam.
    pub fn example() -> Self {
        Self {
            seed: 0,
            setup: ModelSetup {
                spec: ArchSpec::fc(4, 32, 4, 2),
                kind: ModelKind::new(Family::Dgn, Gating::soft_default()),
                value_init: InitScheme::GaussianFanIn { c: 2f64.sqrt() },
                gating_init: InitScheme::GaussianFanIn { c: 2f64.sqrt() },
            },
            train: TrainConfig::default(),
            gating_checkpoint: None,
            data: DataSource::Synthetic {
                kind: SyntheticKind::GaussianBlobs,
                n_train: 512,
                n_test: 256,
                classes: 2,
                noise: 1.0,
            },
            output: OutputPaths {
                dir: "runs".into(),
                ledger: "runs/ledger.csv".into(),
            },
        }
    }

    fn to_doc(&self) -> Doc {
        let spec = &self.setup.spec;
        let mut arch = ArchDoc {
            d_in: spec.d_in,
            width: spec.width,
            out_dim: spec.out_dim,
            ..Default::default()
        };
        match spec.kind {
            ArchKind::Fc { depth } => {
                arch.kind = "fc".into();
                arch.depth = Some(depth);
            }
            ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                pooling,
            } => {
                arch.kind = "conv_gap".into();
                arch.conv_layers = Some(conv_layers);
                arch.window = Some(window);
                arch.fc_layers = Some(fc_layers);
                match pooling {
                    Pooling::Avg => arch.pooling = Some("avg".into()),
                    Pooling::Max { window } => {
                        arch.pooling = Some("max".into());
                        arch.pool_window = Some(window);
                    }
                }
            }
            ArchKind::Resnet { skips, block_depth } => {
                arch.kind = "resnet".into();
                arch.skips = Some(skips);
                arch.block_depth = Some(block_depth);
            }
        }
        let (gating, beta) = match self.setup.kind.gating {
            Gating::Hard => ("hard".to_string(), None),
            Gating::Soft { beta } => ("soft".to_string(), Some(beta)),
        };
        let (value, value_scale) = init_to_doc(self.setup.value_init);
        let (ginit, gating_scale) = init_to_doc(self.setup.gating_init);
        let t = &self.train;
        let mut train = TrainDoc {
            optimizer: String::new(),
            lr: t.optimizer.lr(),
            momentum: None,
            beta1: None,
            beta2: None,
            eps: None,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            loss: t.loss,
            mode: t.mode,
            pretrain_epochs: t.pretrain_epochs,
        };
        match t.optimizer {
            Optimizer::SgdMomentum { momentum, .. } => {
                train.optimizer = "sgd_momentum".into();
                train.momentum = Some(momentum);
            }
            Optimizer::Adam { beta1, beta2, eps, .. } => {
                train.optimizer = "adam".into();
                train.beta1 = Some(beta1);
                train.beta2 = Some(beta2);
                train.eps = Some(eps);
            }
        }
        let data = match &self.data {
            DataSource::Synthetic {
                kind,
                n_train,
                n_test,
                classes,
                noise,
            } => DataDoc {
                source: synthetic_name(*kind).into(),
                n_train: Some(*n_train),
                n_test: Some(*n_test),
                classes: Some(*classes),
                noise: Some(*noise),
                ..Default::default()
            },
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => DataDoc {
                source: "idx".into(),
                train_images: Some(train_images.clone()),
                train_labels: Some(train_labels.clone()),
                test_images: Some(test_images.clone()),
                test_labels: Some(test_labels.clone()),
                ..Default::default()
            },
        };
        Doc {
            seed: self.seed,
            arch,
            model: ModelDoc {
                family: self.setup.kind.family,
                gating,
                beta,
                gating_checkpoint: self.gating_checkpoint.clone(),
            },
            init: InitDoc {
                value,
                value_scale,
                gating: ginit,
                gating_scale,
            },
            train,
            data,
            output: OutputDoc {
                dir: self.output.dir.clone(),
                ledger: self.output.ledger.clone(),
            },
        }
    }

    fn from_doc(doc: Doc) -> Result<Self> {
        let a = doc.arch;
        let kind = match a.kind.as_str() {
            "fc" => ArchKind::Fc {
                depth: need(a.depth, "arch.depth")?,
            },
            "conv_gap" => ArchKind::ConvGap {
                conv_layers: need(a.conv_layers, "arch.conv_layers")?,
                window: need(a.window, "arch.window")?,
                fc_layers: need(a.fc_layers, "arch.fc_layers")?,
                pooling: match a.pooling.as_deref().unwrap_or("avg") {
                    "avg" => Pooling::Avg,
                    "max" => Pooling::Max {
                        window: need(a.pool_window, "arch.pool_window")?,
                    },
                    other => return Err(Error::Config(format!("unknown pooling `{other}`"))),
                },
            },
            "resnet" => ArchKind::Resnet {
                skips: need(a.skips, "arch.skips")?,
                block_depth: need(a.block_depth, "arch.block_depth")?,
            },
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        let spec = ArchSpec {
            d_in: a.d_in,
            width: a.width,
            out_dim: a.out_dim,
            kind,
        };
        spec.validate().map_err(|e| match e {
            Error::Argument(msg) => Error::Config(msg),
            other => other,
        })?;

        let gating = match doc.model.gating.as_str() {
            "hard" => Gating::Hard,
            "soft" => Gating::Soft {
                beta: need(doc.model.beta, "model.beta")?,
            },
            other => return Err(Error::Config(format!("unknown gating `{other}`"))),
        };
        let t = doc.train;
        let optimizer = match t.optimizer.as_str() {
            "sgd_momentum" => Optimizer::SgdMomentum {
                lr: t.lr,
                momentum: need(t.momentum, "train.momentum")?,
            },
            "adam" => Optimizer::Adam {
                lr: t.lr,
                beta1: need(t.beta1, "train.beta1")?,
                beta2: need(t.beta2, "train.beta2")?,
                eps: need(t.eps, "train.eps")?,
            },
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        let train = TrainConfig {
            optimizer,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            loss: t.loss,
            mode: t.mode,
            pretrain_epochs: t.pretrain_epochs,
        };
        train.validate()?;

        let d = doc.data;
        let data = match d.source.as_str() {
            "idx" => DataSource::Idx {
                train_images: need(d.train_images, "data.train_images")?,
                train_labels: need(d.train_labels, "data.train_labels")?,
                test_images: need(d.test_images, "data.test_images")?,
                test_labels: need(d.test_labels, "data.test_labels")?,
            },
            name => DataSource::Synthetic {
                kind: match name {
                    "blobs" => SyntheticKind::GaussianBlobs,
                    "spirals" => SyntheticKind::TwoSpirals,
                    other => return Err(Error::Config(format!("unknown data source `{other}`"))),
                },
                n_train: need(d.n_train, "data.n_train")?,
                n_test: need(d.n_test, "data.n_test")?,
                classes: need(d.classes, "data.classes")?,
                noise: need(d.noise, "data.noise")?,
            },
        };
        Ok(Self {
            seed: doc.seed,
            setup: ModelSetup {
                spec,
                kind: ModelKind::new(doc.model.family, gating),
                value_init: init_from_doc(&doc.init.value, doc.init.value_scale)?,
                gating_init: init_from_doc(&doc.init.gating, doc.init.gating_scale)?,
            },
            train,
            gating_checkpoint: doc.model.gating_checkpoint,
            data,
            output: OutputPaths {
                dir: doc.output.dir,
                ledger: doc.output.ledger,
            },
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_doc()).expect("config document serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Overrides both the model seed and the batch-order seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Generates or loads the train and test sets.
    pub fn load_data(&self) -> Result<DataSplit> {
        match &self.data {
            DataSource::Synthetic {
                kind,
                n_train,
                n_test,
                classes,
                noise,
            } => SyntheticTask {
                kind: *kind,
                d_in: self.setup.spec.d_in,
                classes: *classes,
                noise: *noise,
                seed: self.seed,
            }
            .split(*n_train, *n_test),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(&resolve_data_path(train_images), &resolve_data_path(train_labels))?;
                let test = load_idx(&resolve_data_path(test_images), &resolve_data_path(test_labels))?;
                let classes = train.classes().max(test.classes());
                let relabel = |d: super::Dataset, split| {
                    super::Dataset::new(d.inputs().clone(), d.labels().to_vec(), classes, split)
                };
                Ok(DataSplit {
                    train: relabel(train, Split::Train)?,
                    test: relabel(test, Split::Test)?,
                })
            }
        }
    }
}
