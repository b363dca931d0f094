use std::path::PathBuf;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::experiments::{Loss, ModelSetup, Optimizer, TrainConfig, TrainMode};
use crate::network::{ArchSpec, Family, Gating, InitScheme, Model, ModelKind, Pooling};

fn task(kind: SyntheticKind, d_in: usize, classes: usize, noise: f64, seed: u64) -> SyntheticTask {
    SyntheticTask {
        kind,
        d_in,
        classes,
        noise,
        seed,
    }
}

#[test]
fn hash_matches_reference_bytes() {
    let d = Dataset::new(
        Tensor::from_rows(&[vec![1.0, -2.5], vec![0.5, 3.0]]).unwrap(),
        vec![1, 0],
        2,
        Split::Train,
    )
    .unwrap();
    assert_eq!(d.hash(), "286ce0d2970ee610d8159c619641a167f08787b5f991e4c6771703e199752d76");
}

#[test]
fn hash_ignores_row_order_and_split() {
    let d = gen_synthetic(SyntheticKind::GaussianBlobs, 50, 3, 3, 0.4, 9).unwrap();
    let rev: Vec<usize> = (0..50).rev().collect();
    assert_eq!(d.subset(&rev).hash(), d.hash());
    let test = Dataset::new(d.inputs().clone(), d.labels().to_vec(), 3, Split::Test).unwrap();
    assert_eq!(test.hash(), d.hash());
    let mut labels = d.labels().to_vec();
    labels[0] = (labels[0] + 1) % 3;
    let changed = Dataset::new(d.inputs().clone(), labels, 3, Split::Train).unwrap();
    assert_ne!(changed.hash(), d.hash());
}

#[test]
fn same_seed_same_data() {
    for kind in [SyntheticKind::GaussianBlobs, SyntheticKind::TwoSpirals] {
        let a = gen_synthetic(kind, 40, 4, 2, 0.3, 5).unwrap();
        let b = gen_synthetic(kind, 40, 4, 2, 0.3, 5).unwrap();
        let c = gen_synthetic(kind, 40, 4, 2, 0.3, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}

#[test]
fn classes_balanced_within_one() {
    for (n, k) in [(10, 3), (101, 4), (7, 7), (1000, 2)] {
        let d = gen_synthetic(SyntheticKind::GaussianBlobs, n, 5, k, 1.0, 1).unwrap();
        let mut counts = vec![0usize; k];
        for &y in d.labels() {
            counts[y] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }
}

#[test]
fn noiseless_blobs_are_separated_by_their_centres() {
    for (d_in, k) in [(2, 2), (4, 3), (3, 5)] {
        let t = task(SyntheticKind::GaussianBlobs, d_in, k, 0.0, 3);
        let centres = t.blob_centres();
        for c in &centres {
            let r = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((r - BLOB_RADIUS).abs() < 1e-12);
        }
        let d = t.generate(60, Split::Train).unwrap();
        for i in 0..d.len() {
            let x = d.inputs().row(i);
            let scores: Vec<f64> = centres
                .iter()
                .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect();
            assert_eq!(crate::kernels::argmax(&scores), d.labels()[i]);
        }
    }
}

#[test]
fn spirals_carry_a_constant_feature() {
    let d = gen_synthetic(SyntheticKind::TwoSpirals, 30, 5, 2, 0.1, 0).unwrap();
    assert!((0..30).all(|i| d.inputs().row(i)[2] == 1.0));
    assert!(matches!(
        gen_synthetic(SyntheticKind::TwoSpirals, 30, 2, 2, 0.1, 0),
        Err(Error::Argument(_))
    ));
}

#[test]
fn train_and_test_draws_differ() {
    let s = task(SyntheticKind::GaussianBlobs, 3, 2, 0.5, 4).split(20, 20).unwrap();
    assert_eq!(s.train.split(), Split::Train);
    assert_eq!(s.test.split(), Split::Test);
    assert_ne!(s.train.hash(), s.test.hash());
}

#[test]
fn generator_rejects_bad_arguments() {
    let bad = [
        gen_synthetic(SyntheticKind::GaussianBlobs, 10, 2, 1, 0.1, 0),
        gen_synthetic(SyntheticKind::GaussianBlobs, 2, 2, 3, 0.1, 0),
        gen_synthetic(SyntheticKind::GaussianBlobs, 10, 2, 2, -0.1, 0),
        gen_synthetic(SyntheticKind::GaussianBlobs, 10, 0, 2, 0.1, 0),
    ];
    for r in bad {
        assert!(matches!(r, Err(Error::Argument(_))), "{r:?}");
    }
}

#[test]
fn dataset_rejects_bad_rows() {
    let x = Tensor::from_rows(&[vec![1.0], vec![f64::NAN]]).unwrap();
    assert!(Dataset::new(x, vec![0, 1], 2, Split::Train).is_err());
    let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    assert!(Dataset::new(x.clone(), vec![0, 2], 2, Split::Train).is_err());
    assert!(Dataset::new(x, vec![0], 2, Split::Train).is_err());
}

/// Four 28×28 images by hand: image `i` has pixel `j` equal to `(i + j) % 256`.
fn idx_fixture(dir: &std::path::Path) -> (PathBuf, PathBuf) {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28];
    for i in 0..4usize {
        img.extend((0..784usize).map(|j| ((i + j) % 256) as u8));
    }
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 4, 7, 2, 9, 0];
    let (pi, pl) = (dir.join("img.idx"), dir.join("lab.idx"));
    std::fs::write(&pi, img).unwrap();
    std::fs::write(&pl, lab).unwrap();
    (pi, pl)
}

fn format_offset<T: std::fmt::Debug>(r: Result<T>) -> u64 {
    match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn idx_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = idx_fixture(dir.path());
    let d = load_idx(&pi, &pl).unwrap();
    assert_eq!((d.len(), d.d_in(), d.classes()), (4, 784, 10));
    assert_eq!(d.labels(), &[7, 2, 9, 0]);
    assert_eq!(d.inputs().row(1)[0], 1.0 / 255.0);
    assert_eq!(d.inputs().row(0)[255], 1.0);
    assert_eq!(d.inputs().row(1)[255], 0.0);
}

#[test]
fn idx_round_trips_through_writer() {
    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = idx_fixture(dir.path());
    let d = load_idx(&pi, &pl).unwrap();
    let pixels: Vec<u8> = d.inputs().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let ys: Vec<u8> = d.labels().iter().map(|&y| y as u8).collect();
    let (qi, ql) = (dir.path().join("a"), dir.path().join("b"));
    write_idx(&qi, &ql, 28, 28, &pixels, &ys).unwrap();
    assert_eq!(std::fs::read(&qi).unwrap(), std::fs::read(&pi).unwrap());
    assert_eq!(std::fs::read(&ql).unwrap(), std::fs::read(&pl).unwrap());
}

#[test]
fn idx_errors_name_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = idx_fixture(dir.path());
    let empty = dir.path().join("empty");
    std::fs::write(&empty, []).unwrap();
    assert_eq!(format_offset(load_idx(&empty, &pl)), 0);

    let mut bytes = std::fs::read(&pi).unwrap();
    bytes[3] = 1;
    let bad = dir.path().join("bad");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(format_offset(load_idx(&bad, &pl)), 0);

    let bytes = std::fs::read(&pi).unwrap();
    std::fs::write(&bad, &bytes[..1000]).unwrap();
    assert_eq!(format_offset(load_idx(&bad, &pl)), 1000);

    let mut lab = std::fs::read(&pl).unwrap();
    lab[7] = 3;
    std::fs::write(&bad, &lab).unwrap();
    assert_eq!(format_offset(load_idx(&pi, &bad)), 4);

    let lab = std::fs::read(&pl).unwrap();
    std::fs::write(&bad, &lab[..10]).unwrap();
    assert_eq!(format_offset(load_idx(&pi, &bad)), 10);
}

#[test]
fn example_config_round_trips() {
    let cfg = ExperimentConfig::example();
    let text = cfg.to_toml();
    assert!(text.contains("[arch]") && text.contains("[train]"));
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_and_missing_keys() {
    let text = ExperimentConfig::example().to_toml();
    let extra = text.replace("[arch]\n", "[arch]\ncolour = 3\n");
    assert!(matches!(ExperimentConfig::from_toml(&extra), Err(Error::Config(_))));
    let missing = text.replace("depth = 4\n", "");
    let err = ExperimentConfig::from_toml(&missing).unwrap_err();
    assert!(err.to_string().contains("arch.depth"), "{err}");
    let bad_lr = text.replace("lr = 0.0003", "lr = -1.0");
    assert!(matches!(ExperimentConfig::from_toml(&bad_lr), Err(Error::Config(_))));
}

#[test]
fn seed_override_sets_both_seeds() {
    let cfg = ExperimentConfig::example().with_seed(77);
    assert_eq!((cfg.seed, cfg.train.seed), (77, 77));
}

fn arch_strategy() -> impl Strategy<Value = ArchSpec> {
    prop_oneof![
        (1usize..9, 1usize..9, 2usize..6, 1usize..5).prop_map(|(d, w, depth, o)| ArchSpec::fc(d, w, depth, o)),
        (2usize..9, 1usize..5, 1usize..3, 1usize..3, 1usize..3, 1usize..4, any::<bool>()).prop_map(
            |(d, w, cl, win, fl, o, max)| {
                let s = ArchSpec::conv_gap(d, w, cl, win.min(d - 1), fl, o);
                if max {
                    s.with_pooling(Pooling::Max { window: 1 })
                } else {
                    s
                }
            }
        ),
        (1usize..6, 1usize..6, 0usize..4, 1usize..3, 1usize..4).prop_map(|(d, w, b, k, o)| ArchSpec::resnet(d, w, b, k, o)),
    ]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-12f64..1e-3, 1e-3f64..10.0, 10.0f64..1e12]
}

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..1.0
}

fn init_strategy() -> impl Strategy<Value = InitScheme> {
    prop_oneof![
        positive().prop_map(|sigma| InitScheme::BernoulliPmSigma { sigma }),
        positive().prop_map(|c_scale| InitScheme::BernoulliScaled { c_scale }),
        positive().prop_map(|c| InitScheme::GaussianFanIn { c }),
    ]
}

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    let model = (
        arch_strategy(),
        prop_oneof![
            Just(Family::Dnn),
            Just(Family::Dgn),
            Just(Family::Dlgn),
            Just(Family::DlgnShallow)
        ],
        prop_oneof![Just(Gating::Hard), positive().prop_map(|beta| Gating::Soft { beta })],
        init_strategy(),
        init_strategy(),
    );
    let train = (
        prop_oneof![
            (positive(), unit()).prop_map(|(lr, momentum)| Optimizer::SgdMomentum { lr, momentum }),
            (positive(), unit(), unit(), positive()).prop_map(|(lr, beta1, beta2, eps)| Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps
            }),
        ],
        1usize..512,
        0usize..1000,
        any::<u64>(),
        prop_oneof![Just(Loss::SoftmaxCe), Just(Loss::Mse)],
        prop_oneof![Just(TrainMode::Pg), Just(TrainMode::St)],
    );
    let data = prop_oneof![
        (any::<bool>(), 2usize..5000, 2usize..5000, 2usize..10, 0.0f64..5.0).prop_map(|(s, a, b, k, noise)| {
            DataSource::Synthetic {
                kind: if s {
                    SyntheticKind::TwoSpirals
                } else {
                    SyntheticKind::GaussianBlobs
                },
                n_train: a,
                n_test: b,
                classes: k,
                noise,
            }
        }),
        "[a-z]{1,8}".prop_map(|s| DataSource::Idx {
            train_images: format!("{s}/train-images").into(),
            train_labels: format!("{s}/train-labels").into(),
            test_images: format!("{s}/t10k-images").into(),
            test_labels: format!("{s}/t10k-labels").into(),
        }),
    ];
    (
        any::<u64>(),
        model,
        train,
        proptest::option::of(0usize..100),
        proptest::option::of("[a-z]{1,8}\\.ckpt"),
        data,
        "[a-z]{1,6}",
    )
        .prop_map(|(seed, (spec, family, gating, vi, gi), t, pre, ckpt, data, out)| ExperimentConfig {
            seed,
            setup: ModelSetup {
                spec,
                kind: ModelKind::new(family, gating),
                value_init: vi,
                gating_init: gi,
            },
            train: TrainConfig {
                optimizer: t.0,
                batch_size: t.1,
                epochs: t.2,
                seed: t.3,
                loss: t.4,
                mode: t.5,
                pretrain_epochs: pre,
            },
            gating_checkpoint: ckpt.map(PathBuf::from),
            data,
            output: OutputPaths {
                dir: out.clone().into(),
                ledger: format!("{out}/ledger.csv").into(),
            },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn config_text_round_trips(cfg in config_strategy()) {
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}

fn odd_model(family: Family) -> Model {
    let mut m = Model::new(
        ArchSpec::fc(3, 4, 3, 2),
        ModelKind::new(family, Gating::Hard),
        InitScheme::GaussianFanIn { c: 1.0 },
        InitScheme::GaussianFanIn { c: 1.0 },
        8,
    )
    .unwrap();
    let d = m.value.tensors[0].data_mut();
    d[0] = -0.0;
    d[1] = f64::MIN_POSITIVE / 8.0;
    d[2] = f64::MAX;
    d[3] = 1.0 / 3.0;
    m
}

#[test]
fn checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for family in [Family::Dnn, Family::Dgn, Family::DlgnShallow] {
        let m = odd_model(family);
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&p, &m).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.kind, m.kind);
        let bits = |m: &Model| -> Vec<u64> {
            std::iter::once(&m.value)
                .chain(m.gating.as_ref())
                .flat_map(|w| w.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())))
                .collect()
        };
        assert_eq!(bits(&back), bits(&m));
    }
}

#[test]
fn checkpoint_errors_carry_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    write_checkpoint(&p, &odd_model(Family::Dgn)).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(format_offset(read_checkpoint(&p)), (bytes.len() - 3) as u64);

    std::fs::write(&p, b"hello\n").unwrap();
    assert_eq!(format_offset(read_checkpoint(&p)), 0);

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let header_end = text.find("kind ").unwrap();
    std::fs::write(&p, &bytes[..header_end]).unwrap();
    assert_eq!(format_offset(read_checkpoint(&p)), header_end as u64);
}

#[test]
fn ledger_appends_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub").join("ledger.csv");
    let row = |i: usize| LedgerRow {
        run_id: format!("r{i}"),
        subcommand: "sweep".into(),
        spec_hash: "abc".into(),
        seed: 3,
        permutation_id: if i == 0 { None } else { Some(i) },
        mode: "st".into(),
        test_accuracy: 0.5 + i as f64 / 100.0,
        wall_seconds: 1.25,
        timestamp: 1_700_000_000,
    };
    append_ledger(&p, &[row(0)]).unwrap();
    append_ledger(&p, &[row(1), row(2)]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.matches("run_id").count(), 1);
    assert!(text.starts_with(
        "run_id,subcommand,spec_hash,seed,permutation_id,mode,test_accuracy,wall_seconds,timestamp\n"
    ));
    assert_eq!(read_ledger(&p).unwrap(), vec![row(0), row(1), row(2)]);
}

#[test]
fn run_ids_are_stable_content_ids() {
    let a = run_id(&["train", "abc", "1"]);
    assert_eq!(a.len(), 16);
    assert_eq!(a, run_id(&["train", "abc", "1"]));
    assert_ne!(a, run_id(&["train", "ab", "c1"]));
}

#[test]
fn lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let first = DirLock::acquire(dir.path()).unwrap();
    assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Config(_))));
    drop(first);
    DirLock::acquire(dir.path()).unwrap();
}

#[test]
fn relative_paths_resolve_against_cache() {
    std::env::set_var(CACHE_ENV, "/data/cache");
    assert_eq!(resolve_data_path("mnist/x".as_ref()), PathBuf::from("/data/cache/mnist/x"));
    assert_eq!(resolve_data_path("/abs/x".as_ref()), PathBuf::from("/abs/x"));
    std::env::remove_var(CACHE_ENV);
    assert_eq!(resolve_data_path("mnist/x".as_ref()), PathBuf::from("mnist/x"));
}

#[test]
fn config_builds_its_data() {
    let cfg = ExperimentConfig::example();
    let d = cfg.load_data().unwrap();
    assert_eq!((d.train.len(), d.test.len(), d.train.d_in()), (512, 256, 4));
    assert_eq!(cfg.load_data().unwrap(), d);
}
