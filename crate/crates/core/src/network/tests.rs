use super::*;
use crate::tensor::{rotate, rotate_channels};
use proptest::prelude::*;

fn w(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn toy_spec() -> ArchSpec {
    ArchSpec::fc(1, 2, 3, 1)
}

fn toy_value() -> Weights {
    Weights::new(vec![
        w(&[1, 2], &[1.0, -1.0]),
        // Column j holds the weights into unit j: [[1, 0.5], [-0.5, 1]] as rows in, cols out.
        w(&[2, 2], &[1.0, 0.5, -0.5, 1.0]),
        w(&[2, 1], &[1.0, 1.0]),
    ])
}

fn toy_gates() -> GateStack {
    GateStack {
        layers: vec![w(&[1, 2], &[1.0, 0.0]), w(&[1, 2], &[1.0, 1.0])],
        pool_mask: None,
        hard: true,
    }
}

#[test]
fn gate_fn_values() {
    assert_eq!(gate_fn(0.5, Gating::Hard), 1.0);
    assert_eq!(gate_fn(-0.3, Gating::Hard), 0.0);
    assert_eq!(gate_fn(0.0, Gating::Hard), 0.0);
    let soft = Gating::soft_default();
    assert_eq!(gate_fn(0.0, soft), 0.5);
    assert!((gate_fn(1.0, soft) - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
    assert!((gate_fn(1.0, soft) - 0.9999546).abs() < 1e-7);
}

#[test]
fn one_two_one_net() {
    let spec = ArchSpec::fc(1, 2, 2, 1);
    let weights = Weights::new(vec![w(&[1, 2], &[1.0, -1.0]), w(&[2, 1], &[1.0, 1.0])]);
    let out = forward_dnn(&weights, &Tensor::vector(vec![2.0]), &spec).unwrap();
    assert_eq!(out.y.data(), &[2.0]);
    assert_eq!(out.preacts[0].data(), &[2.0, -2.0]);
    assert_eq!(out.gates.layers[0].data(), &[1.0, 0.0]);
}

#[test]
fn dnn_zero_input() {
    let spec = ArchSpec::fc(3, 4, 3, 2);
    let weights = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(1, 0)).unwrap();
    let out = forward_dnn(&weights, &Tensor::zeros(&[3]), &spec).unwrap();
    assert!(out.y.data().iter().all(|&v| v == 0.0));
    assert!(out.gates.layers.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn positive_weights_give_deep_linear_output() {
    let spec = ArchSpec::fc(2, 3, 3, 1);
    let weights = init_weights(&spec, InitScheme::BernoulliPmSigma { sigma: 0.5 }, &mut RngStream::new(2, 0))
        .unwrap();
    let positive = Weights::new(weights.tensors.iter().map(|t| t.map(f64::abs)).collect());
    let x = Tensor::vector(vec![1.0, 2.0]);
    let out = forward_dnn(&positive, &x, &spec).unwrap();
    let lin = x
        .reshape(vec![1, 2])
        .unwrap()
        .matmul(&positive.tensors[0])
        .unwrap()
        .matmul(&positive.tensors[1])
        .unwrap()
        .matmul(&positive.tensors[2])
        .unwrap();
    assert!(out.gates.layers.iter().all(|g| g.data().iter().all(|&v| v == 1.0)));
    assert!(out.y.max_abs_diff(&lin) < 1e-12);
}

#[test]
fn toy_gated_net() {
    let y = forward_gated(&toy_value(), &Tensor::vector(vec![2.0]), &toy_gates(), &toy_spec()).unwrap();
    assert!((y.data()[0] - 3.0).abs() < 1e-12);
}

#[test]
fn gated_all_on_and_dead_layer() {
    let spec = toy_spec();
    let on = GateStack {
        layers: vec![Tensor::ones(&[1, 2]), Tensor::ones(&[1, 2])],
        pool_mask: None,
        hard: true,
    };
    // deep linear: 2 * ([1,-1] M [1,1]^T) = 2 * (1*1.5 + -1*0.5) = 2
    let y = forward_gated(&toy_value(), &Tensor::vector(vec![2.0]), &on, &spec).unwrap();
    assert!((y.data()[0] - 2.0).abs() < 1e-12);
    let mut dead = on.clone();
    dead.layers[1] = Tensor::zeros(&[1, 2]);
    let y = forward_gated(&toy_value(), &Tensor::vector(vec![2.0]), &dead, &spec).unwrap();
    assert_eq!(y.data(), &[0.0]);
}

#[test]
fn gated_rejects_bad_gate_shapes() {
    let mut g = toy_gates();
    g.layers.pop();
    assert!(forward_gated(&toy_value(), &Tensor::vector(vec![2.0]), &g, &toy_spec()).is_err());
    assert!(forward_dnn(&toy_value(), &Tensor::vector(vec![1.0, 2.0]), &toy_spec()).is_err());
}

#[test]
fn bernoulli_init_values_and_determinism() {
    let spec = ArchSpec::fc(1, 2, 2, 1);
    let scheme = InitScheme::BernoulliPmSigma { sigma: 0.5 };
    let a = init_weights(&spec, scheme, &mut RngStream::new(9, 0)).unwrap();
    let b = init_weights(&spec, scheme, &mut RngStream::new(9, 0)).unwrap();
    assert_eq!(a, b);
    assert!(a.flatten().data().iter().all(|&v| v == 0.5 || v == -0.5));
    assert!(init_weights(&spec, InitScheme::BernoulliPmSigma { sigma: 0.0 }, &mut RngStream::new(9, 0)).is_err());
}

#[test]
fn bernoulli_mean_is_small() {
    let spec = ArchSpec::fc(1000, 100, 2, 1);
    let sigma = 2.0;
    let wts = init_weights(&spec, InitScheme::BernoulliPmSigma { sigma }, &mut RngStream::new(4, 0)).unwrap();
    let flat = wts.flatten();
    assert!(flat.len() >= 100_000);
    let mean = flat.sum() / flat.len() as f64;
    assert!(mean.abs() <= 0.01 * sigma, "mean {mean}");
}

#[test]
fn gaussian_fan_in_variance() {
    let spec = ArchSpec::fc(400, 300, 2, 1);
    let wts = init_weights(&spec, InitScheme::GaussianFanIn { c: 2.0 }, &mut RngStream::new(5, 0)).unwrap();
    let t = &wts.tensors[0];
    let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
    assert!((var - 4.0 / 400.0).abs() < 0.05 * 4.0 / 400.0, "var {var}");
}

#[test]
fn flat_round_trip() {
    let v = toy_value();
    let back = v.with_flat(v.flatten().data()).unwrap();
    assert_eq!(v, back);
    assert!(v.with_flat(&[1.0]).is_err());
}

#[test]
fn dlgn_layer_two_is_matrix_product() {
    let spec = ArchSpec::fc(3, 4, 3, 1);
    let theta = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(6, 0)).unwrap();
    let x = Tensor::from_rows(&[vec![0.3, -1.0, 0.7]]).unwrap();
    let g = gates_of(&theta, &x, Family::Dlgn, Gating::Hard, &spec).unwrap();
    let q2 = x
        .matmul(&theta.tensors[0].matmul(&theta.tensors[1]).unwrap())
        .unwrap();
    let expect = q2.map(|v| gate_fn(v, Gating::Hard));
    assert_eq!(g.layers[1], expect);
}

#[test]
fn dgn_matches_dlgn_when_relu_inactive() {
    let spec = ArchSpec::fc(3, 4, 4, 1);
    let theta = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(7, 0)).unwrap();
    let theta = Weights::new(theta.tensors.iter().map(|t| t.map(f64::abs)).collect());
    let x = Tensor::vector(vec![0.1, 0.5, 2.0]);
    let a = gates_of(&theta, &x, Family::Dgn, Gating::Hard, &spec).unwrap();
    let b = gates_of(&theta, &x, Family::Dlgn, Gating::Hard, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dgn_differs_from_dlgn_on_witness() {
    // Layer 1 pre-activation [1, -1]; ReLU kills the second unit only in the DGN.
    let spec = ArchSpec::fc(1, 2, 3, 1);
    let theta = Weights::new(vec![
        w(&[1, 2], &[1.0, -1.0]),
        w(&[2, 2], &[0.0, 1.0, -1.0, 0.0]),
        w(&[2, 1], &[1.0, 1.0]),
    ]);
    let x = Tensor::vector(vec![1.0]);
    let dgn = gates_of(&theta, &x, Family::Dgn, Gating::Hard, &spec).unwrap();
    let dlgn = gates_of(&theta, &x, Family::Dlgn, Gating::Hard, &spec).unwrap();
    assert_eq!(dgn.layers[0], dlgn.layers[0]);
    assert_ne!(dgn.layers[1], dlgn.layers[1]);
}

#[test]
fn shallow_gates_are_single_maps() {
    let spec = ArchSpec::fc(3, 4, 4, 1);
    let theta = init_shallow_gating(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(8, 0)).unwrap();
    assert_eq!(theta.tensors.len(), 3);
    let x = Tensor::from_rows(&[vec![1.0, -0.5, 0.25]]).unwrap();
    let g = gates_of(&theta, &x, Family::DlgnShallow, Gating::Hard, &spec).unwrap();
    for (l, gl) in g.layers.iter().enumerate() {
        let q = x.matmul(&theta.tensors[l]).unwrap();
        assert_eq!(gl, &q.map(|v| gate_fn(v, Gating::Hard)));
    }
    assert!(gates_of(&theta, &x, Family::Dnn, Gating::Hard, &spec).is_err());
}

#[test]
fn soft_gates_lie_in_unit_interval() {
    let spec = ArchSpec::fc(3, 4, 3, 1);
    let theta = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(10, 0)).unwrap();
    let x = Tensor::vector(vec![1.0, 2.0, -3.0]);
    let g = gates_of(&theta, &x, Family::Dgn, Gating::soft_default(), &spec).unwrap();
    assert!(!g.hard);
    assert!(g.require_hard().is_err());
    assert!(g.layers.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
}

#[test]
fn permutation_reverse_and_identity() {
    let layers: Vec<Tensor> = (0..4).map(|i| Tensor::filled(&[1, 3], i as f64)).collect();
    let g = GateStack {
        layers,
        pool_mask: None,
        hard: true,
    };
    assert_eq!(apply_permutation(&g, &[0, 1, 2, 3]).unwrap(), g);
    let r = apply_permutation(&g, &[3, 2, 1, 0]).unwrap();
    for l in 0..4 {
        assert_eq!(r.layers[l], g.layers[3 - l]);
    }
    assert!(apply_permutation(&g, &[0, 0, 1, 2]).is_err());
    assert!(apply_permutation(&g, &[0, 1, 2]).is_err());
}

#[test]
fn permutation_rejects_shape_mismatch() {
    let spec = ArchSpec::conv_gap(4, 2, 1, 2, 2, 1);
    let theta = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(11, 0)).unwrap();
    let g = gates_of(&theta, &Tensor::vector(vec![1.0, 0.0, 2.0, -1.0]), Family::Dgn, Gating::Hard, &spec).unwrap();
    assert!(apply_permutation(&g, &[1, 0]).is_err());
}

#[test]
fn conv_identity_kernel_is_mean() {
    let spec = ArchSpec::conv_gap(4, 1, 1, 2, 1, 1);
    let weights = Weights::new(vec![w(&[2, 1, 1], &[1.0, 0.0]), w(&[1, 1], &[1.0])]);
    let x = Tensor::vector(vec![1.0, 2.0, 3.0, 6.0]);
    let (y, gates) = forward_conv_gap(&weights, &x, &spec, None).unwrap();
    assert_eq!(gates.layers[0].data(), &[1.0; 4]);
    assert!((y.data()[0] - 3.0).abs() < 1e-15);
    let (y0, _) = forward_conv_gap(&weights, &Tensor::zeros(&[4]), &spec, None).unwrap();
    assert_eq!(y0.data(), &[0.0]);
    assert!(forward_resnet(&weights, &x, &spec, None).is_err());
}

#[test]
fn resnet_without_skips_is_fc() {
    let rspec = ArchSpec::resnet(3, 4, 0, 2, 1);
    let fspec = ArchSpec::fc(3, 4, 4, 1);
    let weights = init_weights(&rspec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(12, 0)).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]]).unwrap();
    let (yr, _) = forward_resnet(&weights, &x, &rspec, None).unwrap();
    let yf = forward_dnn(&weights, &x, &fspec).unwrap().y;
    assert_eq!(yr, yf);
}

#[test]
fn resnet_zero_blocks_reduce_to_first_and_last() {
    let spec = ArchSpec::resnet(2, 3, 2, 1, 1);
    let weights = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.0 }, &mut RngStream::new(13, 0)).unwrap();
    let dropped = drop_block(&drop_block(&weights, &spec, 1).unwrap(), &spec, 2).unwrap();
    let short = Weights::new(vec![weights.tensors[0].clone(), weights.tensors[3].clone()]);
    let x = Tensor::vector(vec![0.7, -0.2]);
    let (yr, _) = forward_resnet(&dropped, &x, &spec, None).unwrap();
    let yf = forward_dnn(&short, &x, &ArchSpec::fc(2, 3, 2, 1)).unwrap().y;
    assert!(yr.max_abs_diff(&yf) < 1e-15);
    assert!(drop_block(&weights, &spec, 0).is_err());
    assert!(drop_block(&weights, &spec, 3).is_err());
}

#[test]
fn drop_and_restore_is_identity() {
    let spec = ArchSpec::resnet(2, 3, 2, 1, 1);
    let m = Model::new(
        spec,
        ModelKind::new(Family::Dgn, Gating::Hard),
        InitScheme::GaussianFanIn { c: 1.0 },
        InitScheme::GaussianFanIn { c: 1.0 },
        3,
    )
    .unwrap();
    let x = Tensor::vector(vec![0.3, 0.9]);
    let before = m.forward(&x, &x).unwrap();
    let dropped = m.drop_block(1).unwrap();
    let mut restored = dropped.clone();
    restored.value = m.value.clone();
    restored.gating = m.gating.clone();
    assert_eq!(restored.forward(&x, &x).unwrap(), before);
}

#[test]
fn model_forward_matches_free_functions() {
    let spec = ArchSpec::fc(3, 5, 4, 2);
    let m = Model::new(
        spec.clone(),
        ModelKind::new(Family::Dgn, Gating::Hard),
        InitScheme::GaussianFanIn { c: 1.0 },
        InitScheme::GaussianFanIn { c: 1.0 },
        21,
    )
    .unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
    let g = m.gates(&x).unwrap();
    let y = forward_gated(&m.value, &x, &g, &spec).unwrap();
    assert_eq!(m.forward(&x, &x).unwrap(), y);
    let perm = [2, 0, 1];
    let yp = forward_gated(&m.value, &x, &apply_permutation(&g, &perm).unwrap(), &spec).unwrap();
    assert_eq!(m.forward_permuted(&x, &x, Some(&perm)).unwrap(), yp);
}

#[test]
fn dnn_rejects_permutation() {
    let m = Model::new(
        ArchSpec::fc(2, 3, 3, 1),
        ModelKind::dnn(),
        InitScheme::GaussianFanIn { c: 1.0 },
        InitScheme::GaussianFanIn { c: 1.0 },
        1,
    )
    .unwrap();
    let x = Tensor::vector(vec![1.0, 1.0]);
    assert!(matches!(
        m.forward_permuted(&x, &x, Some(&[1, 0])),
        Err(Error::Config(_))
    ));
}

fn arb_fc() -> impl Strategy<Value = (ArchSpec, u64)> {
    (1usize..4, 1usize..5, 2usize..5, any::<u64>()).prop_map(|(d, w, depth, s)| (ArchSpec::fc(d, w, depth, 1), s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relu_net_is_self_gated((spec, seed) in arb_fc(), xs in prop::collection::vec(-3.0f64..3.0, 3)) {
        let weights = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.4 }, &mut RngStream::new(seed, 0)).unwrap();
        let x = Tensor::vector(xs[..spec.d_in].to_vec());
        let out = forward_dnn(&weights, &x, &spec).unwrap();
        let again = forward_gated(&weights, &x, &out.gates, &spec).unwrap();
        prop_assert_eq!(out.y, again);
    }

    #[test]
    fn hard_gates_are_scale_invariant((spec, seed) in arb_fc(), xs in prop::collection::vec(-3.0f64..3.0, 3), c in 0.1f64..10.0) {
        let weights = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.4 }, &mut RngStream::new(seed, 0)).unwrap();
        let x = Tensor::vector(xs[..spec.d_in].to_vec());
        let a = forward_dnn(&weights, &x, &spec).unwrap();
        let b = forward_dnn(&weights, &x.scale(c), &spec).unwrap();
        prop_assert_eq!(&a.gates, &b.gates);
        prop_assert!(b.y.max_abs_diff(&a.y.scale(c)) <= 1e-12 * (1.0 + a.y.data()[0].abs() * c));
    }

    #[test]
    fn conv_gates_are_rotation_equivariant(seed in any::<u64>(), r in 0usize..6, xs in prop::collection::vec(-2.0f64..2.0, 6)) {
        let spec = ArchSpec::conv_gap(6, 3, 2, 2, 2, 1);
        let theta = init_weights(&spec, InitScheme::GaussianFanIn { c: 1.4 }, &mut RngStream::new(seed, 0)).unwrap();
        let x = Tensor::vector(xs);
        let xr = rotate(&x, r).unwrap();
        let g = gates_of(&theta, &x, Family::Dgn, Gating::Hard, &spec).unwrap();
        let gr = gates_of(&theta, &xr, Family::Dgn, Gating::Hard, &spec).unwrap();
        for l in 0..spec.conv_layers() {
            prop_assert_eq!(&gr.layers[l], &rotate_channels(&g.layers[l], r).unwrap());
        }
    }
}
