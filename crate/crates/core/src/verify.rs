//! The invariant suite run by `galupath verify`. Every check draws its own
//! random models from fixed seeds, so a run is reproducible.

use crate::autodiff::grad_check;
use crate::error::Result;
use crate::experiments::{permutations, LossObjective, Loss};
use crate::kernels::{
    empirical_ntk, fc_overlap_product, gate_stacks, npk_bruteforce, npk_conv_rotsum, npk_fc_product,
    npk_res_ensemble, ParamScope, DEFAULT_ENSEMBLE_CAP,
};
use crate::network::{apply_permutation, ArchKind, ArchSpec, Family, Gating, InitScheme, Model, ModelKind};
use crate::paths::{self, bundles, count_paths, enumerate_paths, output_via_paths, paths_per_subset, DEFAULT_PATH_CAP};
use crate::rng::RngStream;
use crate::tensor::{rotate, Tensor};

const EXACT_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gaussian() -> InitScheme {
    InitScheme::GaussianFanIn { c: 1.0 }
}

fn model(spec: &ArchSpec, kind: ModelKind, seed: u64) -> Result<Model> {
    Model::new(spec.clone(), kind, gaussian(), gaussian(), seed)
}

fn hard_dgn(spec: &ArchSpec, seed: u64) -> Result<Model> {
    model(spec, ModelKind::new(Family::Dgn, Gating::Hard), seed)
}

fn inputs(n: usize, d: usize, rng: &mut RngStream) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).expect("n × d")
}

fn pick(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn random_fc(rng: &mut RngStream) -> ArchSpec {
    ArchSpec::fc(pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 2, 4), pick(rng, 1, 2))
}

fn random_conv(rng: &mut RngStream) -> ArchSpec {
    let d_in = pick(rng, 3, 6);
    ArchSpec::conv_gap(d_in, pick(rng, 1, 3), pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 2), 1)
}

fn random_resnet(rng: &mut RngStream) -> ArchSpec {
    ArchSpec::resnet(pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 0, 2), pick(rng, 1, 2), 1)
}

fn scale(k: &crate::kernels::GramMatrix) -> f64 {
    k.data().iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

type Outcome = Result<(bool, String)>;

fn dual_identity(cases: usize) -> Outcome {
    let families = [
        ArchSpec::fc(4, 4, 4, 1),
        ArchSpec::conv_gap(6, 3, 2, 2, 1, 1),
        ArchSpec::resnet(3, 3, 2, 1, 1),
    ];
    let mut worst = 0.0f64;
    let mut rng = RngStream::new(11, 0);
    for (f, fixed) in families.iter().enumerate() {
        for seed in 0..cases as u64 {
            let spec = match (f, seed % 2) {
                (_, 0) => fixed.clone(),
                (0, _) => random_fc(&mut rng),
                (1, _) => random_conv(&mut rng),
                _ => random_resnet(&mut rng),
            };
            let m = hard_dgn(&spec, seed)?;
            let x = inputs(1, spec.d_in, &mut rng);
            let y = m.forward(&x, &x)?;
            for logit in 0..spec.out_dim {
                let dual = output_via_paths(&m, &x, &x, logit)?;
                let fwd = y.data()[logit];
                worst = worst.max((fwd - dual).abs() / fwd.abs().max(1.0));
            }
        }
    }
    Ok((worst <= EXACT_TOL, format!("max |forward − ⟨φ,v⟩| = {worst:.2e}")))
}

fn fc_product_kernel(cases: usize) -> Outcome {
    let mut rng = RngStream::new(12, 0);
    let mut worst = 0.0f64;
    for seed in 0..cases as u64 {
        let spec = random_fc(&mut rng);
        let m = hard_dgn(&spec, seed)?;
        let xs = inputs(3, spec.d_in, &mut rng);
        let g = gate_stacks(&m, &xs)?;
        for a in 0..3 {
            for b in 0..3 {
                let brute = paths::overlap(&g[a], &g[b], &spec)?;
                let product = fc_overlap_product(&g[a], &g[b]);
                if brute.per_input.iter().any(|&c| c != product) {
                    return Ok((false, format!("overlap mismatch for {spec:?}, seed {seed}")));
                }
            }
        }
        let closed = npk_fc_product(&xs, &g, &spec)?;
        let brute = npk_bruteforce(&xs, &g, &spec)?;
        worst = worst.max(closed.max_abs_diff(&brute) / scale(&brute));
    }
    Ok((worst <= EXACT_TOL, format!("overlaps exact; max NPK gap {worst:.2e}")))
}

fn conv_rotation(cases: usize) -> Outcome {
    let mut rng = RngStream::new(13, 0);
    let mut worst = 0.0f64;
    for seed in 0..cases as u64 {
        let spec = random_conv(&mut rng);
        let m = hard_dgn(&spec, seed)?;
        let xs = inputs(2, spec.d_in, &mut rng);
        let oracle = |x: &Tensor| m.gates(x);
        let closed = npk_conv_rotsum(&xs, &oracle, &spec)?;
        let brute = npk_bruteforce(&xs, &gate_stacks(&m, &xs)?, &spec)?;
        let s = scale(&brute);
        worst = worst.max(closed.max_abs_diff(&brute) / s);
        for r in 1..spec.d_in {
            let rows: Vec<Tensor> = (0..2)
                .map(|i| rotate(&Tensor::vector(xs.row(i).to_vec()), r))
                .collect::<Result<_>>()?;
            let shifted = Tensor::concat_outer(
                &rows.iter().map(|t| t.reshape(vec![1, spec.d_in])).collect::<Result<Vec<_>>>()?,
            )?;
            let k = npk_conv_rotsum(&shifted, &oracle, &spec)?;
            worst = worst.max(k.max_abs_diff(&closed) / s);
        }
    }
    Ok((worst <= EXACT_TOL, format!("max gap {worst:.2e}")))
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn resnet_ensemble(seeds: usize) -> Outcome {
    let mut rng = RngStream::new(14, 0);
    let mut worst = 0.0f64;
    for b in 0..=3 {
        for seed in 0..seeds as u64 {
            let (d_in, w, d_blk) = (2, 2, 1 + (seed as usize % 2));
            let spec = ArchSpec::resnet(d_in, w, b, d_blk, 1);
            let m = hard_dgn(&spec, seed)?;
            let xs = inputs(3, d_in, &mut rng);
            let g = gate_stacks(&m, &xs)?;
            let e = npk_res_ensemble(&xs, &g, &spec, DEFAULT_ENSEMBLE_CAP)?;
            let brute = npk_bruteforce(&xs, &g, &spec)?;
            worst = worst.max(e.total.max_abs_diff(&brute) / scale(&brute));

            let mut by_size = vec![0u128; b + 1];
            for (j, count) in paths_per_subset(&spec)? {
                by_size[j.len()] += count;
            }
            for (i, &got) in by_size.iter().enumerate() {
                let want = binomial(b, i) * d_in as u128 * (w as u128).pow(((i + 2) * d_blk - 1) as u32);
                if got != want {
                    return Ok((false, format!("b={b}, d_blk={d_blk}: {got} paths of size {i}, expected {want}")));
                }
            }
        }
    }
    Ok((worst <= EXACT_TOL, format!("per-size counts exact; max NPK gap {worst:.2e}")))
}

fn path_counts(cases: usize) -> Outcome {
    let mut rng = RngStream::new(15, 0);
    for _ in 0..cases {
        for spec in [random_fc(&mut rng), random_conv(&mut rng), random_resnet(&mut rng)] {
            let counted = count_paths(&spec);
            let listed = enumerate_paths(&spec, DEFAULT_PATH_CAP)?.count() as u128;
            if counted != listed {
                return Ok((false, format!("{spec:?}: counted {counted}, enumerated {listed}")));
            }
            if let ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                ..
            } = spec.kind
            {
                let (d, w) = (spec.d_in as u128, spec.width as u128);
                let want = d * (window as u128 * w).pow(conv_layers as u32) * w.pow(fc_layers as u32 - 1);
                if counted != want {
                    return Ok((false, format!("{spec:?}: {counted} paths, formula gives {want}")));
                }
                if bundles(&spec, DEFAULT_PATH_CAP)?.iter().any(|b| b.members.len() != spec.d_in) {
                    return Ok((false, format!("{spec:?}: a bundle does not have d_in members")));
                }
            }
        }
    }
    Ok((true, format!("{cases} specs per family")))
}

fn gradients(seeds: usize) -> Outcome {
    let soft = ModelKind::new(Family::Dgn, Gating::soft_default());
    let setups = [
        (ArchSpec::fc(3, 4, 3, 2), ModelKind::dnn()),
        (ArchSpec::fc(3, 4, 3, 2), soft),
        (ArchSpec::conv_gap(4, 2, 2, 2, 1, 2), soft),
        (ArchSpec::resnet(3, 3, 2, 1, 2), ModelKind::dnn()),
        (ArchSpec::fc(3, 4, 3, 2), ModelKind::new(Family::Dlgn, Gating::soft_default())),
    ];
    let mut worst = 0.0f64;
    let mut rng = RngStream::new(16, 0);
    for (spec, kind) in &setups {
        for seed in 0..seeds as u64 {
            let m = model(spec, *kind, seed)?;
            let x = inputs(3, spec.d_in, &mut rng);
            let obj = LossObjective {
                model: &m,
                x_f: x.clone(),
                x_v: x,
                labels: vec![0, 1, 1],
                loss: Loss::SoftmaxCe,
                include_gating: kind.family != Family::Dnn,
            };
            let report = grad_check(&obj, &obj.params(), FD_STEP, GRAD_TOL)?;
            worst = worst.max(report.max_rel_err);
        }
    }
    let hard = hard_dgn(&ArchSpec::fc(3, 4, 3, 2), 0)?;
    let x = inputs(3, 3, &mut rng);
    let obj = LossObjective {
        model: &hard,
        x_f: x.clone(),
        x_v: x,
        labels: vec![0, 1, 0],
        loss: Loss::SoftmaxCe,
        include_gating: true,
    };
    use crate::autodiff::Objective;
    let g = obj.gradient(&obj.params())?;
    let nv = hard.value.num_params();
    let gating_zero = g.data()[nv..].iter().all(|&v| v == 0.0);
    Ok((
        worst <= GRAD_TOL && gating_zero,
        format!("max relative error {worst:.2e}; hard-gate gating gradient zero: {gating_zero}"),
    ))
}

fn allones_gates(cases: usize) -> Outcome {
    let mut rng = RngStream::new(17, 0);
    for seed in 0..cases as u64 {
        for family in [Family::Dgn, Family::Dlgn, Family::DlgnShallow] {
            let spec = random_fc(&mut rng);
            let m = model(&spec, ModelKind::new(family, Gating::Hard), seed)?;
            let x = inputs(4, spec.d_in, &mut rng);
            let ones = Tensor::ones(x.shape());
            let fed = |xv: &Tensor| -> Result<Vec<Tensor>> {
                let mut tape = crate::autodiff::Tape::new();
                let rec = m.record(&mut tape, &x, xv, Default::default())?;
                Ok(rec.gates.iter().map(|&g| tape.value(g).clone()).collect())
            };
            if fed(&x)? != fed(&ones)? {
                return Ok((false, format!("{family:?} seed {seed}: gates depend on the value input")));
            }
        }
    }
    Ok((true, format!("{cases} models per gated family")))
}

fn permutation_npk(cases: usize) -> Outcome {
    let mut rng = RngStream::new(18, 0);
    for seed in 0..cases as u64 {
        let spec = ArchSpec::fc(3, pick(&mut rng, 2, 5), 5, 1);
        let m = hard_dgn(&spec, seed)?;
        let xs = inputs(4, 3, &mut rng);
        let g = gate_stacks(&m, &xs)?;
        let base = npk_fc_product(&xs, &g, &spec)?;
        for perm in permutations(4) {
            let pg = g.iter().map(|s| apply_permutation(s, &perm)).collect::<Result<Vec<_>>>()?;
            if npk_fc_product(&xs, &pg, &spec)?.data() != base.data() {
                return Ok((false, format!("seed {seed}: permutation {perm:?} changes the NPK")));
            }
        }
    }
    Ok((true, format!("{cases} models × 24 permutations")))
}

fn ntk_scope(cases: usize) -> Outcome {
    let mut rng = RngStream::new(19, 0);
    for seed in 0..cases as u64 {
        let spec = random_fc(&mut rng);
        let m = hard_dgn(&spec, seed)?;
        let xs = inputs(3, spec.d_in, &mut rng);
        let value = empirical_ntk(&m, &xs, &xs, ParamScope::ValueNet)?;
        let all = empirical_ntk(&m, &xs, &xs, ParamScope::All)?;
        if value.data() != all.data() {
            return Ok((false, format!("seed {seed}: gating parameters reach the NTK under hard gates")));
        }
        if !value.is_psd() {
            return Ok((false, format!("seed {seed}: NTK is not PSD")));
        }
    }
    Ok((true, format!("{cases} models")))
}

type CheckFn<'a> = Box<dyn Fn() -> Outcome + 'a>;

/// Runs every check; `quick` uses fewer random cases.
pub fn run_suite(quick: bool) -> Vec<Check> {
    let n = |full: usize, q: usize| if quick { q } else { full };
    let checks: Vec<(&'static str, CheckFn<'_>)> = vec![
        ("dual_identity", Box::new(move || dual_identity(n(100, 10)))),
        ("npk_product_kernel", Box::new(move || fc_product_kernel(n(50, 10)))),
        ("npk_rotation_invariance", Box::new(move || conv_rotation(n(20, 5)))),
        ("npk_resnet_ensemble", Box::new(move || resnet_ensemble(n(4, 2)))),
        ("path_counts", Box::new(move || path_counts(n(20, 5)))),
        ("gradients", Box::new(move || gradients(n(20, 3)))),
        ("allones_gate_identity", Box::new(move || allones_gates(n(20, 5)))),
        ("permutation_npk_invariance", Box::new(move || permutation_npk(n(10, 3)))),
        ("ntk_hard_gate_scope", Box::new(move || ntk_scope(n(20, 5)))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}
