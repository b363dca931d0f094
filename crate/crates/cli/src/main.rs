//! `galupath`: invariant checks, kernel Gram matrices and gated-network
//! experiments from the command line.

mod report;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use galupath::data_io::{
    append_ledger, read_checkpoint, run_id, write_checkpoint, write_run_json, DataSplit, Dataset, DirLock,
    ExperimentConfig, LedgerRow,
};
use galupath::experiments::{
    pretrain_gating, run_allones, permutation_sweep, train, ModelSetup, RunResult, TrainConfig, TrainMode,
};
use galupath::kernels::{
    empirical_ntk, gate_stacks, npk_bruteforce, npk_conv_rotsum, npk_fc_product, npk_res_ensemble,
    ntk_npk_ratio_study, GramMatrix, InputKind, ParamScope, RatioStudyConfig, DEFAULT_ENSEMBLE_CAP,
};
use galupath::{verify, ArchKind, Family, Gating, Model, ModelKind, Pooling};

#[derive(Parser)]
#[command(name = "galupath", version, about = "Path-space view of gated deep networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite; exits 1 naming the first failing property.
    Verify {
        /// Fewer random cases per property.
        #[arg(long)]
        quick: bool,
    },
    /// Write the NPK Gram matrix of a model's hard gates on training inputs.
    Npk {
        #[command(flatten)]
        gram: GramArgs,
        /// Use explicit path features instead of the closed form.
        #[arg(long)]
        brute: bool,
    },
    /// Write the empirical NTK Gram matrix of a model on training inputs.
    Ntk {
        #[command(flatten)]
        gram: GramArgs,
        #[arg(long, value_enum, default_value_t = Scope::Value)]
        scope: Scope,
    },
    /// Train one configuration and record it in the ledger.
    Train {
        #[arg(long, alias = "spec")]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gate-permutation or constant-input suite for one configuration.
    #[command(group(ArgGroup::new("suite").required(true).args(["permutations", "allones"])))]
    Sweep {
        #[arg(long, alias = "config")]
        spec: PathBuf,
        /// Train once per permutation of the gated layers.
        #[arg(long)]
        permutations: bool,
        /// Train with the value network reading x and reading all ones.
        #[arg(long)]
        allones: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds for the constant-input suite, counting up from the seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Finite-width deviation of NTK / (const · NPK) for hard-gated FC DGNs.
    RatioStudy {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 1024])]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 4)]
        d_in: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 10)]
        n_inputs: usize,
        #[arg(long, default_value_t = 1.0)]
        c_scale: f64,
        #[arg(long, value_enum, default_value_t = Inputs::Positive)]
        inputs: Inputs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deviation allowed at the largest width.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a results ledger as a comparison table.
    Report {
        #[arg(long)]
        ledger: PathBuf,
    },
}

#[derive(clap::Args)]
struct GramArgs {
    /// Experiment configuration (TOML).
    #[arg(long, alias = "config")]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of training inputs.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Value,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Inputs {
    Sphere,
    Positive,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Verify { quick } => Ok(run_verify(quick)),
        Command::Npk { gram, brute } => {
            let (model, xs) = gram_inputs(&gram)?;
            let hard = harden(&model)?;
            let g = npk(&hard, xs.inputs(), brute)?;
            write_gram(&gram.out, &g)?;
            println!("{} {}×{} → {}", g.provenance.tag(), g.n(), g.n(), gram.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ntk { gram, scope } => {
            let (model, xs) = gram_inputs(&gram)?;
            let scope = match scope {
                Scope::Value => ParamScope::ValueNet,
                Scope::All => ParamScope::All,
            };
            let g = empirical_ntk(&model, xs.inputs(), xs.inputs(), scope)?;
            write_gram(&gram.out, &g)?;
            println!("{} {}×{} → {}", g.provenance.tag(), g.n(), g.n(), gram.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, seed } => {
            run_train(&load_config(&config, seed)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            spec,
            permutations,
            allones,
            seed,
            seeds,
        } => {
            let cfg = load_config(&spec, seed)?;
            if cfg.gating_checkpoint.is_some() {
                bail!("sweeps pretrain their own gates; gating_checkpoint applies to `train` only");
            }
            if permutations {
                run_permutations(&cfg)?;
            }
            if allones {
                run_allones_suite(&cfg, seeds)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RatioStudy {
            widths,
            seeds,
            d_in,
            depth,
            n_inputs,
            c_scale,
            inputs,
            seed,
            threshold,
            out,
        } => {
            let cfg = RatioStudyConfig {
                d_in,
                depth,
                widths,
                seeds,
                n_inputs,
                c_scale,
                inputs: match inputs {
                    Inputs::Sphere => InputKind::UnitSphere,
                    Inputs::Positive => InputKind::PositiveUnit,
                },
                base_seed: seed,
            };
            let study = ntk_npk_ratio_study(&cfg)?;
            println!("{:>6}  {:>14}  {:>14}  {:>8}  {:>8}", "width", "mean |r − 1|", "max |r − 1|", "pairs", "dropped");
            for r in &study.rows {
                println!(
                    "{:>6}  {:>14.6}  {:>14.6}  {:>8}  {:>8}",
                    r.width, r.mean_deviation, r.max_deviation, r.retained, r.filtered
                );
            }
            let last = study.rows.last().expect("at least one width").mean_deviation;
            println!("monotone: {}", if study.monotone() { "yes" } else { "no" });
            println!(
                "largest width: {last:.6} ({} threshold {threshold})",
                if last <= threshold { "within" } else { "above" }
            );
            if let Some(path) = out {
                let _lock = lock_parent(&path)?;
                study.write_csv(BufWriter::new(File::create(&path)?))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { ledger } => {
            let rows = galupath::data_io::read_ledger(&ledger)
                .with_context(|| format!("reading ledger {}", ledger.display()))?;
            print!("{}", report::render(&rows));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_verify(quick: bool) -> ExitCode {
    let checks = verify::run_suite(quick);
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    match checks.iter().find(|c| !c.passed) {
        Some(c) => {
            eprintln!("invariant failed: {}", c.name);
            ExitCode::FAILURE
        }
        None => ExitCode::SUCCESS,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn gram_inputs(args: &GramArgs) -> Result<(Model, Dataset)> {
    let cfg = load_config(&args.spec, args.seed)?;
    let data = cfg.load_data()?;
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let idx: Vec<usize> = (0..args.n.min(data.train.len())).collect();
    Ok((cfg.setup.build(cfg.seed)?, data.train.subset(&idx)))
}

/// The same weights with hard gates; a DNN already gates with its own ReLUs.
fn harden(model: &Model) -> Result<Model> {
    if model.kind.family == Family::Dnn {
        return Ok(model.clone());
    }
    Ok(Model::from_parts(
        model.spec.clone(),
        ModelKind::new(model.kind.family, Gating::Hard),
        model.value.clone(),
        model.gating.clone(),
    )?)
}

fn npk(model: &Model, xs: &galupath::Tensor, brute: bool) -> Result<GramMatrix> {
    let spec = &model.spec;
    if brute {
        return Ok(npk_bruteforce(xs, &gate_stacks(model, xs)?, spec)?);
    }
    Ok(match spec.kind {
        ArchKind::Fc { .. } => npk_fc_product(xs, &gate_stacks(model, xs)?, spec)?,
        ArchKind::ConvGap {
            pooling: Pooling::Avg, ..
        } => npk_conv_rotsum(xs, &|x| model.gates(x), spec)?,
        // No closed form under max pooling.
        ArchKind::ConvGap { .. } => npk_bruteforce(xs, &gate_stacks(model, xs)?, spec)?,
        ArchKind::Resnet { .. } => npk_res_ensemble(xs, &gate_stacks(model, xs)?, spec, DEFAULT_ENSEMBLE_CAP)?.total,
    })
}

fn lock_parent(path: &Path) -> Result<DirLock> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    Ok(DirLock::acquire(dir)?)
}

fn write_gram(path: &Path, g: &GramMatrix) -> Result<()> {
    let _lock = lock_parent(path)?;
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    g.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Dnn => "dnn",
        Family::Dgn => "dgn",
        Family::Dlgn => "dlgn",
        Family::DlgnShallow => "dlgn_shallow",
    }
}

/// Ledger mode label, e.g. `dgn_soft_st`.
fn mode_label(setup: &ModelSetup, train: &TrainConfig) -> String {
    let mode = match train.mode {
        TrainMode::Pg => "pg",
        TrainMode::St => "st",
    };
    if setup.kind.family == Family::Dnn {
        return format!("dnn_{mode}");
    }
    let gating = match setup.kind.gating {
        Gating::Hard => "hard",
        Gating::Soft { .. } => "soft",
    };
    format!("{}_{gating}_{mode}", family_name(setup.kind.family))
}

/// What each run's JSON document holds.
#[derive(Serialize)]
struct RunDoc<'a> {
    run_id: &'a str,
    subcommand: &'a str,
    /// The configuration as run, in its text format.
    config: String,
    spec_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    arm: Option<&'a str>,
    result: &'a RunResult,
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    subcommand: &'a str,
    config: String,
    rows: Vec<LedgerRow>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a ExperimentConfig, subcommand: &'a str) -> Self {
        Self {
            cfg,
            subcommand,
            config: cfg.to_toml(),
            rows: Vec::new(),
        }
    }

    /// Writes the run's JSON document and queues its ledger row.
    fn record(
        &mut self,
        id_parts: &[&str],
        arm: Option<&str>,
        mode: String,
        seed: u64,
        perm: Option<usize>,
        result: &RunResult,
    ) -> Result<String> {
        let mut parts = vec![self.subcommand, self.config.as_str()];
        parts.extend_from_slice(id_parts);
        let id = run_id(&parts);
        let doc = RunDoc {
            run_id: &id,
            subcommand: self.subcommand,
            config: self.config.clone(),
            spec_hash: self.cfg.setup.spec.hash(),
            arm,
            result,
        };
        write_run_json(&self.cfg.output.dir, &id, &doc)?;
        self.rows.push(LedgerRow {
            run_id: id.clone(),
            subcommand: self.subcommand.to_string(),
            spec_hash: self.cfg.setup.spec.hash(),
            seed,
            permutation_id: perm,
            mode,
            test_accuracy: result.test_accuracy,
            wall_seconds: result.wall_seconds,
            timestamp: now(),
        });
        Ok(id)
    }

    fn finish(self) -> Result<()> {
        append_ledger(&self.cfg.output.ledger, &self.rows)?;
        Ok(())
    }
}

fn gating_for_pg(cfg: &ExperimentConfig, data: &DataSplit) -> Result<galupath::Weights> {
    let setup = &cfg.setup;
    match &cfg.gating_checkpoint {
        Some(path) => {
            let m = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            if m.spec != setup.spec {
                bail!("checkpoint {} holds a different architecture", path.display());
            }
            // A trained ReLU network's weights, or another model's gating network.
            Ok(m.gating.unwrap_or(m.value))
        }
        None => Ok(pretrain_gating(&setup.spec, setup.gating_init, data, &cfg.train, cfg.seed)?),
    }
}

fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.output.dir)?;
    let data = cfg.load_data()?;
    let mut model = cfg.setup.build(cfg.seed)?;
    if cfg.train.mode == TrainMode::Pg && model.gating.is_some() {
        let gating = gating_for_pg(cfg, &data)?;
        model = Model::from_parts(model.spec.clone(), model.kind, model.value.clone(), Some(gating))?;
    }
    let (trained, result) = train(&model, &data, &cfg.train)?;
    let mut rec = Recorder::new(cfg, "train");
    let id = rec.record(&[], None, mode_label(&cfg.setup, &cfg.train), cfg.seed, None, &result)?;
    write_checkpoint(&cfg.output.dir.join(format!("{id}.ckpt")), &trained)?;
    rec.finish()?;
    println!(
        "run {id}: test accuracy {:.4} after {} epochs (initial {:.4})",
        result.test_accuracy,
        result.epochs.len(),
        result.initial_test_accuracy
    );
    Ok(())
}

fn run_permutations(cfg: &ExperimentConfig) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.output.dir)?;
    let data = cfg.load_data()?;
    let start = Instant::now();
    let sweep = permutation_sweep(&cfg.setup, &data, &cfg.train, cfg.seed)?;
    let mut rec = Recorder::new(cfg, "sweep-permutations");
    let mode = mode_label(&cfg.setup, &cfg.train);
    for run in &sweep.runs {
        let label = format!("{:?}", run.permutation);
        let id = rec.record(
            &[&run.id.to_string()],
            Some(&label),
            mode.clone(),
            cfg.seed,
            Some(run.id),
            &run.result,
        )?;
        println!("{:>3} {label:<14} {id} {:.4}", run.id, run.result.test_accuracy);
    }
    rec.finish()?;
    let (mean, std) = sweep.others();
    println!(
        "identity {:.4}; other {} permutations {:.4} ± {:.4} ({:.1}s)",
        sweep.identity_accuracy(),
        sweep.runs.len() - 1,
        mean,
        std,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_allones_suite(cfg: &ExperimentConfig, seeds: u64) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.output.dir)?;
    let data = cfg.load_data()?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds.max(1)).collect();
    let report = run_allones(&cfg.setup, &data, &cfg.train, &seeds)?;
    let mut rec = Recorder::new(cfg, "sweep-allones");
    let mode = mode_label(&cfg.setup, &cfg.train);
    for p in &report.pairs {
        let seed = p.seed.to_string();
        for (arm, r) in [("x", &p.same), ("ones", &p.ones)] {
            rec.record(&[&seed, arm], Some(arm), format!("{mode}_{arm}"), p.seed, None, r)?;
        }
        println!(
            "seed {}: acc(x,x) {:.4}  acc(x,1) {:.4}  gates identical: {}",
            p.seed, p.same.test_accuracy, p.ones.test_accuracy, p.gates_identical
        );
    }
    rec.finish()?;
    println!(
        "mean acc(x,x) {:.4}  acc(x,1) {:.4}  gap {:.2} points",
        report.mean_same,
        report.mean_ones,
        report.gap_points()
    );
    Ok(())
}
