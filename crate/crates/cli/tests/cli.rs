use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use galupath::data_io::read_ledger;

const TINY_FC: &str = r#"
seed = 3

[arch]
kind = "fc"
d_in = 4
width = 8
out_dim = 2
depth = 3

[model]
family = "dgn"
gating = "soft"
beta = 10.0

[init]
value = "gaussian_fan_in"
value_scale = 1.4142135623730951
gating = "gaussian_fan_in"
gating_scale = 1.4142135623730951

[train]
optimizer = "adam"
lr = 0.01
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
batch_size = 16
epochs = 3
seed = 3
loss = "softmax_ce"
mode = "st"

[data]
source = "blobs"
n_train = 64
n_test = 32
classes = 2
noise = 0.5

[output]
dir = "out"
ledger = "out/ledger.csv"
"#;

fn tiny_c4() -> String {
    TINY_FC
        .replace("kind = \"fc\"\nd_in = 4\nwidth = 8\nout_dim = 2\ndepth = 3", "kind = \"conv_gap\"\nd_in = 4\nwidth = 2\nout_dim = 2\nconv_layers = 4\nwindow = 2\nfc_layers = 1\npooling = \"avg\"")
        .replace("gating = \"soft\"\nbeta = 10.0", "gating = \"hard\"")
        .replace("mode = \"st\"", "mode = \"pg\"\npretrain_epochs = 1")
        .replace("epochs = 3", "epochs = 1")
}

fn galupath(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galupath"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn quick_verify_passes_every_property() {
    let dir = tempfile::tempdir().unwrap();
    let out = galupath(dir.path(), &["verify", "--quick"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 9, "{stdout}");
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = galupath(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));
}

#[test]
fn sweep_needs_a_suite() {
    let dir = workspace(TINY_FC);
    let out = galupath(dir.path(), &["sweep", "--spec", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn npk_writes_a_symmetric_closed_form_gram() {
    let dir = workspace(TINY_FC);
    let out = galupath(dir.path(), &["npk", "--spec", "run.toml", "--out", "gram.csv", "--n", "6"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("gram.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# provenance=NPK_CLOSED spec="), "{header}");
    assert!(header.ends_with(" n=6"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 6);
    for (a, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 6);
        for (b, cell) in row.iter().enumerate() {
            assert_eq!(cell, &rows[b][a]);
            let mantissa = cell.trim_start_matches('-').split('e').next().unwrap();
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{cell}");
        }
    }
    assert!(!dir.path().join(".galupath.lock").exists());
}

#[test]
fn brute_and_closed_npk_agree() {
    let dir = workspace(&tiny_c4());
    for (flag, name) in [(None, "closed.csv"), (Some("--brute"), "brute.csv")] {
        let mut args = vec!["npk", "--spec", "run.toml", "--out", name, "--n", "4"];
        args.extend(flag);
        let out = galupath(dir.path(), &args);
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let read = |name: &str| -> Vec<f64> {
        fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    let (c, b) = (read("closed.csv"), read("brute.csv"));
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (x, y) in c.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
    }
    assert!(fs::read_to_string(dir.path().join("brute.csv")).unwrap().starts_with("# provenance=NPK_BRUTE"));
}

#[test]
fn ntk_writes_an_empirical_gram() {
    let dir = workspace(TINY_FC);
    let out = galupath(dir.path(), &["ntk", "--spec", "run.toml", "--out", "ntk.csv", "--n", "3", "--scope", "all"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ntk.csv")).unwrap();
    assert!(csv.starts_with("# provenance=NTK_EMPIRICAL"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn train_records_ledger_json_and_checkpoint() {
    let dir = workspace(TINY_FC);
    let out = galupath(dir.path(), &["train", "--config", "run.toml", "--seed", "11"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rows = read_ledger(&dir.path().join("out/ledger.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!((r.subcommand.as_str(), r.seed, r.mode.as_str()), ("train", 11, "dgn_soft_st"));
    let json = fs::read_to_string(dir.path().join(format!("out/{}.json", r.run_id))).unwrap();
    assert!(json.contains("seed = 11"), "{json}");
    assert!(!json.contains("wall_seconds"));
    assert!(dir.path().join(format!("out/{}.ckpt", r.run_id)).exists());

    galupath(dir.path(), &["train", "--config", "run.toml"]);
    let rows = read_ledger(&dir.path().join("out/ledger.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![11, 3]);
}

#[test]
fn identical_invocations_write_identical_files() {
    let a = workspace(TINY_FC);
    let b = workspace(TINY_FC);
    for dir in [&a, &b] {
        for args in [
            &["train", "--config", "run.toml"][..],
            &["npk", "--spec", "run.toml", "--out", "out/gram.csv"][..],
        ] {
            let out = galupath(dir.path(), args);
            assert!(out.status.success(), "{}", text(&out.stderr));
        }
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "ledger.csv")
        .collect();
    names.sort();
    assert_eq!(names.len(), 3, "{names:?}");
    for n in &names {
        assert_eq!(
            fs::read(a.path().join("out").join(n)).unwrap(),
            fs::read(b.path().join("out").join(n)).unwrap(),
            "{n:?}"
        );
    }
    let strip = |dir: &tempfile::TempDir| {
        read_ledger(&dir.path().join("out/ledger.csv"))
            .unwrap()
            .into_iter()
            .map(|r| (r.run_id, r.subcommand, r.spec_hash, r.seed, r.permutation_id, r.mode, r.test_accuracy))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn permutation_sweep_adds_24_ledger_rows() {
    let dir = workspace(&tiny_c4());
    let out = galupath(dir.path(), &["sweep", "--permutations", "--spec", "run.toml"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rows = read_ledger(&dir.path().join("out/ledger.csv")).unwrap();
    assert_eq!(rows.len(), 24);
    let mut ids: Vec<usize> = rows.iter().map(|r| r.permutation_id.unwrap()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..24).collect::<Vec<_>>());

    let report = galupath(dir.path(), &["report", "--ledger", "out/ledger.csv"]);
    assert!(report.status.success());
    let table = text(&report.stdout);
    assert!(table.contains("identity") && table.contains("permuted"), "{table}");
}

#[test]
fn allones_sweep_records_both_arms_per_seed() {
    let dir = workspace(TINY_FC);
    let out = galupath(dir.path(), &["sweep", "--allones", "--spec", "run.toml", "--seeds", "2"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("gates identical: true"));
    let rows = read_ledger(&dir.path().join("out/ledger.csv")).unwrap();
    let got: Vec<(u64, String)> = rows.iter().map(|r| (r.seed, r.mode.clone())).collect();
    assert_eq!(
        got,
        vec![
            (3, "dgn_soft_st_x".to_string()),
            (3, "dgn_soft_st_ones".to_string()),
            (4, "dgn_soft_st_x".to_string()),
            (4, "dgn_soft_st_ones".to_string()),
        ]
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = workspace(TINY_FC);
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.galupath.lock"), "1\n").unwrap();
    let out = galupath(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("in use"), "{}", text(&out.stderr));
}

#[test]
fn config_errors_name_the_key() {
    let dir = workspace(&TINY_FC.replace("depth = 3\n", ""));
    let out = galupath(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("arch.depth"), "{}", text(&out.stderr));
}

#[test]
fn ratio_study_reports_each_width() {
    let dir = tempfile::tempdir().unwrap();
    let out = galupath(
        dir.path(),
        &["ratio-study", "--widths", "8,16", "--seeds", "2", "--n-inputs", "4", "--out", "ratio.csv"],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(text(&out.stdout).contains("monotone:"));
}
