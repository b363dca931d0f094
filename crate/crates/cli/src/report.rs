//! Ledger rows grouped into a comparison table.

use std::fmt::Write;

use galupath::data_io::LedgerRow;

struct Group {
    subcommand: String,
    mode: String,
    spec_hash: String,
    arm: &'static str,
    acc: Vec<f64>,
}

/// Permutation runs split into the identity and the rest.
fn arm(row: &LedgerRow) -> &'static str {
    match row.permutation_id {
        Some(0) => "identity",
        Some(_) => "permuted",
        None => "-",
    }
}

/// One line per (subcommand, mode, spec, arm) in order of first appearance,
/// with accuracies in percent.
pub fn render(rows: &[LedgerRow]) -> String {
    let mut groups: Vec<Group> = Vec::new();
    for r in rows {
        let a = arm(r);
        let pos = groups
            .iter()
            .position(|g| g.subcommand == r.subcommand && g.mode == r.mode && g.spec_hash == r.spec_hash && g.arm == a);
        let g = match pos {
            Some(i) => &mut groups[i],
            None => {
                groups.push(Group {
                    subcommand: r.subcommand.clone(),
                    mode: r.mode.clone(),
                    spec_hash: r.spec_hash.clone(),
                    arm: a,
                    acc: Vec::new(),
                });
                groups.last_mut().expect("just pushed")
            }
        };
        g.acc.push(100.0 * r.test_accuracy);
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<22} {:<12} {:<9} {:>4} {:>8} {:>7} {:>8} {:>8}",
        "subcommand", "mode", "spec", "arm", "runs", "mean %", "std", "min %", "max %"
    );
    for g in &groups {
        let n = g.acc.len() as f64;
        let mean = g.acc.iter().sum::<f64>() / n;
        let std = (g.acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        let min = g.acc.iter().copied().fold(f64::INFINITY, f64::min);
        let max = g.acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{:<20} {:<22} {:<12} {:<9} {:>4} {:>8.2} {:>7.2} {:>8.2} {:>8.2}",
            g.subcommand,
            g.mode,
            &g.spec_hash[..g.spec_hash.len().min(12)],
            g.arm,
            g.acc.len(),
            mean,
            std,
            min,
            max
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, perm: Option<usize>, acc: f64) -> LedgerRow {
        LedgerRow {
            run_id: "r".into(),
            subcommand: "sweep-permutations".into(),
            spec_hash: "abcdef0123456789".into(),
            seed: 0,
            permutation_id: perm,
            mode: mode.into(),
            test_accuracy: acc,
            wall_seconds: 1.0,
            timestamp: 0,
        }
    }

    #[test]
    fn groups_identity_apart_from_other_permutations() {
        let rows = [
            row("dgn_hard_pg", Some(0), 0.9),
            row("dgn_hard_pg", Some(1), 0.8),
            row("dgn_hard_pg", Some(2), 0.6),
        ];
        let table = render(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("identity") && lines[1].contains("90.00"));
        assert!(lines[2].contains("permuted") && lines[2].contains("70.00") && lines[2].contains("10.00"));
    }

    #[test]
    fn empty_ledger_is_just_the_header() {
        assert_eq!(render(&[]).lines().count(), 1);
    }
}
