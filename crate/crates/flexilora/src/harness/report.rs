//! Report emission: one comma-separated table plus a human-readable table,
//! and per-family (params, metric) pairs for Pareto plotting by external
//! tools. Rows are methods; columns carry parameter capacity, expected
//! active parameters, per-split and per-difficulty-class metrics, and the
//! rank histogram.

use crate::error::Result;
use crate::train::EvalSummary;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct MethodRow {
    pub descriptor: String,
    pub capacity_params: usize,
    pub per_family: BTreeMap<String, EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub table: PathBuf,
    pub pareto: Vec<PathBuf>,
}

fn histogram_cell(summary: &EvalSummary) -> String {
    summary
        .rank_histogram
        .iter()
        .map(|(r, c)| format!("{r}:{c}"))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn emit_report(rows: &[MethodRow], dir: &Path) -> Result<ReportPaths> {
    assert!(!rows.is_empty(), "report needs at least one evaluated method");
    std::fs::create_dir_all(dir)?;
    let families: Vec<String> = rows[0].per_family.keys().cloned().collect();

    // comma-separated table
    let mut csv = String::from("policy,capacity_params");
    for f in &families {
        csv.push_str(&format!(
            ",{f}_metric,{f}_mean,{f}_easy,{f}_hard,{f}_expected_params,{f}_rank_hist"
        ));
    }
    csv.push('\n');
    for row in rows {
        csv.push_str(&format!("{},{}", row.descriptor, row.capacity_params));
        for f in &families {
            let s = &row.per_family[f];
            csv.push_str(&format!(
                ",{},{:.6},{:.6},{:.6},{:.1},{}",
                s.metric_kind.name(),
                s.mean,
                s.easy_mean,
                s.hard_mean,
                s.expected_active_params,
                histogram_cell(s)
            ));
        }
        csv.push('\n');
    }
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, &csv)?;

    // human-readable table
    let mut txt = String::new();
    for f in &families {
        txt.push_str(&format!("== {f} ==\n"));
        txt.push_str(&format!(
            "{:<22} {:>10} {:>12} {:>8} {:>8} {:>8}  {}\n",
            "policy", "capacity", "E[active]", "mean", "easy", "hard", "rank histogram"
        ));
        for row in rows {
            let s = &row.per_family[f];
            txt.push_str(&format!(
                "{:<22} {:>10} {:>12.1} {:>8.4} {:>8.4} {:>8.4}  {}\n",
                row.descriptor,
                row.capacity_params,
                s.expected_active_params,
                s.mean,
                s.easy_mean,
                s.hard_mean,
                histogram_cell(s)
            ));
        }
        txt.push('\n');
    }
    let table_path = dir.join("report.txt");
    std::fs::write(&table_path, &txt)?;

    // (params, metric) pairs per family for Pareto plots
    let mut pareto = Vec::new();
    for f in &families {
        let mut body = String::from("expected_active_params,metric\n");
        for row in rows {
            let s = &row.per_family[f];
            body.push_str(&format!("{:.1},{:.6}\n", s.expected_active_params, s.mean));
        }
        let p = dir.join(format!("pareto-{f}.csv"));
        std::fs::write(&p, body)?;
        pareto.push(p);
    }
    Ok(ReportPaths { csv: csv_path, table: table_path, pareto })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::MetricKind;

    fn summary(mean: f64, expected: f64) -> EvalSummary {
        EvalSummary {
            policy: "x".into(),
            metric_kind: MetricKind::AnswerAccuracy,
            mean,
            easy_mean: mean,
            hard_mean: mean,
            n: 10,
            n_easy: 5,
            n_hard: 5,
            rank_histogram: [(8usize, 10usize)].into_iter().collect(),
            expected_active_params: expected,
            capacity_params: 8192,
            per_sample: vec![],
        }
    }

    #[test]
    fn single_method_report_is_valid_and_histogram_sums_match() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MethodRow {
            descriptor: "lora(r=8)".into(),
            capacity_params: 8192,
            per_family: [("mod_chain".to_string(), summary(0.5, 8192.0))].into_iter().collect(),
        }];
        let paths = emit_report(&rows, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&paths.csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.contains("lora(r=8),8192"));
        assert!(csv.contains("8:10"));
        let hist_total: usize = rows[0].per_family["mod_chain"].rank_histogram.values().sum();
        assert_eq!(hist_total, rows[0].per_family["mod_chain"].n);
    }

    #[test]
    fn fixed4_vs_fixed8_capacity_ratio_is_exactly_two() {
        use crate::adapters::{count_params, AdaptTarget, AdapterLayout};
        let layout = AdapterLayout::new(4, 64, &AdaptTarget::defaults());
        let rows = vec![
            MethodRow {
                descriptor: "lora(r=4)".into(),
                capacity_params: count_params(&layout, 4),
                per_family: [("kv_recall".to_string(), summary(0.4, 4096.0))].into_iter().collect(),
            },
            MethodRow {
                descriptor: "lora(r=8)".into(),
                capacity_params: count_params(&layout, 8),
                per_family: [("kv_recall".to_string(), summary(0.5, 8192.0))].into_iter().collect(),
            },
        ];
        assert_eq!(rows[1].capacity_params, 2 * rows[0].capacity_params);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&rows, dir.path()).unwrap();
    }

    #[test]
    fn emission_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MethodRow {
            descriptor: "dylora+(1..8)".into(),
            capacity_params: 8192,
            per_family: [("mod_chain".to_string(), summary(0.25, 5120.0))].into_iter().collect(),
        }];
        let a = emit_report(&rows, dir.path()).unwrap();
        let first = std::fs::read(&a.csv).unwrap();
        let b = emit_report(&rows, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(&b.csv).unwrap());
    }
}
