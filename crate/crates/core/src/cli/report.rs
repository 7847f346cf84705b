use std::path::Path;

use crate::baselines::{read_metrics_csv, ArmKind, MetricsRow};
use crate::error::Result;
use crate::evalkit::{fmt_float, write_text};

/// Rows are (task, fraction) pairs in first-seen order; columns are arms in
/// the canonical arm order, unknown names last.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub arms: Vec<String>,
    pub rows: Vec<(String, f64)>,
    /// `cells[row][arm]`; empty when the arm has no result there.
    pub cells: Vec<Vec<String>>,
}

fn arm_rank(label: &str) -> usize {
    let kind = label.split('@').next().unwrap_or(label);
    ArmKind::ALL.iter().position(|k| k.as_str() == kind).unwrap_or(ArmKind::ALL.len())
}

fn cell(r: &MetricsRow) -> String {
    match r.sem {
        Some(s) => format!("{:.3} ({:.3})", r.auc_roc, s),
        None => format!("{:.3}", r.auc_roc),
    }
}

impl ReportTable {
    /// Uses the summary rows; per-fold rows are ignored.
    pub fn from_rows(rows: &[MetricsRow]) -> Self {
        let summary: Vec<&MetricsRow> = rows.iter().filter(|r| r.fold.is_none()).collect();
        let mut arms: Vec<String> = Vec::new();
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &summary {
            if !arms.contains(&r.arm) {
                arms.push(r.arm.clone());
            }
            if !keys.iter().any(|(t, f)| *t == r.task && f.to_bits() == r.fraction.to_bits()) {
                keys.push((r.task.clone(), r.fraction));
            }
        }
        arms.sort_by_key(|a| (arm_rank(a), a.clone()));
        let cells = keys
            .iter()
            .map(|(t, f)| {
                arms.iter()
                    .map(|a| {
                        summary
                            .iter()
                            .find(|r| r.arm == *a && r.task == *t && r.fraction.to_bits() == f.to_bits())
                            .map(|r| cell(r))
                            .unwrap_or_default()
                    })
                    .collect()
            })
            .collect();
        Self { arms, rows: keys, cells }
    }
}

/// Aligned text and CSV renderings of the table.
pub fn render_report(table: &ReportTable) -> (String, String) {
    let mut header = vec!["task".to_string(), "fraction".to_string()];
    header.extend(table.arms.iter().cloned());
    let mut lines = vec![header];
    for ((task, fraction), cells) in table.rows.iter().zip(&table.cells) {
        let mut line = vec![task.clone(), fmt_float(*fraction)];
        line.extend(cells.iter().cloned());
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    let mut csv = String::new();
    for line in &lines {
        let padded: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        text.push_str(padded.join("  ").trim_end());
        text.push('\n');
        let quoted: Vec<String> = line
            .iter()
            .map(|s| if s.contains(',') || s.contains(' ') { format!("\"{s}\"") } else { s.clone() })
            .collect();
        csv.push_str(&quoted.join(","));
        csv.push('\n');
    }
    (text, csv)
}

/// Reads `metrics.csv` in `dir` and writes `report.txt` and `report.csv` beside it.
pub fn cmd_report(dir: &Path) -> Result<(String, ReportTable)> {
    let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
    let table = ReportTable::from_rows(&rows);
    let (text, csv) = render_report(&table);
    write_text(&dir.join("report.txt"), &text)?;
    write_text(&dir.join("report.csv"), &csv)?;
    Ok((text, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::with_summaries;

    fn row(arm: &str, task: &str, fraction: f64, fold: usize, auc: f64) -> MetricsRow {
        MetricsRow {
            arm: arm.into(),
            task: task.into(),
            fraction,
            fold: Some(fold),
            auc_roc: auc,
            auc_pr: auc,
            sem: None,
        }
    }

    #[test]
    fn single_fold_has_no_sem() {
        let rows = with_summaries(&[row("supervised", "primary", 1.0, 0, 0.8333)]).unwrap();
        let t = ReportTable::from_rows(&rows);
        assert_eq!(t.cells, vec![vec!["0.833".to_string()]]);
    }

    #[test]
    fn shape_order_and_blank_cells() {
        let mut per_fold = Vec::new();
        for task in ["primary", "secondary"] {
            for fr in [0.01, 0.1, 1.0] {
                for fold in 0..2 {
                    per_fold.push(row("supervised", task, fr, fold, 0.8 + 0.02 * fold as f64));
                    if fr == 1.0 {
                        per_fold.push(row("autoselect", task, fr, fold, 0.85));
                    }
                }
            }
        }
        let t = ReportTable::from_rows(&with_summaries(&per_fold).unwrap());
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.arms.len(), 2);
        assert_eq!(t.arms, ["supervised", "autoselect"]);
        let (sup, auto) = (0, 1);
        assert_eq!(t.cells[0][sup], "0.810 (0.010)");
        let blanks = t.cells.iter().filter(|c| c[auto].is_empty()).count();
        assert_eq!(blanks, 4);
        let (text, csv) = render_report(&t);
        assert_eq!(text.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().contains("\"0.810 (0.010)\""));
    }
}
