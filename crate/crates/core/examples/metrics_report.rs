//! Ranking metrics with ties, fold summaries, and the report table.

use autoselect::baselines::{with_summaries, MetricsRow};
use autoselect::cli::{render_report, ReportTable};
use autoselect::evalkit::{auc_pr, auc_roc, summarize};

fn main() -> anyhow::Result<()> {
    let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.3];
    let labels = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    println!("auc-roc {:.4}  auc-pr {:.4}", auc_roc(&scores, &labels)?, auc_pr(&scores, &labels)?);
    println!("folds {}", summarize(&[0.81, 0.85, 0.84])?);

    let mut rows = Vec::new();
    for (arm, base) in [("supervised", 0.78), ("autoselect", 0.82)] {
        for fold in 0..3 {
            rows.push(MetricsRow {
                arm: arm.into(),
                task: "primary".into(),
                fraction: 0.01,
                fold: Some(fold),
                auc_roc: base + 0.01 * fold as f64,
                auc_pr: base,
                sem: None,
            });
        }
    }
    let (text, _) = render_report(&ReportTable::from_rows(&with_summaries(&rows)?));
    print!("{text}");
    Ok(())
}
