//! The per-arm metrics CSV `arm,task,fraction,fold,auc_roc,auc_pr,sem`.
//!
//! Per-fold rows leave `sem` empty; each (arm, task, fraction) group ends in
//! a `mean` row carrying the fold average and the standard error of AUC-ROC.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalkit::{fmt_float, summarize};

pub const METRICS_HEADER: &str = "arm,task,fraction,fold,auc_roc,auc_pr,sem";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub arm: String,
    pub task: String,
    pub fraction: f64,
    /// `None` on summary rows.
    pub fold: Option<usize>,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub sem: Option<f64>,
}

fn group_key(r: &MetricsRow) -> (String, String, u64) {
    (r.arm.clone(), r.task.clone(), r.fraction.to_bits())
}

/// Per-fold rows followed by one summary row per group, in sorted group order.
pub fn with_summaries(per_fold: &[MetricsRow]) -> Result<Vec<MetricsRow>> {
    let mut groups: BTreeMap<(String, String, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for r in per_fold.iter().filter(|r| r.fold.is_some()) {
        groups.entry(group_key(r)).or_default().push(r);
    }
    let mut out = Vec::new();
    for rows in groups.into_values() {
        let mut rows = rows;
        rows.sort_by_key(|r| r.fold);
        let roc = summarize(&rows.iter().map(|r| r.auc_roc).collect::<Vec<_>>())?;
        let pr = summarize(&rows.iter().map(|r| r.auc_pr).collect::<Vec<_>>())?;
        out.extend(rows.iter().map(|r| (*r).clone()));
        out.push(MetricsRow {
            fold: None,
            auc_roc: roc.mean,
            auc_pr: pr.mean,
            sem: roc.sem,
            ..rows[0].clone()
        });
    }
    Ok(out)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.arm,
            r.task,
            fmt_float(r.fraction),
            r.fold.map_or("mean".to_string(), |f| f.to_string()),
            fmt_float(r.auc_roc),
            fmt_float(r.auc_pr),
            r.sem.map(fmt_float).unwrap_or_default(),
        ));
    }
    out
}

fn parse_f64(field: &str, path: &str, line: usize) -> Result<f64> {
    if field == "nan" {
        return Ok(f64::NAN);
    }
    field.parse().map_err(|_| Error::Schema {
        path: path.to_string(),
        line,
        message: format!("not a number: {field:?}"),
    })
}

pub fn parse_metrics_csv(text: &str, path: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Schema {
                path: path.to_string(),
                line: 1,
                message: format!("expected header {METRICS_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Schema {
                path: path.to_string(),
                line: line_no,
                message: format!("expected 7 fields, found {}", f.len()),
            });
        }
        let fold = match f[3] {
            "mean" => None,
            s => Some(s.parse().map_err(|_| Error::Schema {
                path: path.to_string(),
                line: line_no,
                message: format!("bad fold {s:?}"),
            })?),
        };
        rows.push(MetricsRow {
            arm: f[0].to_string(),
            task: f[1].to_string(),
            fraction: parse_f64(f[2], path, line_no)?,
            fold,
            auc_roc: parse_f64(f[4], path, line_no)?,
            auc_pr: parse_f64(f[5], path, line_no)?,
            sem: if f[6].is_empty() { None } else { Some(parse_f64(f[6], path, line_no)?) },
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text, &path.display().to_string())
}
