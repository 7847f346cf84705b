use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-fold values with their mean and standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; absent below two folds.
    pub sem: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("summary of zero folds"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = (values.len() >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Ok(MetricSummary {
        values: values.to_vec(),
        mean,
        sem,
    })
}

impl fmt::Display for MetricSummary {
    /// `0.833 (0.017)`, or just the mean when the error is absent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sem {
            Some(s) => write!(f, "{:.3} ({:.3})", self.mean, s),
            None => write!(f, "{:.3}", self.mean),
        }
    }
}

/// One `step,split,metric,value` row of a training-dynamics trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsRow {
    pub step: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    pub fn push(&mut self, step: usize, split: &'static str, metric: &'static str, value: f64) {
        self.rows.push(DynamicsRow {
            step,
            split,
            metric,
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, fmt_float(r.value)));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Shortest round-trip decimal; non-finite values become `nan`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}

/// Writes `text` to `path`, creating or truncating it.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_summary() {
        let s = summarize(&[0.8, 0.9]).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.sem.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn identical_folds_zero_sem() {
        assert_eq!(summarize(&[0.7; 4]).unwrap().sem, Some(0.0));
    }

    #[test]
    fn single_fold_has_no_sem() {
        let s = summarize(&[0.833]).unwrap();
        assert_eq!(s.sem, None);
        assert_eq!(s.to_string(), "0.833");
    }

    #[test]
    fn table_cell_format() {
        let s = MetricSummary {
            values: vec![],
            mean: 0.833,
            sem: Some(0.017),
        };
        assert_eq!(s.to_string(), "0.833 (0.017)");
    }

    #[test]
    fn dynamics_csv_header() {
        let mut log = DynamicsLog::default();
        log.push(50, "val", "auc_roc", 0.75);
        assert_eq!(log.to_csv(), "step,split,metric,value\n50,val,auc_roc,0.75\n");
    }
}
