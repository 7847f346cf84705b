//! Outlier removal, z-scoring, hourly bucketing and LOCF imputation.

use crate::datasynth::types::{Cohort, Event, FeatureStats, WindowSpec};
use crate::error::{Error, Result};

/// Percentile `p` in `[0, 100]` of sorted data, interpolating linearly
/// between order statistics at rank `(n - 1) * p / 100`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn by_feature<'a>(events: impl IntoIterator<Item = &'a Event>, n_features: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::new(); n_features];
    for e in events {
        cols[e.feature].push(e.value);
    }
    cols
}

/// Why a feature was left unfiltered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    TooFewValues,
    NonPositiveP1,
}

/// Per-feature `[0.1 * p1, 10 * p99]` acceptance intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierBounds {
    pub p1: Vec<f64>,
    pub p99: Vec<f64>,
    /// `None` where filtering is skipped.
    pub bounds: Vec<Option<(f64, f64)>>,
    pub skipped: Vec<(usize, SkipReason)>,
}

impl OutlierBounds {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>, n_features: usize) -> Self {
        let mut out = OutlierBounds {
            p1: vec![f64::NAN; n_features],
            p99: vec![f64::NAN; n_features],
            bounds: vec![None; n_features],
            skipped: Vec::new(),
        };
        for (f, mut col) in by_feature(events, n_features).into_iter().enumerate() {
            if col.len() < 2 {
                out.skipped.push((f, SkipReason::TooFewValues));
                continue;
            }
            col.sort_by(f64::total_cmp);
            let (p1, p99) = (percentile_sorted(&col, 1.0), percentile_sorted(&col, 99.0));
            out.p1[f] = p1;
            out.p99[f] = p99;
            if p1 <= 0.0 {
                out.skipped.push((f, SkipReason::NonPositiveP1));
                continue;
            }
            out.bounds[f] = Some((0.1 * p1, 10.0 * p99));
        }
        out
    }

    pub fn keeps(&self, e: &Event) -> bool {
        match self.bounds[e.feature] {
            Some((lo, hi)) => e.value >= lo && e.value <= hi,
            None => true,
        }
    }
}

/// Drops events outside their feature's bounds; returns survivors and the drop count.
pub fn remove_outliers(events: &[Event], bounds: &OutlierBounds) -> (Vec<Event>, usize) {
    let kept: Vec<Event> = events.iter().copied().filter(|e| bounds.keeps(e)).collect();
    let dropped = events.len() - kept.len();
    (kept, dropped)
}

/// Mean and population standard deviation per feature; empty features get `(0, 0)`.
pub fn moments<'a>(events: impl IntoIterator<Item = &'a Event>, n_features: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let cols = by_feature(events, n_features);
    let mut mean = vec![0.0; n_features];
    let mut sd = vec![0.0; n_features];
    let mut counts = vec![0; n_features];
    for (f, col) in cols.iter().enumerate() {
        counts[f] = col.len();
        if col.is_empty() {
            continue;
        }
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        mean[f] = m;
        sd[f] = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, sd, counts)
}

/// `(value - mean) / sd`, with zero-variance features mapped to 0.
pub fn zscore(events: &[Event], mean: &[f64], sd: &[f64]) -> Vec<Event> {
    events
        .iter()
        .map(|e| Event {
            value: if sd[e.feature] > 0.0 {
                (e.value - mean[e.feature]) / sd[e.feature]
            } else {
                0.0
            },
            ..*e
        })
        .collect()
}

pub fn inverse_zscore(events: &[Event], mean: &[f64], sd: &[f64]) -> Vec<Event> {
    events
        .iter()
        .map(|e| Event {
            value: e.value * sd[e.feature] + mean[e.feature],
            ..*e
        })
        .collect()
}

/// Hourly grid `[T, F]` with `T = observation + horizon`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucketed {
    pub steps: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Averages readings per (hour, feature), carries the last observation
/// forward through gaps, and fills hours before the first reading with 0.
/// Readings before `observation - lookback` or past the grid are ignored.
pub fn bucket_and_impute(events: &[Event], n_features: usize, window: &WindowSpec) -> Bucketed {
    let steps = window.grid_steps();
    let start = (window.observation - window.lookback()) as f64;
    let mut sum = vec![0.0; steps * n_features];
    let mut count = vec![0u32; steps * n_features];
    for e in events {
        if e.time_hours < start || e.time_hours >= steps as f64 {
            continue;
        }
        let i = e.time_hours.floor() as usize * n_features + e.feature;
        sum[i] += e.value;
        count[i] += 1;
    }
    let mut values = vec![0.0; steps * n_features];
    let mut mask = vec![0.0; steps * n_features];
    for f in 0..n_features {
        let mut carry = 0.0;
        for t in 0..steps {
            let i = t * n_features + f;
            if count[i] > 0 {
                carry = sum[i] / count[i] as f64;
                mask[i] = 1.0;
            }
            values[i] = carry;
        }
    }
    Bucketed {
        steps,
        features: n_features,
        values,
        mask,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessReport {
    pub dropped_outliers: usize,
    pub skipped: Vec<(usize, SkipReason)>,
}

/// Filters outliers on raw values, computes statistics on the survivors and
/// z-scores every record in place.
pub fn preprocess(cohort: &mut Cohort) -> Result<PreprocessReport> {
    if cohort.stats.is_some() {
        return Err(Error::Config("cohort is already preprocessed".into()));
    }
    let f = cohort.n_features;
    let bounds = OutlierBounds::from_events(cohort.records.iter().flat_map(|r| r.events.iter()), f);
    let mut dropped = 0;
    for r in &mut cohort.records {
        let (kept, d) = remove_outliers(&r.events, &bounds);
        r.events = kept;
        dropped += d;
    }
    let (mean, stdev, counts) = moments(cohort.records.iter().flat_map(|r| r.events.iter()), f);
    for r in &mut cohort.records {
        r.events = zscore(&r.events, &mean, &stdev);
    }
    cohort.stats = Some(FeatureStats {
        mean,
        stdev,
        p1: bounds.p1,
        p99: bounds.p99,
        counts,
    });
    Ok(PreprocessReport {
        dropped_outliers: dropped,
        skipped: bounds.skipped,
    })
}
