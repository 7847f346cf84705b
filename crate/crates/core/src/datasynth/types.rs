use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time_hours: f64,
    pub feature: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
    Excluded,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "0",
            Label::Positive => "1",
            Label::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "0" => Some(Label::Negative),
            "1" => Some(Label::Positive),
            "excluded" => Some(Label::Excluded),
            _ => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Label::Negative => Some(0.0),
            Label::Positive => Some(1.0),
            Label::Excluded => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<Event>,
    /// Length of stay in hours.
    pub length_hours: f64,
    pub labels: BTreeMap<String, Label>,
}

/// Per-feature statistics after outlier removal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
    pub p1: Vec<f64>,
    pub p99: Vec<f64>,
    pub counts: Vec<usize>,
}

/// What a synthetic cohort was generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_patients: usize,
    pub n_features: usize,
    /// Channels driven by the outcome latent.
    pub relevant: Vec<usize>,
    /// Channels driven by the unrelated latent behind the `alt` task, if any.
    pub alt_relevant: Vec<usize>,
    pub channel_noise: f64,
    pub label_noise: f64,
    pub observation_rate: f64,
    pub outlier_rate: f64,
    pub latent_persistence: f64,
    /// Raw value = base + scale * signal, per channel.
    pub channel_base: Vec<f64>,
    pub channel_scale: Vec<f64>,
    pub tasks: Vec<String>,
    pub n_events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub n_features: usize,
    pub stats: Option<FeatureStats>,
    pub manifest: Option<Manifest>,
}

impl Cohort {
    pub fn n_events(&self) -> usize {
        self.records.iter().map(|r| r.events.len()).sum()
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut t: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.labels.keys().cloned())
            .collect();
        t.sort();
        t.dedup();
        t
    }

    /// (positive, negative, excluded) counts for one task; records without
    /// the task count as excluded.
    pub fn label_counts(&self, task: &str) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.records {
            match r.labels.get(task) {
                Some(Label::Positive) => c.0 += 1,
                Some(Label::Negative) => c.1 += 1,
                _ => c.2 += 1,
            }
        }
        c
    }
}

/// Time windows, in hours from admission.
///
/// The model sees `[observation - lookback, observation)`, forecasts the
/// next `horizon` hours, and the outcome is read over
/// `[observation + gap, observation + gap + label_window)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub observation: usize,
    pub horizon: usize,
    #[serde(default)]
    pub gap: usize,
    pub label_window: usize,
    /// Defaults to `observation`.
    #[serde(default)]
    pub max_lookback: Option<usize>,
}

impl WindowSpec {
    pub fn new(observation: usize, horizon: usize, label_window: usize) -> Self {
        Self {
            observation,
            horizon,
            gap: 0,
            label_window,
            max_lookback: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.observation == 0 || self.horizon == 0 || self.label_window == 0 {
            return Err(Error::Config(format!("window lengths must be positive: {self:?}")));
        }
        if self.lookback() == 0 || self.lookback() > self.observation {
            return Err(Error::Config("max_lookback must be in 1..=observation".into()));
        }
        Ok(())
    }

    pub fn lookback(&self) -> usize {
        self.max_lookback.unwrap_or(self.observation)
    }

    /// Hourly steps on the model grid: observation plus forecast horizon.
    pub fn grid_steps(&self) -> usize {
        self.observation + self.horizon
    }

    pub fn prediction_time(&self) -> f64 {
        self.observation as f64
    }

    pub fn label_start(&self) -> f64 {
        (self.observation + self.gap) as f64
    }

    pub fn label_end(&self) -> f64 {
        (self.observation + self.gap + self.label_window) as f64
    }
}
