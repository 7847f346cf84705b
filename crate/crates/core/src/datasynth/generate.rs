//! Synthetic EMR-like cohorts with known task relevance.
//!
//! Each patient carries an hourly latent state `z_t`, a stationary AR(1)
//! process with unit variance. Channels in the relevant set `S` read
//! `z_t` plus white observation noise; every other channel reads its own
//! independent AR(1) process with the same persistence and variance, so
//! relevant and irrelevant channels are equally forecastable and differ only
//! in what they say about the outcome. Raw values are `base + scale *
//! signal` with positive per-channel bases, mimicking lab values.
//!
//! Tasks:
//! - `primary`: mean of `z` over the label window against its cohort median,
//!   passed through a logistic link with temperature `label_noise`
//!   (temperature 0 is a hard threshold).
//! - `secondary`: value of `z` at the last hour of the label window against
//!   its cohort 70th percentile, same link. Shares `S` with `primary`.
//! - `alt` (only with `alt_relevant`): like `primary`, on a second latent that
//!   drives the `alt_relevant` channels instead of `S`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasynth::types::{Cohort, Event, Label, Manifest, PatientRecord, WindowSpec};
use crate::error::{Error, Result};
use crate::numcore::RngStream;

pub const PRIMARY_TASK: &str = "primary";
pub const SECONDARY_TASK: &str = "secondary";
pub const ALT_TASK: &str = "alt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_features: usize,
    pub relevant: Vec<usize>,
    pub alt_relevant: Vec<usize>,
    pub seed: u64,
    pub window: WindowSpec,
    /// AR(1) coefficient of the hourly latent processes.
    pub persistence: f64,
    /// Std of white noise on each reading, in latent units.
    pub channel_noise: f64,
    /// Logistic temperature of the label link.
    pub label_noise: f64,
    /// Probability that a channel is read in a given hour.
    pub observation_rate: f64,
    /// Per-channel override of `observation_rate`.
    pub channel_rates: Option<Vec<f64>>,
    /// Probability of a second reading in an hour that already has one.
    pub repeat_rate: f64,
    /// Probability that a reading is corrupted by a factor of 1000.
    pub outlier_rate: f64,
    /// Records run `observation + gap + label_window` hours plus up to this many.
    pub extra_hours: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            n_features: 16,
            relevant: vec![0, 1, 2, 3],
            alt_relevant: vec![],
            seed: 0,
            window: WindowSpec::new(16, 8, 8),
            persistence: 0.97,
            channel_noise: 2.0,
            label_noise: 0.1,
            observation_rate: 0.5,
            channel_rates: None,
            repeat_rate: 0.1,
            outlier_rate: 0.001,
            extra_hours: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.n_features;
        if self.n_patients == 0 || f == 0 {
            return Err(Error::Config("cohort needs at least one patient and one feature".into()));
        }
        check_set("relevant", &self.relevant, f, false)?;
        check_set("alt_relevant", &self.alt_relevant, f, true)?;
        if self.relevant.iter().any(|c| self.alt_relevant.contains(c)) {
            return Err(Error::Config("relevant and alt_relevant must be disjoint".into()));
        }
        self.window.validate()?;
        if !(0.0..1.0).contains(&self.persistence) {
            return Err(Error::Config("persistence must be in [0, 1)".into()));
        }
        let probs = [self.observation_rate, self.repeat_rate, self.outlier_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("rates must be probabilities".into()));
        }
        if let Some(r) = &self.channel_rates {
            if r.len() != f || r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!("channel_rates needs {f} probabilities")));
            }
        }
        if self.channel_noise < 0.0 || self.label_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    fn rate(&self, f: usize) -> f64 {
        self.channel_rates.as_ref().map_or(self.observation_rate, |r| r[f])
    }
}

fn check_set(name: &str, set: &[usize], f: usize, may_be_empty: bool) -> Result<()> {
    if set.is_empty() && !may_be_empty {
        return Err(Error::Config(format!("{name} set must be non-empty")));
    }
    let mut seen = vec![false; f];
    for &c in set {
        if c >= f {
            return Err(Error::Config(format!("{name} channel {c} outside 0..{f}")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::Config(format!("{name} channel {c} listed twice")));
        }
    }
    Ok(())
}

/// Stationary unit-variance AR(1) path of `len` hours.
fn ar1(rng: &mut impl Rng, phi: f64, len: usize) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut z = Vec::with_capacity(len);
    let mut x: f64 = rng.sample(StandardNormal);
    for _ in 0..len {
        z.push(x);
        let e: f64 = rng.sample(StandardNormal);
        x = phi * x + innov * e;
    }
    z
}

fn window_mean(z: &[f64], w: &WindowSpec) -> f64 {
    let (a, b) = (w.label_start() as usize, w.label_end() as usize);
    z[a..b].iter().sum::<f64>() / (b - a) as f64
}

/// Linear-interpolation quantile of unsorted data.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::datasynth::preprocess::percentile_sorted(&v, q * 100.0)
}

struct Latents {
    primary: Vec<f64>,
    alt: Option<Vec<f64>>,
}

fn link(score: f64, threshold: f64, temperature: f64, rng: &mut impl Rng) -> Label {
    let positive = if temperature == 0.0 {
        score > threshold
    } else {
        let p = 1.0 / (1.0 + (-(score - threshold) / temperature).exp());
        rng.random::<f64>() < p
    };
    if positive {
        Label::Positive
    } else {
        Label::Negative
    }
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "synth", 0);
    let f = cfg.n_features;
    let w = cfg.window;
    let min_len = w.observation + w.gap + w.label_window;

    let mut chan = root.derive("channels", 0).rng();
    let base: Vec<f64> = (0..f).map(|_| chan.random_range(20.0..120.0)).collect();
    let scale: Vec<f64> = base.iter().map(|b| 0.1 * b).collect();

    let mut owner = vec![None; f];
    for &c in &cfg.relevant {
        owner[c] = Some(false);
    }
    for &c in &cfg.alt_relevant {
        owner[c] = Some(true);
    }

    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut latents = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let stream = root.derive("patient", i as u64);
        let mut rng = stream.rng();
        let len = min_len + rng.random_range(0..=cfg.extra_hours);
        let primary = ar1(&mut rng, cfg.persistence, len);
        let alt = (!cfg.alt_relevant.is_empty()).then(|| ar1(&mut rng, cfg.persistence, len));
        let mut events = Vec::new();
        for ch in 0..f {
            let own = owner[ch].is_none().then(|| ar1(&mut rng, cfg.persistence, len));
            let signal_at = |h: usize| match owner[ch] {
                Some(false) => primary[h],
                Some(true) => alt.as_ref().unwrap()[h],
                None => own.as_ref().unwrap()[h],
            };
            for h in 0..len {
                if rng.random::<f64>() >= cfg.rate(ch) {
                    continue;
                }
                let reads = 1 + usize::from(rng.random::<f64>() < cfg.repeat_rate);
                for _ in 0..reads {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut value = base[ch] + scale[ch] * (signal_at(h) + cfg.channel_noise * noise);
                    if rng.random::<f64>() < cfg.outlier_rate {
                        value *= 1000.0;
                    }
                    events.push(Event {
                        time_hours: h as f64 + rng.random::<f64>(),
                        feature: ch,
                        value,
                    });
                }
            }
        }
        events.sort_by(|a, b| a.time_hours.total_cmp(&b.time_hours).then(a.feature.cmp(&b.feature)));
        records.push(PatientRecord {
            patient_id: format!("p{i:06}"),
            events,
            length_hours: len as f64,
            labels: BTreeMap::new(),
        });
        latents.push(Latents { primary, alt });
    }

    let last = w.label_end() as usize - 1;
    let mean_scores: Vec<f64> = latents.iter().map(|l| window_mean(&l.primary, &w)).collect();
    let end_scores: Vec<f64> = latents.iter().map(|l| l.primary[last]).collect();
    let mut tasks = vec![PRIMARY_TASK.to_string(), SECONDARY_TASK.to_string()];
    let mut scored: Vec<(&str, Vec<f64>, f64)> = vec![
        (PRIMARY_TASK, mean_scores.clone(), quantile(&mean_scores, 0.5)),
        (SECONDARY_TASK, end_scores.clone(), quantile(&end_scores, 0.7)),
    ];
    if !cfg.alt_relevant.is_empty() {
        let alt_scores: Vec<f64> = latents
            .iter()
            .map(|l| window_mean(l.alt.as_ref().unwrap(), &w))
            .collect();
        let t = quantile(&alt_scores, 0.5);
        scored.push((ALT_TASK, alt_scores, t));
        tasks.push(ALT_TASK.to_string());
    }
    for (k, (task, scores, threshold)) in scored.iter().enumerate() {
        for (i, rec) in records.iter_mut().enumerate() {
            let mut rng = root.derive("label", (i * 8 + k) as u64).rng();
            rec.labels
                .insert(task.to_string(), link(scores[i], *threshold, cfg.label_noise, &mut rng));
        }
    }

    let n_events = records.iter().map(|r| r.events.len()).sum();
    let manifest = Manifest {
        seed: cfg.seed,
        n_patients: cfg.n_patients,
        n_features: f,
        relevant: cfg.relevant.clone(),
        alt_relevant: cfg.alt_relevant.clone(),
        channel_noise: cfg.channel_noise,
        label_noise: cfg.label_noise,
        observation_rate: cfg.observation_rate,
        outlier_rate: cfg.outlier_rate,
        latent_persistence: cfg.persistence,
        channel_base: base,
        channel_scale: scale,
        tasks,
        n_events,
    };
    Ok(Cohort {
        records,
        n_features: f,
        stats: None,
        manifest: Some(manifest),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 60,
            n_features: 5,
            relevant: vec![1, 3],
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(7)).unwrap();
        let b = generate_cohort(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(8)).unwrap();
        assert_ne!(a.records[0].events, c.records[0].events);
    }

    #[test]
    fn invalid_sets_rejected() {
        let bad = |relevant: Vec<usize>| SynthConfig { relevant, ..small(0) };
        assert!(generate_cohort(&bad(vec![])).is_err());
        assert!(generate_cohort(&bad(vec![5])).is_err());
        assert!(generate_cohort(&bad(vec![1, 1])).is_err());
        let overlap = SynthConfig {
            alt_relevant: vec![3, 4],
            ..small(0)
        };
        assert!(generate_cohort(&overlap).is_err());
    }

    #[test]
    fn records_are_well_formed() {
        let c = generate_cohort(&small(3)).unwrap();
        let m = c.manifest.as_ref().unwrap();
        assert_eq!(m.relevant, vec![1, 3]);
        assert_eq!(m.n_events, c.n_events());
        for r in &c.records {
            assert!(r.length_hours >= 24.0);
            for e in &r.events {
                assert!(e.time_hours >= 0.0 && e.time_hours < r.length_hours);
                assert!(e.feature < 5);
            }
            assert_eq!(r.labels.len(), 2);
        }
    }

    /// With every channel relevant, no noise and dense hourly readings, any
    /// one channel's trajectory separates the classes perfectly.
    #[test]
    fn single_channel_determines_label_without_noise() {
        let cfg = SynthConfig {
            n_patients: 200,
            n_features: 3,
            relevant: vec![0, 1, 2],
            channel_noise: 0.0,
            label_noise: 0.0,
            observation_rate: 1.0,
            repeat_rate: 0.0,
            outlier_rate: 0.0,
            ..SynthConfig::default()
        };
        let c = generate_cohort(&cfg).unwrap();
        let m = c.manifest.as_ref().unwrap();
        let w = cfg.window;
        for ch in 0..3 {
            let (mut max_neg, mut min_pos) = (f64::NEG_INFINITY, f64::INFINITY);
            for r in &c.records {
                let z: Vec<f64> = r
                    .events
                    .iter()
                    .filter(|e| e.feature == ch)
                    .filter(|e| e.time_hours >= w.label_start() && e.time_hours < w.label_end())
                    .map(|e| (e.value - m.channel_base[ch]) / m.channel_scale[ch])
                    .collect();
                assert_eq!(z.len(), w.label_window);
                let score = z.iter().sum::<f64>() / z.len() as f64;
                match r.labels[PRIMARY_TASK] {
                    Label::Positive => min_pos = min_pos.min(score),
                    _ => max_neg = max_neg.max(score),
                }
            }
            assert!(max_neg < min_pos, "channel {ch}: {max_neg} !< {min_pos}");
        }
    }

    #[test]
    fn median_threshold_balances_classes() {
        let cfg = SynthConfig {
            n_patients: 10_000,
            n_features: 2,
            relevant: vec![0],
            label_noise: 0.3,
            observation_rate: 0.1,
            ..SynthConfig::default()
        };
        let c = generate_cohort(&cfg).unwrap();
        let (pos, neg, excl) = c.label_counts(PRIMARY_TASK);
        assert_eq!(excl, 0);
        let rate = pos as f64 / (pos + neg) as f64;
        assert!((rate - 0.5).abs() <= 0.02, "positive rate {rate}");
        let (pos2, _, _) = c.label_counts(SECONDARY_TASK);
        assert!((pos2 as f64 / 10_000.0 - 0.3).abs() < 0.05);
    }

    #[test]
    fn alt_task_present_only_when_requested() {
        let c = generate_cohort(&SynthConfig {
            alt_relevant: vec![0, 2],
            ..small(1)
        })
        .unwrap();
        assert_eq!(c.tasks(), vec!["alt", "primary", "secondary"]);
    }
}
