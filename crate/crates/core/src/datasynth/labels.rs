use crate::datasynth::types::{Event, Label, PatientRecord, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Comparison {
    AtLeast,
    AtMost,
}

/// When an outcome is considered to have happened.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// A reading of `feature` crossing `value`.
    Threshold {
        feature: usize,
        comparison: Comparison,
        value: f64,
    },
    /// Any reading of `feature` marks the event.
    EventFlag { feature: usize },
}

impl Criterion {
    pub fn fires(&self, e: &Event) -> bool {
        match *self {
            Criterion::Threshold {
                feature,
                comparison,
                value,
            } => {
                e.feature == feature
                    && match comparison {
                        Comparison::AtLeast => e.value >= value,
                        Comparison::AtMost => e.value <= value,
                    }
            }
            Criterion::EventFlag { feature } => e.feature == feature,
        }
    }
}

/// Excluded when the record does not outlast the observation window or the
/// criterion already fired before prediction time; positive when it fires
/// inside the label window; negative otherwise.
pub fn label_record(record: &PatientRecord, criterion: &Criterion, window: &WindowSpec) -> Label {
    if record.length_hours <= window.prediction_time() {
        return Label::Excluded;
    }
    let fire_times = record.events.iter().filter(|e| criterion.fires(e)).map(|e| e.time_hours);
    let mut positive = false;
    for t in fire_times {
        if t < window.prediction_time() {
            return Label::Excluded;
        }
        if t >= window.label_start() && t < window.label_end() {
            positive = true;
        }
    }
    if positive {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Labels every record and stores them under `task`.
pub fn make_labels(records: &mut [PatientRecord], task: &str, criterion: &Criterion, window: &WindowSpec) -> Vec<Label> {
    records
        .iter_mut()
        .map(|r| {
            let l = label_record(r, criterion, window);
            r.labels.insert(task.to_string(), l);
            l
        })
        .collect()
}
