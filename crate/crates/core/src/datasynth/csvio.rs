//! Cohort exchange as two CSV files.
//!
//! ```text
//! events.csv  patient_id,time_hours,feature_id,value
//! labels.csv  patient_id,task,label        label in {0, 1, excluded}
//! ```
//!
//! A record's length is taken to be its latest event time.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datasynth::types::{Cohort, Event, Label, PatientRecord};
use crate::error::{Error, Result};

const EVENTS_HEADER: [&str; 4] = ["patient_id", "time_hours", "feature_id", "value"];
const LABELS_HEADER: [&str; 3] = ["patient_id", "task", "label"];

fn schema(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line: line as usize,
        message: message.into(),
    }
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => schema(path, 1, format!("{other:?}")),
        })?;
    let found = rdr.headers().map_err(|e| schema(path, 1, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(schema(path, 1, format!("expected header `{}`", header.join(","))));
    }
    Ok(rdr)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn record_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    schema(path, line, e.to_string())
}

/// Reads a cohort. `n_features` defaults to one past the largest feature id.
pub fn ingest_csv(events_path: &Path, labels_path: &Path, n_features: Option<usize>) -> Result<Cohort> {
    let mut patients: BTreeMap<String, PatientRecord> = BTreeMap::new();
    let mut max_feature = None;
    let mut rdr = reader(events_path, &EVENTS_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| record_error(events_path, e))?;
        let line = line_of(&rec);
        let id = &rec[0];
        if id.is_empty() {
            return Err(schema(events_path, line, "empty patient_id"));
        }
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| schema(events_path, line, format!("time_hours `{}` is not a number", &rec[1])))?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(schema(events_path, line, "time_hours must be finite and non-negative"));
        }
        let feature: usize = rec[2]
            .parse()
            .map_err(|_| schema(events_path, line, format!("feature_id `{}` is not an index", &rec[2])))?;
        if n_features.is_some_and(|f| feature >= f) {
            return Err(schema(events_path, line, format!("feature_id {feature} out of range")));
        }
        let value: f64 = rec[3]
            .parse()
            .map_err(|_| schema(events_path, line, format!("value `{}` is not a number", &rec[3])))?;
        if !value.is_finite() {
            return Err(schema(events_path, line, "value must be finite"));
        }
        max_feature = max_feature.max(Some(feature));
        let r = patients.entry(id.to_string()).or_insert_with(|| empty(id));
        r.length_hours = r.length_hours.max(time);
        r.events.push(Event {
            time_hours: time,
            feature,
            value,
        });
    }

    let mut rdr = reader(labels_path, &LABELS_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| record_error(labels_path, e))?;
        let line = line_of(&rec);
        let label = Label::parse(&rec[2])
            .ok_or_else(|| schema(labels_path, line, format!("label `{}` not in {{0,1,excluded}}", &rec[2])))?;
        let r = patients.entry(rec[0].to_string()).or_insert_with(|| empty(&rec[0]));
        if r.labels.insert(rec[1].to_string(), label).is_some() {
            return Err(schema(labels_path, line, format!("duplicate label for task `{}`", &rec[1])));
        }
    }

    let n_features = n_features.unwrap_or(max_feature.map_or(0, |f| f + 1));
    let mut records: Vec<PatientRecord> = patients.into_values().collect();
    for r in &mut records {
        r.events.sort_by(|a, b| a.time_hours.total_cmp(&b.time_hours));
    }
    Ok(Cohort {
        records,
        n_features,
        stats: None,
        manifest: None,
    })
}

fn empty(id: &str) -> PatientRecord {
    PatientRecord {
        patient_id: id.to_string(),
        events: Vec::new(),
        length_hours: 0.0,
        labels: BTreeMap::new(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })
}

fn io_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_events_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(EVENTS_HEADER).map_err(io_err(path))?;
    for r in &cohort.records {
        for e in &r.events {
            w.write_record([
                r.patient_id.as_str(),
                &e.time_hours.to_string(),
                &e.feature.to_string(),
                &e.value.to_string(),
            ])
            .map_err(io_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(LABELS_HEADER).map_err(io_err(path))?;
    for r in &cohort.records {
        for (task, label) in &r.labels {
            w.write_record([r.patient_id.as_str(), task, label.as_str()])
                .map_err(io_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
