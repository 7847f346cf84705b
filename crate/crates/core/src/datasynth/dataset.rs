use std::collections::BTreeMap;

use crate::datasynth::preprocess::bucket_and_impute;
use crate::datasynth::types::{Cohort, Label, WindowSpec};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seqmodel::SeqBatch;

/// Bucketed, imputed grids for a whole cohort, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub window: WindowSpec,
    pub n_features: usize,
    pub ids: Vec<String>,
    values: Vec<f64>,
    mask: Vec<f64>,
    labels: BTreeMap<String, Vec<Label>>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Expects a preprocessed (z-scored) cohort.
    pub fn from_cohort(cohort: &Cohort, window: WindowSpec) -> Result<Self> {
        window.validate()?;
        if cohort.stats.is_none() {
            return Err(Error::Config("cohort must be preprocessed before bucketing".into()));
        }
        let f = cohort.n_features;
        let cell = window.grid_steps() * f;
        let n = cohort.records.len();
        let mut values = Vec::with_capacity(n * cell);
        let mut mask = Vec::with_capacity(n * cell);
        let tasks = cohort.tasks();
        let mut labels: BTreeMap<String, Vec<Label>> = tasks.iter().map(|t| (t.clone(), Vec::with_capacity(n))).collect();
        let mut ids = Vec::with_capacity(n);
        let mut index = BTreeMap::new();
        for (i, r) in cohort.records.iter().enumerate() {
            let b = bucket_and_impute(&r.events, f, &window);
            values.extend_from_slice(&b.values);
            mask.extend_from_slice(&b.mask);
            for t in &tasks {
                labels
                    .get_mut(t)
                    .unwrap()
                    .push(r.labels.get(t).copied().unwrap_or(Label::Excluded));
            }
            if index.insert(r.patient_id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate patient id {:?}", r.patient_id)));
            }
            ids.push(r.patient_id.clone());
        }
        Ok(Self {
            window,
            n_features: f,
            ids,
            values,
            mask,
            labels,
            index,
        })
    }

    /// Builds a dataset from ready-made `[N, T, F]` grids (row-major).
    pub fn from_grids(
        window: WindowSpec,
        n_features: usize,
        ids: Vec<String>,
        values: Vec<f64>,
        mask: Vec<f64>,
        labels: BTreeMap<String, Vec<Label>>,
    ) -> Result<Self> {
        window.validate()?;
        let cell = window.grid_steps() * n_features;
        let n = ids.len();
        if values.len() != n * cell || mask.len() != n * cell {
            return Err(Error::Shape(format!("grids must hold {n} x {cell} cells")));
        }
        if labels.values().any(|l| l.len() != n) {
            return Err(Error::Shape("one label per row required".into()));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate patient id {id:?}")));
            }
        }
        Ok(Self {
            window,
            n_features,
            ids,
            values,
            mask,
            labels,
            index,
        })
    }

    /// Overwrites channel `dst` with channel `src` in values and mask.
    pub fn duplicate_channel(&mut self, src: usize, dst: usize) -> Result<()> {
        let f = self.n_features;
        if src >= f || dst >= f {
            return Err(Error::Shape(format!("channels {src}, {dst} outside 0..{f}")));
        }
        for grid in [&mut self.values, &mut self.mask] {
            for row in grid.chunks_mut(f) {
                row[dst] = row[src];
            }
        }
        Ok(())
    }

    /// Replaces the labels of one task.
    pub fn set_labels(&mut self, task: &str, labels: Vec<Label>) -> Result<()> {
        if labels.len() != self.ids.len() {
            return Err(Error::Shape("one label per row required".into()));
        }
        self.labels.insert(task.to_string(), labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tasks(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn positions<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.position(id.as_ref())
                    .ok_or_else(|| Error::Config(format!("unknown patient id {:?}", id.as_ref())))
            })
            .collect()
    }

    pub fn label(&self, task: &str, i: usize) -> Result<Label> {
        self.labels
            .get(task)
            .map(|l| l[i])
            .ok_or_else(|| Error::Config(format!("unknown task {task:?}")))
    }

    /// Keeps rows whose label for `task` is not excluded.
    pub fn labelled(&self, task: &str, rows: &[usize]) -> Result<Vec<usize>> {
        let l = self
            .labels
            .get(task)
            .ok_or_else(|| Error::Config(format!("unknown task {task:?}")))?;
        Ok(rows.iter().copied().filter(|&i| l[i] != Label::Excluded).collect())
    }

    /// `[B, T, F]` batch for the given rows, labelled when `task` is given.
    pub fn batch(&self, rows: &[usize], task: Option<&str>) -> Result<SeqBatch> {
        let cell = self.window.grid_steps() * self.n_features;
        let mut values = Vec::with_capacity(rows.len() * cell);
        let mut mask = Vec::with_capacity(rows.len() * cell);
        for &i in rows {
            values.extend_from_slice(&self.values[i * cell..(i + 1) * cell]);
            mask.extend_from_slice(&self.mask[i * cell..(i + 1) * cell]);
        }
        let labels = match task {
            Some(t) => Some(
                rows.iter()
                    .map(|&i| {
                        self.label(t, i)?
                            .value()
                            .ok_or_else(|| Error::Config(format!("row {i} is excluded from task {t:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
            None => None,
        };
        let shape = vec![rows.len(), self.window.grid_steps(), self.n_features];
        SeqBatch::new(Tensor::new(shape.clone(), values)?, Tensor::new(shape, mask)?, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::generate::{generate_cohort, SynthConfig, PRIMARY_TASK};
    use crate::datasynth::preprocess::preprocess;

    #[test]
    fn batches_have_grid_shape() {
        let cfg = SynthConfig {
            n_patients: 20,
            n_features: 4,
            relevant: vec![2],
            ..SynthConfig::default()
        };
        let mut c = generate_cohort(&cfg).unwrap();
        assert!(Dataset::from_cohort(&c, cfg.window).is_err());
        preprocess(&mut c).unwrap();
        let d = Dataset::from_cohort(&c, cfg.window).unwrap();
        let b = d.batch(&[0, 3, 5], Some(PRIMARY_TASK)).unwrap();
        assert_eq!(b.values.shape(), &[3, 24, 4]);
        assert_eq!(b.labels.as_ref().unwrap().len(), 3);
        assert_eq!(d.labelled(PRIMARY_TASK, &[0, 1, 2]).unwrap().len(), 3);
        assert_eq!(d.position("p000003"), Some(3));
        assert!(d.batch(&[0], Some("nope")).is_err());
    }
}
