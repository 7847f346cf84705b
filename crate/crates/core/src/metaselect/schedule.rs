use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inner/outer step counts and learning rates of the bilevel loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSchedule {
    /// Pretraining steps per inner loop.
    pub n_pretrain: usize,
    /// Probe finetuning steps per inner loop.
    pub n_finetune: usize,
    /// Outer (meta) steps.
    pub outer_steps: usize,
    pub eta_pretrain: f64,
    pub eta_finetune: f64,
    pub epsilon: f64,
}

impl LoopSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_pretrain == 0 || self.n_finetune == 0 || self.outer_steps == 0 {
            return Err(Error::Config(format!(
                "schedule needs N_P, N_S, K >= 1, got {}/{}/{}",
                self.n_pretrain, self.n_finetune, self.outer_steps
            )));
        }
        let rates = [self.eta_pretrain, self.eta_finetune, self.epsilon];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `(inner/outer)` notation: `inner` pretraining steps per outer step,
    /// `outer` meta steps, and a tenth as many probe finetuning steps.
    pub fn from_pair(inner: usize, outer: usize, eta_pretrain: f64, eta_finetune: f64, epsilon: f64) -> Result<Self> {
        let s = Self {
            n_pretrain: inner,
            n_finetune: (inner / 10).max(1),
            outer_steps: outer,
            eta_pretrain,
            eta_finetune,
            epsilon,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parses `"100/50"` or `"(100/50)"` into `(inner, outer)`.
    pub fn parse_pair(text: &str) -> Result<(usize, usize)> {
        let t = text.trim().trim_start_matches('(').trim_end_matches(')');
        let bad = || Error::Config(format!("schedule `{text}` is not `inner/outer`"));
        let (a, b) = t.split_once('/').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    pub fn pretrain_budget(&self) -> usize {
        self.n_pretrain * self.outer_steps
    }

    pub fn total_steps(&self) -> usize {
        (self.n_pretrain + self.n_finetune) * self.outer_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shares_budget() {
        for (inner, outer) in [(1000, 5), (500, 10), (100, 50), (50, 100), (10, 500)] {
            let s = LoopSchedule::from_pair(inner, outer, 0.005, 0.001, 0.01).unwrap();
            assert_eq!(s.pretrain_budget(), 5000);
            assert_eq!(s.total_steps(), 5500);
        }
        assert_eq!(LoopSchedule::parse_pair("(100/50)").unwrap(), (100, 50));
        assert!(LoopSchedule::parse_pair("100-50").is_err());
        assert!(LoopSchedule::from_pair(0, 5, 0.1, 0.1, 0.1).is_err());
    }
}
