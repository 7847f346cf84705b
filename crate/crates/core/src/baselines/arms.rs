use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of tasks kept (or dropped) by the ranking ablations.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Supervised,
    PretrainAll,
    Cotrain,
    PretrainTop,
    PretrainDown,
    Transfer,
    Autoselect,
}

impl ArmKind {
    pub const ALL: [ArmKind; 7] = [
        ArmKind::Supervised,
        ArmKind::PretrainAll,
        ArmKind::Cotrain,
        ArmKind::PretrainTop,
        ArmKind::PretrainDown,
        ArmKind::Transfer,
        ArmKind::Autoselect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArmKind::Supervised => "supervised",
            ArmKind::PretrainAll => "pretrain_all",
            ArmKind::Cotrain => "cotrain",
            ArmKind::PretrainTop => "pretrain_top",
            ArmKind::PretrainDown => "pretrain_down",
            ArmKind::Transfer => "transfer",
            ArmKind::Autoselect => "autoselect",
        }
    }

    /// Arms that consume weights learned by an autoselect run.
    pub fn needs_weights(self) -> bool {
        matches!(self, ArmKind::PretrainTop | ArmKind::PretrainDown | ArmKind::Transfer)
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArmKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

/// One comparison arm at one primary-task data fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub kind: ArmKind,
    /// Task whose learned weights and encoder are reused by `transfer`.
    #[serde(default)]
    pub source_task: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "full")]
    pub fraction: f64,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn full() -> f64 {
    1.0
}

impl ArmSpec {
    pub fn new(kind: ArmKind, fraction: f64) -> Self {
        Self {
            kind,
            source_task: None,
            top_k: DEFAULT_TOP_K,
            fraction,
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction must be in (0, 1], got {}", self.fraction)));
        }
        if matches!(self.kind, ArmKind::PretrainTop | ArmKind::PretrainDown) {
            if self.top_k == 0 || self.top_k > n_features {
                return Err(Error::Config(format!("top_k must be in 1..={n_features}, got {}", self.top_k)));
            }
            if self.kind == ArmKind::PretrainDown && self.top_k >= n_features {
                return Err(Error::Config(format!("pretrain_down with k = {} leaves no tasks", self.top_k)));
            }
        }
        if self.kind == ArmKind::Transfer && self.source_task.is_none() {
            return Err(Error::Config("transfer arm needs a source_task".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ArmKind::ALL {
            assert_eq!(k.as_str().parse::<ArmKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ArmKind>().is_err());
    }

    #[test]
    fn validation() {
        let mut a = ArmSpec::new(ArmKind::PretrainDown, 0.5);
        a.top_k = 4;
        assert!(a.validate(16).is_ok());
        a.top_k = 16;
        assert!(a.validate(16).is_err());
        a.kind = ArmKind::PretrainTop;
        assert!(a.validate(16).is_ok());
        a.top_k = 17;
        assert!(a.validate(16).is_err());
        assert!(ArmSpec::new(ArmKind::Supervised, 0.0).validate(4).is_err());
        assert!(ArmSpec::new(ArmKind::Transfer, 0.1).validate(4).is_err());
    }
}
