//! Train/validation/test assignment as a pure function of the patient id.
//!
//! The id's UTF-8 bytes are hashed with 64-bit FNV-1a followed by the
//! MurmurHash3 `fmix64` finaliser (plain FNV-1a leaves the high bits poorly
//! mixed for short, similar ids). The top 53 bits give a position `u` in
//! `[0, 1)`. Fold `k` of `n` shifts the position to `(u + k/n) mod 1` and
//! cuts it at the cumulative role proportions.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^ (k >> 33)
}

/// Stable 64-bit hash of a patient id.
pub fn patient_hash(id: &str) -> u64 {
    fmix64(fnv1a64(id.as_bytes()))
}

/// Position of an id in `[0, 1)`.
pub fn unit_position(id: &str) -> f64 {
    (patient_hash(id) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proportions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub n_folds: usize,
    pub proportions: Proportions,
    positions: BTreeMap<String, f64>,
}

impl SplitAssignment {
    pub fn role(&self, patient_id: &str, fold: usize) -> Option<Role> {
        let u = *self.positions.get(patient_id)?;
        Some(role_at(u, fold, self.n_folds, self.proportions))
    }

    /// Ids holding `role` in `fold`, in ascending hash order.
    pub fn members(&self, role: Role, fold: usize) -> Vec<String> {
        let mut ids: Vec<(&String, f64)> = self
            .positions
            .iter()
            .filter(|(_, &u)| role_at(u, fold, self.n_folds, self.proportions) == role)
            .map(|(id, &u)| (id, u))
            .collect();
        ids.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        ids.into_iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn role_at(u: f64, fold: usize, n_folds: usize, p: Proportions) -> Role {
    let shifted = (u + fold as f64 / n_folds as f64).fract();
    if shifted < p.train {
        Role::Train
    } else if shifted < p.train + p.val {
        Role::Val
    } else {
        Role::Test
    }
}

pub fn assign_splits<S: AsRef<str>>(ids: &[S], n_folds: usize, proportions: Proportions) -> Result<SplitAssignment> {
    if n_folds == 0 {
        return Err(Error::Config("at least one fold required".into()));
    }
    let total = proportions.train + proportions.val + proportions.test;
    if (total - 1.0).abs() > 1e-9 || [proportions.train, proportions.val, proportions.test].iter().any(|&p| p < 0.0) {
        return Err(Error::Config(format!("split proportions must be non-negative and sum to 1, got {total}")));
    }
    let mut seen = HashSet::new();
    let mut positions = BTreeMap::new();
    for id in ids {
        let id = id.as_ref();
        if !seen.insert(id) {
            return Err(Error::Config(format!("duplicate patient id {id:?}")));
        }
        positions.insert(id.to_string(), unit_position(id));
    }
    Ok(SplitAssignment {
        n_folds,
        proportions,
        positions,
    })
}

/// Deterministic nested subset: the first `ceil(fraction * n)` ids by hash
/// order (at least one), so smaller fractions are prefixes of larger ones.
pub fn fraction_subset(ids: &[String], fraction: f64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction must be in (0, 1], got {fraction}")));
    }
    let mut ordered: Vec<&String> = ids.iter().collect();
    ordered.sort_by_key(|id| (patient_hash(&format!("subset:{id}")), (*id).clone()));
    let n = ((fraction * ids.len() as f64).ceil() as usize).clamp(1.min(ids.len()), ids.len());
    Ok(ordered.into_iter().take(n).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:05}")).collect()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn proportions_close_to_target() {
        let ids = ids(10_000);
        let s = assign_splits(&ids, 10, Proportions::default()).unwrap();
        for fold in 0..10 {
            let n = |r| s.members(r, fold).len() as f64 / 10_000.0;
            assert!((n(Role::Train) - 0.8).abs() < 0.02);
            assert!((n(Role::Val) - 0.1).abs() < 0.02);
            assert!((n(Role::Test) - 0.1).abs() < 0.02);
        }
    }

    #[test]
    fn folds_rotate_test_sets() {
        let ids = ids(2_000);
        let s = assign_splits(&ids, 10, Proportions::default()).unwrap();
        let mut covered = HashSet::new();
        for fold in 0..10 {
            for id in s.members(Role::Test, fold) {
                assert!(covered.insert(id), "test sets overlap across folds");
            }
        }
        assert_eq!(covered.len(), 2_000);
    }

    #[test]
    fn single_fold_and_duplicates() {
        let s = assign_splits(&ids(100), 1, Proportions::default()).unwrap();
        let total: usize = [Role::Train, Role::Val, Role::Test].iter().map(|&r| s.members(r, 0).len()).sum();
        assert_eq!(total, 100);
        assert!(assign_splits(&["a", "b", "a"], 10, Proportions::default()).is_err());
    }

    #[test]
    fn assignment_depends_only_on_id() {
        let a = assign_splits(&["x1", "x2", "x3"], 10, Proportions::default()).unwrap();
        let b = assign_splits(&["x3", "x1"], 10, Proportions::default()).unwrap();
        for fold in 0..10 {
            assert_eq!(a.role("x1", fold), b.role("x1", fold));
            assert_eq!(a.role("x3", fold), b.role("x3", fold));
        }
    }

    #[test]
    fn fraction_subsets_nest() {
        let ids = ids(1_000);
        let one = fraction_subset(&ids, 0.01).unwrap();
        let ten = fraction_subset(&ids, 0.1).unwrap();
        let all = fraction_subset(&ids, 1.0).unwrap();
        assert_eq!(one.len(), 10);
        assert_eq!(ten.len(), 100);
        assert_eq!(all.len(), 1_000);
        assert_eq!(&ten[..10], &one[..]);
        assert!(fraction_subset(&ids, 0.0).is_err());
    }
}
