use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_roc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes"));
    }
    // Walk tie groups from the top; each negative contributes the positives
    // strictly above it plus half of those tied with it.
    let order = by_score_desc(scores);
    let mut above_pos = 0usize;
    let mut twice_wins: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] == 1.0 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        twice_wins += (gn as u128) * (2 * above_pos as u128 + gp as u128);
        above_pos += gp;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Step-wise average precision: the mean over positives of the precision at
/// the threshold equal to that positive's score.
pub fn auc_pr(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive"));
    }
    let order = by_score_desc(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut total = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let mut gp = 0usize;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] == 1.0 {
                gp += 1;
            }
            j += 1;
        }
        tp += gp;
        seen += j - i;
        total += gp as f64 * tp as f64 / seen as f64;
        i = j;
    }
    Ok(total / pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.3; 5], &[0.0, 1.0, 0.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pr_examples() {
        assert_eq!(auc_pr(&[0.9, 0.8, 0.2], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        let ap = auc_pr(&[0.9, 0.8, 0.7], &[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(auc_pr(&[0.1, 0.5, 0.3], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(auc_pr(&[0.1, 0.5], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn complement_labels_sum_to_one() {
        let s = [0.2, 0.2, 0.5, 0.9, 0.1, 0.5];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert_eq!(auc_roc(&s, &y).unwrap() + auc_roc(&s, &flipped).unwrap(), 1.0);
    }

    #[test]
    fn tied_instance_matches_scikit_learn() {
        // roc_auc_score and average_precision_score on the same inputs.
        let s = [0.2, 0.2, 0.5, 0.9, 0.1, 0.5, 0.7, 0.7, 0.3, 0.9];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        assert!((auc_roc(&s, &y).unwrap() - 0.5625).abs() < 1e-15);
        assert!((auc_pr(&s, &y).unwrap() - 0.6190476190476191).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(|x| f64::from(x) / 5.0).collect()),
                proptest::collection::vec(proptest::bool::ANY, n)
                    .prop_map(|v| v.into_iter().map(f64::from).collect::<Vec<f64>>()),
            )
        })
    }

    proptest! {
        #[test]
        fn roc_symmetries((s, y) in instance()) {
            prop_assume!(y.iter().any(|&v| v == 1.0) && y.iter().any(|&v| v == 0.0));
            let a = auc_roc(&s, &y).unwrap();
            let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let negated: Vec<f64> = s.iter().map(|v| -v).collect();
            let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
            prop_assert!((a + auc_roc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((a + auc_roc(&negated, &y).unwrap() - 1.0).abs() < 1e-12);
            prop_assert_eq!(a, auc_roc(&warped, &y).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn pr_bounds((s, y) in instance()) {
            prop_assume!(y.iter().any(|&v| v == 1.0));
            let ap = auc_pr(&s, &y).unwrap();
            let base = y.iter().sum::<f64>() / y.len() as f64;
            prop_assert!(ap <= 1.0 + 1e-15);
            let constant = vec![0.5; s.len()];
            prop_assert!((auc_pr(&constant, &y).unwrap() - base).abs() < 1e-12);
        }
    }
}
