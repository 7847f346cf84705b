use crate::error::{Error, Result};

/// Auxiliary-task weights on the probability simplex, held as softmax logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    logits: Vec<f64>,
    weights: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl TaskWeights {
    pub fn uniform(n: usize) -> Self {
        Self::from_logits(vec![0.0; n]).expect("uniform weights")
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("task logits must be finite and non-empty".into()));
        }
        let weights = softmax(&logits);
        Ok(Self { logits, weights })
    }

    /// Uniform over `subset`, zero elsewhere. Zero weights have logit `-inf`
    /// conceptually; these weights are meant to stay frozen.
    pub fn uniform_over(n: usize, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Config("task subset is empty".into()));
        }
        let mut weights = vec![0.0; n];
        for &i in subset {
            if i >= n {
                return Err(Error::Config(format!("task {i} outside 0..{n}")));
            }
            weights[i] = 1.0 / subset.len() as f64;
        }
        let logits = weights
            .iter()
            .map(|&w| if w > 0.0 { 0.0 } else { -1e3 })
            .collect();
        Ok(Self { logits, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Chain rule through the softmax: `J^T g = w * (g - <w, g>)`.
    ///
    /// The inner product is taken relative to `g[0]` so that a constant
    /// gradient maps to exactly zero.
    pub fn logit_gradient(&self, g_lambda: &[f64]) -> Vec<f64> {
        let g0 = g_lambda[0];
        let mean = g0
            + self
                .weights
                .iter()
                .zip(g_lambda)
                .map(|(w, g)| w * (g - g0))
                .sum::<f64>();
        self.weights
            .iter()
            .zip(g_lambda)
            .map(|(w, g)| w * (g - mean))
            .collect()
    }

    /// Indices by descending weight, ties broken by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        idx
    }
}

/// One descent step in logit space, `logits -= eps * g_logits`.
pub fn update_lambda(w: &TaskWeights, g_logits: &[f64], eps: f64) -> Result<TaskWeights> {
    if g_logits.len() != w.len() {
        return Err(Error::Shape("hyper-gradient length differs from task count".into()));
    }
    if g_logits.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            node: 0,
            op: "hypergradient",
        });
    }
    if eps == 0.0 {
        return Ok(w.clone());
    }
    let logits = w.logits.iter().zip(g_logits).map(|(l, g)| l - eps * g).collect();
    TaskWeights::from_logits(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_shift_invariance() {
        let a = TaskWeights::from_logits(vec![0.3, -1.0, 2.0]).unwrap();
        let b = TaskWeights::from_logits(vec![10.3, 9.0, 12.0]).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(TaskWeights::uniform(4).weights(), &[0.25; 4]);
    }

    #[test]
    fn update_examples() {
        let w = TaskWeights::from_logits(vec![0.1, 0.5, -0.2]).unwrap();
        assert_eq!(update_lambda(&w, &[0.0; 3], 0.1).unwrap(), w);
        let flat = w.logit_gradient(&[0.7; 3]);
        assert_eq!(flat, vec![0.0; 3]);
        assert_eq!(update_lambda(&w, &flat, 0.1).unwrap().weights(), w.weights());
        let g = w.logit_gradient(&[-1.0, 0.0, 0.0]);
        let next = update_lambda(&w, &g, 0.1).unwrap();
        assert!(next.weights()[0] > w.weights()[0]);
        assert!(update_lambda(&w, &[f64::NAN, 0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn ranking_ties_by_index() {
        let w = TaskWeights::uniform_over(5, &[3, 1]).unwrap();
        assert_eq!(w.ranking(), vec![1, 3, 0, 2, 4]);
    }

    proptest! {
        #[test]
        fn updates_stay_on_simplex(logits in prop::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>()) {
            let mut w = TaskWeights::from_logits(logits).unwrap();
            let mut x = seed;
            for _ in 0..50 {
                let g: Vec<f64> = (0..w.len()).map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((x >> 11) as f64 / (1u64 << 53) as f64) * 20.0 - 10.0
                }).collect();
                w = update_lambda(&w, &w.logit_gradient(&g), 0.5).unwrap();
                let sum: f64 = w.weights().iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(w.weights().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
