use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax;

/// Output of top-k gating.
///
/// `weights` has one entry per expert; exactly the entries in `selected` are
/// positive. `selected` is ordered by descending logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

impl GateResult {
    /// Gate weight of each selected expert, in `selected` order.
    pub fn selected_weights(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.selected.iter().map(move |&e| (e, self.weights[e]))
    }
}

/// Indices of the `k` largest values, ties broken toward the lower index.
pub(crate) fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Softmax over the `k` largest logits; every other weight is exactly zero.
pub fn topk_gate(logits: &[f64], k: usize) -> Result<GateResult> {
    if k == 0 || k > logits.len() {
        return Err(Error::Argument(format!(
            "top-k requires 1 <= k <= {}, got k={k}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("router produced a non-finite logit".into()));
    }
    let selected = top_k_indices(logits, k);
    let chosen: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    let probs = softmax(&chosen)?;
    let mut weights = vec![0.0; logits.len()];
    for (&i, p) in selected.iter().zip(probs) {
        weights[i] = p;
    }
    Ok(GateResult { weights, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn two_of_three() {
        let g = topk_gate(&[2.0, 1.0, 0.0], 2).unwrap();
        let e = 1.0f64.exp();
        assert_eq!(g.selected, vec![0, 1]);
        assert!((g.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(g.weights[2], 0.0);
    }

    #[test]
    fn full_k_is_dense_softmax() {
        let logits = [0.3, -1.2, 2.2, 0.0];
        let g = topk_gate(&logits, 4).unwrap();
        let dense = softmax(&logits).unwrap();
        for (a, b) in g.weights.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let g = topk_gate(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(g.selected, vec![0]);
        assert_eq!(g.weights, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(topk_gate(&[1.0, 2.0], 0), Err(Error::Argument(_))));
        assert!(matches!(topk_gate(&[1.0, 2.0], 3), Err(Error::Argument(_))));
    }

    #[test]
    fn thousand_random_vectors() {
        let mut rng = Rng::new(11, 0);
        for _ in 0..1000 {
            let n = 2 + rng.index(63);
            let k = 1 + rng.index(n);
            let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 5.0).collect();
            let g = topk_gate(&logits, k).unwrap();
            assert_eq!(g.weights.iter().filter(|w| **w > 0.0).count(), k);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let am_l = top_k_indices(&logits, 1)[0];
            let am_w = top_k_indices(&g.weights, 1)[0];
            assert_eq!(am_l, am_w);
        }
    }
}
