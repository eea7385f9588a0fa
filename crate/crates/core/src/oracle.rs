//! Slow reference implementations.
//!
//! Nothing here shares code with the optimized paths beyond the data
//! types; every routine is the obvious loop. They back the unit tests, the
//! acceptance suite and the CLI's `verify` command.

use crate::error::{Error, Result};
use crate::merge::{Segment, TokenSequence};
use crate::model::{prefill, Model, PipelineConfig};
use crate::numerics::Matrix;

/// Triple-loop matrix product, accumulating in f64.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "naive_matmul",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0f64;
            for k in 0..a.cols() {
                acc += a.get(i, k) as f64 * b.get(k, j) as f64;
            }
            out.set(i, j, acc as f32);
        }
    }
    Ok(out)
}

/// Column sums of a square probability matrix, in f64.
pub fn naive_column_sums(p: &Matrix) -> Vec<f32> {
    (0..p.cols())
        .map(|j| (0..p.rows()).map(|i| p.get(i, j) as f64).sum::<f64>() as f32)
        .collect()
}

/// `Σᵢ wᵢ·rowᵢ` with an explicit double loop.
pub fn naive_weighted_merge(rows: &Matrix, weights: &[f32]) -> Result<Vec<f32>> {
    if weights.len() != rows.rows() {
        return Err(Error::LengthMismatch {
            op: "naive_weighted_merge",
            expected: rows.rows(),
            actual: weights.len(),
        });
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("merge weights sum to {total}")));
    }
    let mut out = vec![0.0f32; rows.cols()];
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (i, &w) in weights.iter().enumerate() {
            acc += w as f64 * rows.get(i, c) as f64;
        }
        *o = acc as f32;
    }
    Ok(out)
}

/// The literal iterative rule: replace the last two rows by their
/// unweighted mean until one row is left.
pub fn iterative_pairwise_merge(rows: &Matrix) -> Result<Vec<f32>> {
    if rows.rows() == 0 {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    }
    let mut stack: Vec<Vec<f32>> = rows.iter_rows().map(<[f32]>::to_vec).collect();
    while stack.len() > 1 {
        let b = stack.pop().unwrap_or_default();
        let a = stack.pop().unwrap_or_default();
        stack.push(a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect());
    }
    Ok(stack.pop().unwrap_or_default())
}

/// Indices ordered by descending value, lower index first on ties, found
/// by repeated selection of the best remaining entry.
fn selection_order(values: &[f32]) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut order = Vec::with_capacity(values.len());
    for _ in 0..values.len() {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                Some(b) if values[b] >= values[i] => Some(b),
                _ => Some(i),
            };
        }
        if let Some(b) = best {
            taken[b] = true;
            order.push(b);
        }
    }
    order
}

/// Reference split for a merge removing `r` tokens: `(unmerged ascending,
/// merged by descending importance)`.
pub fn sort_partition(importance: &[f32], r: usize) -> (Vec<usize>, Vec<usize>) {
    let order = selection_order(importance);
    let keep = importance.len().saturating_sub(r + 1);
    let merged = order[keep..].to_vec();
    let unmerged: Vec<usize> = (0..importance.len()).filter(|i| !merged.contains(i)).collect();
    (unmerged, merged)
}

/// Smallest number of top-scored entries whose normalized mass reaches
/// `beta`; all of them when `beta >= 1` or the mass is zero.
pub fn minimal_prefix_count(scores: &[f32], beta: f64) -> usize {
    let total: f64 = scores.iter().map(|&s| s as f64).sum();
    if beta >= 1.0 || total <= 0.0 {
        return scores.len();
    }
    let mut acc = 0.0f64;
    for (k, i) in selection_order(scores).into_iter().enumerate() {
        acc += scores[i] as f64 / total;
        if acc >= beta {
            return k + 1;
        }
    }
    scores.len()
}

/// For each threshold `t`, the smallest `k` whose top-`k` normalized scores
/// sum to at least `t` (capped at `N`).
pub fn attention_mass_curve(scores: &[f32], thresholds: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|&s| !s.is_finite() || s < 0.0) {
        return Err(Error::InvalidArgument("scores must be finite and nonnegative".into()));
    }
    let total: f64 = scores.iter().map(|&s| s as f64).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("scores are all zero".into()));
    }
    let mut sorted: Vec<f64> = scores.iter().map(|&s| s as f64 / total).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for (k, s) in sorted.iter().enumerate() {
                acc += s;
                if acc >= t {
                    return k + 1;
                }
            }
            sorted.len()
        })
        .collect())
}

/// Greedy decoding without a cache: every step re-runs prefill over the
/// input plus everything generated so far.
pub fn full_recompute_decode(
    model: &Model,
    input: &TokenSequence,
    pipeline: &PipelineConfig,
    n_steps: usize,
) -> Result<Vec<u32>> {
    if pipeline.compression_enabled && pipeline.compression.beta < 1.0 {
        return Err(Error::InvalidConfig(
            "full recompute decoding needs compression disabled".into(),
        ));
    }
    let mut seq = input.clone();
    let mut ids = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let out = prefill(model, &seq, pipeline)?;
        let mut best = 0;
        for (i, &v) in out.logits.iter().enumerate() {
            if v > out.logits[best] {
                best = i;
            }
        }
        ids.push(best as u32);
        seq.push(model.embedding(best as u32)?, Segment::Generated)?;
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iterative_merge_hand_trace() {
        let rows = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        // weights {1/2, 1/4, 1/4}
        assert_eq!(iterative_pairwise_merge(&rows).unwrap(), vec![0.5]);
        let mid = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(iterative_pairwise_merge(&mid).unwrap(), vec![0.25]);
        let two = Matrix::from_rows(&[vec![2.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(iterative_pairwise_merge(&two).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn weighted_merge_one_hot_selects_row() {
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(naive_weighted_merge(&rows, &[0.0, 1.0]).unwrap(), vec![3.0, 4.0]);
        assert!(naive_weighted_merge(&rows, &[0.5, 0.6]).is_err());
    }

    #[test]
    fn mass_curve_examples() {
        let uniform = vec![1.0f32; 100];
        assert_eq!(attention_mass_curve(&uniform, &[0.95]).unwrap(), vec![95]);
        let mut onehot = vec![0.0f32; 40];
        onehot[17] = 3.0;
        assert_eq!(attention_mass_curve(&onehot, &[0.5, 0.9, 1.0]).unwrap(), vec![1, 1, 1]);
        assert!(attention_mass_curve(&[0.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn sort_partition_breaks_ties_by_index() {
        let (keep, merged) = sort_partition(&[0.5, 0.1, 0.5, 0.1, 0.9], 1);
        assert_eq!(keep, vec![0, 2, 4]);
        assert_eq!(merged, vec![1, 3]);
    }

    #[test]
    fn minimal_prefix_examples() {
        assert_eq!(minimal_prefix_count(&[0.5, 0.2, 0.15, 0.1, 0.05], 0.9), 4);
        assert_eq!(minimal_prefix_count(&[0.5, 0.5], 1.0), 2);
        assert_eq!(minimal_prefix_count(&[0.0, 0.0], 0.5), 2);
    }
}
