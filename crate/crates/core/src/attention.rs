//! Multi-head causal self-attention.
//!
//! Two execution modes share one contract. `Full` materializes every
//! per-head N×N probability matrix. `CumulativeOnly` walks the keys in
//! fixed-size tiles with an online softmax, the way flash-style kernels do,
//! and only hands back the per-key column sums of the probabilities. Both
//! yield the same context and the same head-averaged cumulative scores up
//! to rounding.
//!
//! Token importance everywhere in the engine is the head-averaged column
//! sum of the causal attention probabilities.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matmul, row_softmax, Matrix};

/// Key tile width of the cumulative-only kernel.
pub const KEY_BLOCK: usize = 64;

/// Query rows processed together by the prefill kernel.
const ROW_BLOCK: usize = 4;

const STOCHASTIC_TOL: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub n_heads: usize,
}

impl AttentionWeights {
    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    fn validate(&self, hidden_cols: usize) -> Result<()> {
        let c = hidden_cols;
        if self.n_heads == 0 || !c.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide model width {c}",
                self.n_heads
            )));
        }
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != (c, c) {
                return Err(Error::InvalidArgument(format!(
                    "{name} is {}x{}, expected {c}x{c}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    CumulativeOnly,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// N×C output after the output projection.
    pub context: Matrix,
    /// Per-head N×N causal probabilities, only in `Full` mode.
    pub full_scores: Option<Vec<Matrix>>,
    /// Per-head column sums of the probabilities.
    pub cum_scores: Vec<Vec<f32>>,
    /// Mean of `cum_scores` over heads.
    pub avg_cum_scores: Vec<f32>,
}

/// Read-only view of fixed-width rows laid out with a stride, e.g. one
/// head's slice of a projected N×C matrix.
#[derive(Clone, Copy, Debug)]
pub struct StridedRows<'a> {
    data: &'a [f32],
    stride: usize,
    offset: usize,
    width: usize,
}

impl<'a> StridedRows<'a> {
    pub fn new(data: &'a [f32], stride: usize, offset: usize, width: usize) -> Self {
        Self {
            data,
            stride,
            offset,
            width,
        }
    }

    /// Head `head` of an N×C matrix split into heads of width `head_dim`.
    pub fn head(m: &'a Matrix, head: usize, head_dim: usize) -> Self {
        Self::new(m.as_slice(), m.cols(), head * head_dim, head_dim)
    }

    #[inline]
    pub fn row(&self, j: usize) -> &'a [f32] {
        let start = j * self.stride + self.offset;
        &self.data[start..start + self.width]
    }
}

/// Running softmax statistics of one query row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowStats {
    pub max: f32,
    pub sum: f32,
}

/// Attends one query to keys `0..n_keys`, tile by tile, and writes the
/// normalized context into `out`. `scratch` holds one tile of logits.
///
/// Every row is processed independently with tiles anchored at key 0, so a
/// decode step over a cache reproduces the matching prefill row bit for bit.
pub fn attend_row(
    q: &[f32],
    keys: StridedRows<'_>,
    values: StridedRows<'_>,
    n_keys: usize,
    out: &mut [f32],
    scratch: &mut Vec<f32>,
) -> RowStats {
    let scale = 1.0 / (q.len() as f32).sqrt();
    out.fill(0.0);
    let mut max = f32::NEG_INFINITY;
    let mut sum = 0.0f32;
    let mut start = 0;
    while start < n_keys {
        let end = (start + KEY_BLOCK).min(n_keys);
        scratch.clear();
        scratch.extend((start..end).map(|j| dot(q, keys.row(j)) * scale));
        let tile_max = scratch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let new_max = max.max(tile_max);
        if new_max > max && max != f32::NEG_INFINITY {
            let corr = (max - new_max).exp();
            sum *= corr;
            for o in out.iter_mut() {
                *o *= corr;
            }
        }
        for (j, &s) in (start..end).zip(scratch.iter()) {
            let p = (s - new_max).exp();
            sum += p;
            axpy(out, p, values.row(j));
        }
        max = new_max;
        start = end;
    }
    if n_keys > 0 {
        let inv = 1.0 / sum;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    RowStats { max, sum }
}

/// Query rows `first..first + ROW_BLOCK` of one head, each attending to
/// keys `0..=row`, sharing every key and value load across the block.
/// Each row goes through exactly the arithmetic of [`attend_row`].
fn attend_row_block(
    queries: StridedRows<'_>,
    keys: StridedRows<'_>,
    values: StridedRows<'_>,
    first: usize,
    out: &mut [f32],
    scratch: &mut [Vec<f32>; ROW_BLOCK],
) -> [RowStats; ROW_BLOCK] {
    let hd = keys.width;
    let scale = 1.0 / (hd as f32).sqrt();
    let q: [&[f32]; ROW_BLOCK] = std::array::from_fn(|r| queries.row(first + r));
    let n_keys: [usize; ROW_BLOCK] = std::array::from_fn(|r| first + r + 1);
    out.fill(0.0);
    let mut max = [f32::NEG_INFINITY; ROW_BLOCK];
    let mut sum = [0.0f32; ROW_BLOCK];
    let mut start = 0;
    while start < n_keys[ROW_BLOCK - 1] {
        let tile_end = start + KEY_BLOCK;
        let shared = tile_end.min(n_keys[0]).max(start);
        for s in scratch.iter_mut() {
            s.clear();
        }
        for j in start..shared {
            let k = keys.row(j);
            for r in 0..ROW_BLOCK {
                scratch[r].push(dot(q[r], k) * scale);
            }
        }
        let mut new_max = max;
        for r in 0..ROW_BLOCK {
            if start >= n_keys[r] {
                continue;
            }
            for j in shared..tile_end.min(n_keys[r]) {
                scratch[r].push(dot(q[r], keys.row(j)) * scale);
            }
            let tile_max = scratch[r].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            new_max[r] = max[r].max(tile_max);
            if new_max[r] > max[r] && max[r] != f32::NEG_INFINITY {
                let corr = (max[r] - new_max[r]).exp();
                sum[r] *= corr;
                for o in &mut out[r * hd..(r + 1) * hd] {
                    *o *= corr;
                }
            }
        }
        for j in start..shared {
            let v = values.row(j);
            for r in 0..ROW_BLOCK {
                let p = (scratch[r][j - start] - new_max[r]).exp();
                sum[r] += p;
                axpy(&mut out[r * hd..(r + 1) * hd], p, v);
            }
        }
        for r in 0..ROW_BLOCK {
            if start >= n_keys[r] {
                continue;
            }
            for j in shared..tile_end.min(n_keys[r]) {
                let p = (scratch[r][j - start] - new_max[r]).exp();
                sum[r] += p;
                axpy(&mut out[r * hd..(r + 1) * hd], p, values.row(j));
            }
            max[r] = new_max[r];
        }
        start = tile_end;
    }
    for r in 0..ROW_BLOCK {
        let inv = 1.0 / sum[r];
        for o in &mut out[r * hd..(r + 1) * hd] {
            *o *= inv;
        }
    }
    std::array::from_fn(|r| RowStats { max: max[r], sum: sum[r] })
}

/// Second pass of the tiled kernel: recomputes each logit and adds the
/// final probability of key `j` into `cum[j]`.
pub fn accumulate_probabilities(
    q: &[f32],
    keys: StridedRows<'_>,
    n_keys: usize,
    stats: RowStats,
    cum: &mut [f32],
) {
    let scale = 1.0 / (q.len() as f32).sqrt();
    let inv = 1.0 / stats.sum;
    for (j, c) in cum.iter_mut().enumerate().take(n_keys) {
        let s = dot(q, keys.row(j)) * scale;
        *c += (s - stats.max).exp() * inv;
    }
}

/// Tiled causal attention over already-projected `q`, `k`, `v` (each N×C).
///
/// Returns the concatenated per-head context (before the output
/// projection) and, when `score_rows` is given, per-head column sums over
/// the query rows flagged `true`.
pub fn causal_attention_tiled(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    score_rows: Option<&[bool]>,
) -> Result<(Matrix, Option<Vec<Vec<f32>>>)> {
    let (n, c) = q.shape();
    if k.shape() != (n, c) || v.shape() != (n, c) {
        return Err(Error::ShapeMismatch {
            op: "causal_attention",
            left_rows: n,
            left_cols: c,
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if n_heads == 0 || c % n_heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_heads} heads do not divide model width {c}"
        )));
    }
    if let Some(mask) = score_rows {
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                op: "causal_attention score rows",
                expected: n,
                actual: mask.len(),
            });
        }
    }
    let hd = c / n_heads;
    let mut context = Matrix::zeros(n, c);
    let mut cum = score_rows.map(|_| vec![vec![0.0f32; n]; n_heads]);
    let mut scratch = Vec::with_capacity(KEY_BLOCK);
    let mut block_scratch: [Vec<f32>; ROW_BLOCK] = std::array::from_fn(|_| Vec::with_capacity(KEY_BLOCK));
    let mut block_out = vec![0.0f32; ROW_BLOCK * hd];
    let mut row_out = vec![0.0f32; hd];
    for h in 0..n_heads {
        // contiguous per-head copies keep a head's keys and values cache-resident
        let (qh, kh, vh) = (q.column_block(h * hd, hd), k.column_block(h * hd, hd), v.column_block(h * hd, hd));
        let qs = StridedRows::head(&qh, 0, hd);
        let ks = StridedRows::head(&kh, 0, hd);
        let vs = StridedRows::head(&vh, 0, hd);
        let mut i = 0;
        while i < n {
            let stats: Vec<RowStats> = if i + ROW_BLOCK <= n {
                let stats = attend_row_block(qs, ks, vs, i, &mut block_out, &mut block_scratch);
                for r in 0..ROW_BLOCK {
                    context.row_mut(i + r)[h * hd..(h + 1) * hd].copy_from_slice(&block_out[r * hd..(r + 1) * hd]);
                }
                stats.to_vec()
            } else {
                let stats = attend_row(qs.row(i), ks, vs, i + 1, &mut row_out, &mut scratch);
                context.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(&row_out);
                vec![stats]
            };
            if let (Some(mask), Some(cum)) = (score_rows, cum.as_mut()) {
                for (r, st) in stats.iter().enumerate() {
                    if mask[i + r] {
                        accumulate_probabilities(qs.row(i + r), ks, i + r + 1, *st, &mut cum[h]);
                    }
                }
            }
            i += stats.len();
        }
    }
    Ok((context, cum))
}

/// Materializing path: per head `softmax(QKᵀ/√d)` with a causal mask, then
/// `P·V`.
fn causal_attention_full(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (n, c) = q.shape();
    let hd = c / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut context = Matrix::zeros(n, c);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.column_block(h * hd, hd);
        let kh = k.column_block(h * hd, hd);
        let vh = v.column_block(h * hd, hd);
        let mut logits = matmul(&qh, &kh.transpose())?;
        for i in 0..n {
            for x in logits.row_mut(i) {
                *x *= scale;
            }
        }
        let p = row_softmax(&logits, true);
        let ctx = matmul(&p, &vh)?;
        for i in 0..n {
            context.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(ctx.row(i));
        }
        probs.push(p);
    }
    Ok((context, probs))
}

/// Projects `hidden` into queries, keys and values, runs causal attention
/// in the requested mode and applies the output projection.
pub fn multi_head_attention(
    hidden: &Matrix,
    weights: &AttentionWeights,
    mode: AttentionMode,
) -> Result<AttentionOutput> {
    if hidden.rows() == 0 {
        return Err(Error::InvalidArgument("attention over zero tokens".into()));
    }
    weights.validate(hidden.cols())?;
    let q = matmul(hidden, &weights.wq)?;
    let k = matmul(hidden, &weights.wk)?;
    let v = matmul(hidden, &weights.wv)?;
    let (concat, full_scores, cum_scores) = match mode {
        AttentionMode::Full => {
            let (ctx, probs) = causal_attention_full(&q, &k, &v, weights.n_heads)?;
            let cum = cumulative_scores_from_full(&probs)?;
            (ctx, Some(probs), cum)
        }
        AttentionMode::CumulativeOnly => {
            let all = vec![true; hidden.rows()];
            let (ctx, cum) = causal_attention_tiled(&q, &k, &v, weights.n_heads, Some(&all))?;
            (ctx, None, cum.unwrap_or_default())
        }
    };
    let context = matmul(&concat, &weights.wo)?;
    let avg_cum_scores = average_over_heads(&cum_scores);
    Ok(AttentionOutput {
        context,
        full_scores,
        cum_scores,
        avg_cum_scores,
    })
}

/// Column sums of per-head causal probability matrices.
pub fn cumulative_scores_from_full(full_scores: &[Matrix]) -> Result<Vec<Vec<f32>>> {
    full_scores
        .iter()
        .map(|p| {
            let n = p.rows();
            if p.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "cumulative_scores_from_full",
                    left_rows: n,
                    left_cols: p.cols(),
                    right_rows: n,
                    right_cols: n,
                });
            }
            let mut cum = vec![0.0f32; n];
            for i in 0..n {
                let row = p.row(i);
                let sum: f32 = row.iter().sum();
                let leaks = row[i + 1..].iter().any(|&x| x != 0.0);
                if (sum - 1.0).abs() > STOCHASTIC_TOL || leaks || row.iter().any(|&x| x < 0.0) {
                    return Err(Error::NotStochastic { row: i, sum });
                }
                for (c, &x) in cum.iter_mut().zip(row) {
                    *c += x;
                }
            }
            Ok(cum)
        })
        .collect()
}

/// Arithmetic mean over heads, summed in head order.
pub fn average_over_heads(cum_scores: &[Vec<f32>]) -> Vec<f32> {
    let Some(first) = cum_scores.first() else {
        return Vec::new();
    };
    let mut avg = vec![0.0f32; first.len()];
    for head in cum_scores {
        for (a, &x) in avg.iter_mut().zip(head) {
            *a += x;
        }
    }
    let inv = 1.0 / cum_scores.len() as f32;
    for a in &mut avg {
        *a *= inv;
    }
    avg
}
