//! Pyramid token merging.
//!
//! At each scheduled layer the image tokens are split by importance. The
//! most important ones survive unchanged; the tail, ordered from most to
//! least important, is collapsed into a single token with one weighted sum
//! using the linearly decreasing list `{r+1, r, ..., 1}` normalized to sum
//! to one. Text tokens are never touched.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    SystemPrompt,
    Image,
    Instruction,
    Generated,
    MergedImage,
}

impl Segment {
    /// Image and merged-image tokens are the ones merging and cache
    /// compression operate on.
    pub fn is_image(self) -> bool {
        matches!(self, Segment::Image | Segment::MergedImage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::SystemPrompt => "system",
            Segment::Image => "image",
            Segment::Instruction => "instruction",
            Segment::Generated => "generated",
            Segment::MergedImage => "merged",
        }
    }
}

/// Token embeddings together with their segment labels and original
/// position ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Matrix,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(embeddings: Matrix, segments: Vec<Segment>, positions: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        for (what, len) in [("segments", segments.len()), ("positions", positions.len())] {
            if len != n {
                return Err(Error::LengthMismatch {
                    op: if what == "segments" {
                        "TokenSequence segments"
                    } else {
                        "TokenSequence positions"
                    },
                    expected: n,
                    actual: len,
                });
            }
        }
        if positions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "token positions must not decrease in stored order".into(),
            ));
        }
        Ok(Self {
            embeddings,
            segments,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Stored indices of image-segment tokens, in stored order.
    pub fn image_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.segments[i].is_image())
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_image()).count()
    }

    pub fn text_count(&self) -> usize {
        self.len() - self.image_count()
    }

    /// Next free position id.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    /// True when segments come as contiguous blocks in the order system
    /// prompt, image, instruction, and positions strictly increase.
    pub fn is_fresh_input(&self) -> bool {
        let rank = |s: Segment| match s {
            Segment::SystemPrompt => Some(0),
            Segment::Image => Some(1),
            Segment::Instruction => Some(2),
            _ => None,
        };
        let ranks: Option<Vec<u8>> = self.segments.iter().map(|&s| rank(s)).collect();
        match ranks {
            Some(r) => {
                r.windows(2).all(|w| w[0] <= w[1])
                    && self.positions.windows(2).all(|w| w[0] < w[1])
            }
            None => false,
        }
    }

    /// Appends one token at the next position.
    pub fn push(&mut self, embedding: &[f32], segment: Segment) -> Result<()> {
        let pos = self.next_position();
        self.embeddings.push_row(embedding)?;
        self.segments.push(segment);
        self.positions.push(pos);
        Ok(())
    }
}

/// Which layers merge and how many image tokens survive each stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeSchedule {
    pub merge_layers: Vec<usize>,
    pub keep_counts: Vec<usize>,
    pub target_ratio: f64,
}

impl MergeSchedule {
    /// Plans per-stage keep counts for `n_image` tokens with
    /// [`plan_keep_counts`].
    pub fn plan(merge_layers: Vec<usize>, n_image: usize, target_ratio: f64) -> Result<Self> {
        let keep_counts = if merge_layers.is_empty() {
            Vec::new()
        } else {
            plan_keep_counts(n_image, target_ratio, merge_layers.len())?
        };
        Ok(Self {
            merge_layers,
            keep_counts,
            target_ratio,
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.merge_layers.len() != self.keep_counts.len() {
            return Err(Error::InvalidConfig(format!(
                "{} merge layers but {} keep counts",
                self.merge_layers.len(),
                self.keep_counts.len()
            )));
        }
        if self.merge_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "merge layers must be strictly increasing".into(),
            ));
        }
        if let Some(&l) = self.merge_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::InvalidConfig(format!(
                "merge layer {l} outside a {n_layers}-layer model"
            )));
        }
        if self.keep_counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig("keep counts must not increase".into()));
        }
        Ok(())
    }

    /// Keep count for `layer` if it is a merge layer.
    pub fn keep_count_at(&self, layer: usize) -> Option<usize> {
        self.merge_layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.keep_counts[i])
    }
}

fn validate_ratio(target_ratio: f64) -> Result<()> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep ratio {target_ratio} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Image tokens kept after each of `n_stages` merges.
///
/// Stage `k` keeps `round_half_up(n_image * ratio^(k / n_stages))` tokens,
/// so every stage shrinks by the same factor; at least one token survives
/// each stage.
pub fn plan_keep_counts(n_image: usize, target_ratio: f64, n_stages: usize) -> Result<Vec<usize>> {
    validate_ratio(target_ratio)?;
    if n_stages == 0 {
        return Err(Error::InvalidConfig("at least one merge stage is required".into()));
    }
    if n_image == 0 {
        return Ok(vec![0; n_stages]);
    }
    let mut counts = Vec::with_capacity(n_stages);
    let mut prev = n_image;
    for k in 1..=n_stages {
        let frac = target_ratio.powf(k as f64 / n_stages as f64);
        let keep = ((n_image as f64 * frac + 0.5).floor() as usize).clamp(1, prev);
        counts.push(keep);
        prev = keep;
    }
    Ok(counts)
}

/// Split of the image tokens into survivors and the tail that gets merged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePartition {
    /// Indices of the `n - (r + 1)` most important tokens, ascending.
    pub unmerged_indices: Vec<usize>,
    /// Indices of the remaining `r + 1` tokens, most important first.
    pub merged_indices: Vec<usize>,
}

/// Descending by importance, lower index first on ties.
fn by_importance_desc(importance: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Partitions image tokens for a merge that removes `r` of them.
pub fn partition_tokens(importance: &[f32], r: usize) -> Result<MergePartition> {
    let n = importance.len();
    if r >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {r} of {n} image tokens"
        )));
    }
    if importance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("partition_tokens"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(by_importance_desc(importance));
    let keep = n - (r + 1);
    let merged_indices = order.split_off(keep);
    order.sort_unstable();
    Ok(MergePartition {
        unmerged_indices: order,
        merged_indices,
    })
}

/// `{r+1, r, ..., 1}` divided by its sum.
pub fn merge_weights(r: usize) -> Vec<f32> {
    let total = ((r + 1) * (r + 2) / 2) as f64;
    (0..=r).map(|i| ((r + 1 - i) as f64 / total) as f32).collect()
}

/// Collapses rows ordered by descending importance into one row with a
/// single weighted sum.
pub fn merge_tokens(merged_rows: &Matrix) -> Result<Vec<f32>> {
    if merged_rows.rows() == 0 {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    }
    let weights = merge_weights(merged_rows.rows() - 1);
    let mut out = vec![0.0f32; merged_rows.cols()];
    for (w, row) in weights.iter().zip(merged_rows.iter_rows()) {
        axpy(&mut out, *w, row);
    }
    Ok(out)
}

/// Outcome of one merge step, in stored-index terms of the input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeStep {
    pub sequence: TokenSequence,
    /// Stored indices (into the input) of the tokens collapsed into the
    /// new merged token, most important first. Empty for a no-op.
    pub merged_away: Vec<usize>,
}

/// Reduces the image tokens of `seq` to exactly `keep_count`:
/// `keep_count - 1` survivors in their original order followed by one
/// merged token. `importance` has one entry per image token, in stored
/// order.
pub fn pyramid_merge_layer(seq: &TokenSequence, importance: &[f32], keep_count: usize) -> Result<TokenSequence> {
    merge_step(seq, importance, keep_count).map(|s| s.sequence)
}

/// [`pyramid_merge_layer`] that also reports which tokens were merged.
pub fn merge_step(seq: &TokenSequence, importance: &[f32], keep_count: usize) -> Result<MergeStep> {
    let image = seq.image_indices();
    if importance.len() != image.len() {
        return Err(Error::LengthMismatch {
            op: "pyramid_merge_layer importance",
            expected: image.len(),
            actual: importance.len(),
        });
    }
    if keep_count == 0 {
        return Err(Error::InvalidArgument("keep count must be at least 1".into()));
    }
    if keep_count > image.len() {
        return Err(Error::InvalidArgument(format!(
            "keep count {keep_count} exceeds {} image tokens",
            image.len()
        )));
    }
    if keep_count == image.len() {
        return Ok(MergeStep {
            sequence: seq.clone(),
            merged_away: Vec::new(),
        });
    }

    let r = image.len() - keep_count;
    let part = partition_tokens(importance, r)?;
    let merged_away: Vec<usize> = part.merged_indices.iter().map(|&i| image[i]).collect();
    let new_row = merge_tokens(&seq.embeddings.select_rows(&merged_away))?;

    let survivors: Vec<usize> = part.unmerged_indices.iter().map(|&i| image[i]).collect();
    let image_max_pos = image.iter().map(|&i| seq.positions[i]).max().unwrap_or(0);
    // The merged token sits right after the last survivor and takes the
    // next position id, clamped to the image block so it never collides
    // with the text that follows.
    let (anchor, merged_pos) = match survivors.last() {
        Some(&last) => (last + 1, (seq.positions[last] + 1).min(image_max_pos)),
        None => (image[0], seq.positions[image[0]]),
    };

    let mut dropped = vec![false; seq.len()];
    for &i in &merged_away {
        dropped[i] = true;
    }
    let n_out = seq.len() - r;
    let mut rows = Vec::with_capacity(n_out * seq.dim());
    let mut segments = Vec::with_capacity(n_out);
    let mut positions = Vec::with_capacity(n_out);
    #[allow(clippy::needless_range_loop)]
    for i in 0..=seq.len() {
        if i == anchor {
            rows.extend_from_slice(&new_row);
            segments.push(Segment::MergedImage);
            positions.push(merged_pos);
        }
        if i < seq.len() && !dropped[i] {
            rows.extend_from_slice(seq.embeddings.row(i));
            segments.push(seq.segments[i]);
            positions.push(seq.positions[i]);
        }
    }
    let embeddings = Matrix::new(n_out, seq.dim(), rows)?;
    Ok(MergeStep {
        sequence: TokenSequence::new(embeddings, segments, positions)?,
        merged_away,
    })
}
