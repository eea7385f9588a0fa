//! Per-layer, per-head key/value cache and attention-coverage compression.
//!
//! Compression works on each head of each layer on its own. Image entries
//! are ranked by their (image-normalized) attention score and the shortest
//! prefix whose accumulated score reaches `beta` is kept; the rest are
//! dropped for the remainder of decoding. Text and generated entries are
//! always kept.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::merge::Segment;

/// Keys and values of one head, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    head_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
    /// Score mass of image entries already evicted by compression, so a
    /// repeated compression measures coverage against the original total.
    evicted_score: f64,
}

/// Borrowed view of one cached token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheEntry<'a> {
    pub key: &'a [f32],
    pub value: &'a [f32],
    pub position: usize,
    pub segment: Segment,
}

impl HeadCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            evicted_score: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn entry(&self, i: usize) -> CacheEntry<'_> {
        let d = self.head_dim;
        CacheEntry {
            key: &self.keys[i * d..(i + 1) * d],
            value: &self.values[i * d..(i + 1) * d],
            position: self.positions[i],
            segment: self.segments[i],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = CacheEntry<'_>> {
        (0..self.len()).map(move |i| self.entry(i))
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_image()).count()
    }

    fn push(&mut self, key: &[f32], value: &[f32], position: usize, segment: Segment) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
        self.segments.push(segment);
    }

    /// Keeps the entries flagged in `keep`, in their current order.
    fn retain_mask(&self, keep: &[bool]) -> HeadCache {
        let mut out = HeadCache::new(self.head_dim);
        out.evicted_score = self.evicted_score;
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let e = self.entry(i);
            out.push(e.key, e.value, e.position, e.segment);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheLayer {
    pub heads: Vec<HeadCache>,
}

impl CacheLayer {
    pub fn new(n_heads: usize, head_dim: usize) -> Self {
        Self {
            heads: (0..n_heads).map(|_| HeadCache::new(head_dim)).collect(),
        }
    }

    /// Entries summed over heads.
    pub fn total_entries(&self) -> usize {
        self.heads.iter().map(HeadCache::len).sum()
    }

    /// Largest stored position over all heads, with its segment.
    fn last_position(&self) -> Option<(usize, Segment)> {
        self.heads
            .iter()
            .filter_map(|h| Some((*h.positions.last()?, *h.segments.last()?)))
            .max_by_key(|&(p, _)| p)
    }

    /// Removes every entry whose `(position, segment)` is listed, from all
    /// heads.
    pub fn evict_tokens(&mut self, tokens: &[(usize, Segment)]) {
        for head in &mut self.heads {
            let keep: Vec<bool> = head
                .positions
                .iter()
                .zip(&head.segments)
                .map(|(&p, &s)| !tokens.contains(&(p, s)))
                .collect();
            *head = head.retain_mask(&keep);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    pub layers: Vec<CacheLayer>,
    n_heads: usize,
    head_dim: usize,
}

impl KVCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| CacheLayer::new(n_heads, head_dim)).collect(),
            n_heads,
            head_dim,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.total_entries() == 0)
    }

    /// Position id the next decoded token will take.
    pub fn next_position(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.last_position())
            .map(|(p, _)| p + 1)
            .max()
            .unwrap_or(0)
    }

    /// Appends one token's per-head key and value vectors to `layer`.
    ///
    /// Positions must increase. The one exception is a merged image token,
    /// which may share the position id of the survivor stored just before it.
    pub fn append(
        &mut self,
        layer: usize,
        keys: &[&[f32]],
        values: &[&[f32]],
        position: usize,
        segment: Segment,
    ) -> Result<()> {
        let n_layers = self.layers.len();
        let cache_layer = self.layers.get_mut(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} outside a {n_layers}-layer cache"))
        })?;
        for (what, got) in [("keys", keys.len()), ("values", values.len())] {
            if got != self.n_heads {
                return Err(Error::LengthMismatch {
                    op: if what == "keys" { "append keys" } else { "append values" },
                    expected: self.n_heads,
                    actual: got,
                });
            }
        }
        if let Some(bad) = keys.iter().chain(values).find(|v| v.len() != self.head_dim) {
            return Err(Error::LengthMismatch {
                op: "append head vector",
                expected: self.head_dim,
                actual: bad.len(),
            });
        }
        if let Some((last, _)) = cache_layer.last_position() {
            let tie_ok = position == last && segment == Segment::MergedImage;
            if position <= last && !tie_ok {
                return Err(Error::OutOfOrder {
                    layer,
                    position,
                    last,
                    segment,
                });
            }
        }
        for (h, head) in cache_layer.heads.iter_mut().enumerate() {
            head.push(keys[h], values[h], position, segment);
        }
        Ok(())
    }

    /// Entries per layer, summed over heads.
    pub fn entries_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(CacheLayer::total_entries).collect()
    }

    /// Image entries per layer, summed over heads.
    pub fn image_entries_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.heads.iter().map(HeadCache::image_count).sum())
            .collect()
    }

    /// Writes one CSV row per cached entry of every layer and head.
    pub fn write_snapshot_csv<W: Write>(&self, mut w: W, report: Option<&CompressionReport>) -> Result<()> {
        writeln!(w, "layer,head,position,segment,retained,score")?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for e in head.entries() {
                    writeln!(w, "{l},{h},{},{},1,", e.position, e.segment.as_str())?;
                }
            }
            if let Some(Some(lr)) = report.map(|r| r.layers.get(l).cloned().flatten()) {
                for (h, head) in lr.iter().enumerate() {
                    for d in &head.dropped {
                        writeln!(w, "{l},{h},{},{},0,{}", d.0, d.1.as_str(), d.2)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionConfig {
    pub beta: f64,
    pub start_layer: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            beta: 0.995,
            start_layer: 5,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!("beta {} outside (0, 1]", self.beta)));
        }
        if self.start_layer >= n_layers {
            return Err(Error::InvalidConfig(format!(
                "compression start layer {} outside a {n_layers}-layer model",
                self.start_layer
            )));
        }
        Ok(())
    }
}

/// Which entries each head kept.
///
/// Image entries are ranked by score (earlier position first on ties); the
/// shortest prefix whose normalized accumulated score reaches `beta` is
/// kept. Non-image entries are always kept. With `beta >= 1`, or when all
/// image scores in the head are zero, every entry is kept.
pub fn retention_mask(scores: &[f32], segments: &[Segment], beta: f64) -> Vec<bool> {
    retention_mask_with_evicted(scores, segments, beta, 0.0)
}

/// [`retention_mask`] where `evicted` image score mass was already dropped
/// earlier and still counts toward the normalizing total.
pub fn retention_mask_with_evicted(
    scores: &[f32],
    segments: &[Segment],
    beta: f64,
    evicted: f64,
) -> Vec<bool> {
    let mut keep: Vec<bool> = segments.iter().map(|s| !s.is_image()).collect();
    let mut image: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].is_image()).collect();
    let total: f64 = image.iter().map(|&i| scores[i] as f64).sum::<f64>() + evicted;
    if beta >= 1.0 || total <= 0.0 {
        return vec![true; segments.len()];
    }
    image.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut acc = 0.0f64;
    for &i in &image {
        keep[i] = true;
        acc += scores[i] as f64 / total;
        if acc >= beta {
            break;
        }
    }
    keep
}

/// Per-head record of what one compression dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadReport {
    pub kept_image: usize,
    /// `(position, segment, score)` of every evicted entry.
    pub dropped: Vec<(usize, Segment, f32)>,
}

/// Per-layer compression outcome; `None` for layers left untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionReport {
    pub layers: Vec<Option<Vec<HeadReport>>>,
}

fn check_scores(layer: &CacheLayer, per_head_scores: &[Vec<f32>]) -> Result<()> {
    if per_head_scores.len() != layer.heads.len() {
        return Err(Error::LengthMismatch {
            op: "compress_layer heads",
            expected: layer.heads.len(),
            actual: per_head_scores.len(),
        });
    }
    for (head, scores) in layer.heads.iter().zip(per_head_scores) {
        if scores.len() != head.len() {
            return Err(Error::LengthMismatch {
                op: "compress_layer scores",
                expected: head.len(),
                actual: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "attention scores must be finite and nonnegative".into(),
            ));
        }
    }
    Ok(())
}

/// Compresses every head of one layer independently.
pub fn compress_layer(
    layer_cache: &CacheLayer,
    per_head_scores: &[Vec<f32>],
    config: &CompressionConfig,
) -> Result<CacheLayer> {
    compress_layer_reported(layer_cache, per_head_scores, config.beta).map(|(l, _)| l)
}

fn compress_layer_reported(
    layer_cache: &CacheLayer,
    per_head_scores: &[Vec<f32>],
    beta: f64,
) -> Result<(CacheLayer, Vec<HeadReport>)> {
    check_scores(layer_cache, per_head_scores)?;
    let mut heads = Vec::with_capacity(layer_cache.heads.len());
    let mut report = Vec::with_capacity(layer_cache.heads.len());
    for (head, scores) in layer_cache.heads.iter().zip(per_head_scores) {
        let keep = retention_mask_with_evicted(scores, &head.segments, beta, head.evicted_score);
        let dropped: Vec<(usize, Segment, f32)> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| (head.positions[i], head.segments[i], scores[i]))
            .collect();
        let mut compressed = head.retain_mask(&keep);
        compressed.evicted_score += dropped
            .iter()
            .filter(|d| d.1.is_image())
            .map(|d| d.2 as f64)
            .sum::<f64>();
        report.push(HeadReport {
            kept_image: compressed.image_count(),
            dropped,
        });
        heads.push(compressed);
    }
    Ok((CacheLayer { heads }, report))
}

/// Compresses layers `start_layer..` with one shared `beta`. `scores[l]`
/// holds the per-head scores of layer `l` and may be `None` below
/// `start_layer`.
pub fn compress_all(
    cache: &KVCache,
    scores: &[Option<Vec<Vec<f32>>>],
    config: &CompressionConfig,
) -> Result<KVCache> {
    compress_all_reported(cache, scores, config).map(|(c, _)| c)
}

/// [`compress_all`] plus a record of what was dropped.
pub fn compress_all_reported(
    cache: &KVCache,
    scores: &[Option<Vec<Vec<f32>>>],
    config: &CompressionConfig,
) -> Result<(KVCache, CompressionReport)> {
    let mut out = cache.clone();
    let report = out.compress_in_place(scores, config)?;
    Ok((out, report))
}

impl KVCache {
    /// In-place form of [`compress_all`]. On error the cache is unchanged.
    pub fn compress_in_place(
        &mut self,
        scores: &[Option<Vec<Vec<f32>>>],
        config: &CompressionConfig,
    ) -> Result<CompressionReport> {
        if !(config.beta > 0.0 && config.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!("beta {} outside (0, 1]", config.beta)));
        }
        let mut compressed = Vec::new();
        for l in config.start_layer..self.n_layers() {
            let layer_scores = scores
                .get(l)
                .and_then(Option::as_ref)
                .ok_or(Error::MissingScores(l))?;
            compressed.push(compress_layer_reported(&self.layers[l], layer_scores, config.beta)?);
        }
        let mut report = CompressionReport {
            layers: vec![None; self.n_layers()],
        };
        for (l, (layer, heads)) in (config.start_layer..).zip(compressed) {
            self.layers[l] = layer;
            report.layers[l] = Some(heads);
        }
        Ok(report)
    }
}

/// Cache footprint in bytes: each entry stores a key and a value of
/// `head_dim` f32s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

pub fn memory_estimate(cache: &KVCache) -> MemoryEstimate {
    let per_entry = 2 * cache.head_dim * std::mem::size_of::<f32>();
    let per_layer: Vec<usize> = cache
        .layers
        .iter()
        .map(|l| l.total_entries() * per_entry)
        .collect();
    let total = per_layer.iter().sum();
    MemoryEstimate { per_layer, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::minimal_prefix_count;
    use proptest::prelude::*;

    fn cache_with(n_layers: usize, n_heads: usize, segments: &[Segment]) -> KVCache {
        let mut c = KVCache::new(n_layers, n_heads, 2);
        for l in 0..n_layers {
            for (p, &s) in segments.iter().enumerate() {
                let k: Vec<Vec<f32>> = (0..n_heads).map(|h| vec![p as f32, h as f32]).collect();
                let kr: Vec<&[f32]> = k.iter().map(Vec::as_slice).collect();
                c.append(l, &kr, &kr, p, s).unwrap();
            }
        }
        c
    }

    fn images(n: usize) -> Vec<Segment> {
        vec![Segment::Image; n]
    }

    #[test]
    fn append_orders_entries() {
        let mut c = KVCache::new(1, 2, 2);
        let v = [1.0f32, 2.0];
        c.append(0, &[&v, &v], &[&v, &v], 3, Segment::Instruction).unwrap();
        assert!(c.layers[0].heads.iter().all(|h| h.len() == 1));
        c.append(0, &[&v, &v], &[&v, &v], 5, Segment::Generated).unwrap();
        for h in &c.layers[0].heads {
            assert_eq!(h.positions(), &[3, 5]);
        }
        let err = c.append(0, &[&v, &v], &[&v, &v], 4, Segment::Generated).unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { position: 4, last: 5, .. }));
        assert!(c.append(3, &[&v, &v], &[&v, &v], 9, Segment::Generated).is_err());
        assert!(c.append(0, &[&v], &[&v], 9, Segment::Generated).is_err());
        assert_eq!(c.next_position(), 6);
    }

    #[test]
    fn merged_token_may_share_survivor_position() {
        let mut c = KVCache::new(1, 1, 1);
        c.append(0, &[&[0.0]], &[&[0.0]], 4, Segment::Image).unwrap();
        c.append(0, &[&[1.0]], &[&[1.0]], 4, Segment::MergedImage).unwrap();
        assert!(c.append(0, &[&[1.0]], &[&[1.0]], 4, Segment::Instruction).is_err());
    }

    #[test]
    fn beta_one_keeps_everything() {
        let c = cache_with(1, 2, &images(6));
        let scores = vec![vec![0.5, 0.2, 0.1, 0.1, 0.1, 0.0]; 2];
        let cfg = CompressionConfig { beta: 1.0, start_layer: 0 };
        assert_eq!(compress_layer(&c.layers[0], &scores, &cfg).unwrap(), c.layers[0]);
    }

    #[test]
    fn threshold_example() {
        let c = cache_with(1, 1, &images(5));
        let scores = vec![vec![0.5, 0.2, 0.15, 0.1, 0.05]];
        let cfg = CompressionConfig { beta: 0.9, start_layer: 0 };
        let out = compress_layer(&c.layers[0], &scores, &cfg).unwrap();
        assert_eq!(out.heads[0].positions(), &[0, 1, 2, 3]);
    }

    #[test]
    fn heads_compress_independently() {
        let n = 20;
        let c = cache_with(1, 2, &images(n));
        let uniform = vec![1.0 / n as f32; n];
        let mut onehot = vec![0.0; n];
        onehot[7] = 1.0;
        let cfg = CompressionConfig { beta: 0.9, start_layer: 0 };
        let out = compress_layer(&c.layers[0], &[uniform, onehot], &cfg).unwrap();
        assert_eq!(out.heads[0].len(), (0.9 * n as f64).ceil() as usize);
        assert_eq!(out.heads[1].positions(), &[7]);
    }

    #[test]
    fn text_entries_survive_and_order_is_restored() {
        let segs = [
            Segment::SystemPrompt,
            Segment::Image,
            Segment::Image,
            Segment::Image,
            Segment::Instruction,
        ];
        let c = cache_with(1, 1, &segs);
        // text scores are huge but must not dilute the image budget
        let scores = vec![vec![100.0, 0.1, 0.7, 0.2, 100.0]];
        let cfg = CompressionConfig { beta: 0.85, start_layer: 0 };
        let out = compress_layer(&c.layers[0], &scores, &cfg).unwrap();
        assert_eq!(out.heads[0].positions(), &[0, 2, 3, 4]);
    }

    #[test]
    fn rejects_mismatched_scores() {
        let c = cache_with(1, 2, &images(3));
        let cfg = CompressionConfig::default();
        assert!(compress_layer(&c.layers[0], &[vec![1.0; 3]], &cfg).is_err());
        assert!(compress_layer(&c.layers[0], &[vec![1.0; 3], vec![1.0; 2]], &cfg).is_err());
        assert!(compress_layer(&c.layers[0], &[vec![1.0; 3], vec![-1.0; 3]], &cfg).is_err());
    }

    #[test]
    fn compress_all_boundaries() {
        let c = cache_with(3, 1, &images(10));
        let uniform: Vec<Option<Vec<Vec<f32>>>> = vec![Some(vec![vec![0.1; 10]]); 3];
        let cfg = CompressionConfig { beta: 0.5, start_layer: 3 };
        assert_eq!(compress_all(&c, &uniform, &cfg).unwrap(), c);

        let cfg = CompressionConfig { beta: 0.5, start_layer: 1 };
        let out = compress_all(&c, &uniform, &cfg).unwrap();
        assert_eq!(out.entries_per_layer(), vec![10, 5, 5]);

        let missing = vec![Some(vec![vec![0.1; 10]]), None, None];
        assert!(matches!(compress_all(&c, &missing, &cfg), Err(Error::MissingScores(1))));
    }

    #[test]
    fn steeper_scores_keep_fewer_entries() {
        let n = 50;
        let c = cache_with(4, 1, &images(n));
        let scores: Vec<Option<Vec<Vec<f32>>>> = (0..4)
            .map(|l| {
                let sharp = 0.5 + l as f32;
                Some(vec![(0..n).map(|i| (-sharp * i as f32 / 5.0).exp()).collect()])
            })
            .collect();
        let cfg = CompressionConfig { beta: 0.95, start_layer: 0 };
        let kept = compress_all(&c, &scores, &cfg).unwrap().entries_per_layer();
        for l in 0..4 {
            let want = minimal_prefix_count(scores[l].as_ref().unwrap()[0].as_slice(), 0.95);
            assert_eq!(kept[l], want);
        }
        assert!(kept.windows(2).all(|w| w[0] > w[1]), "{kept:?}");
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_estimate(&KVCache::new(2, 2, 8)).total, 0);
        let mut c = KVCache::new(1, 1, 64);
        let v = vec![0.0f32; 64];
        for p in 0..10 {
            c.append(0, &[&v], &[&v], p, Segment::Image).unwrap();
        }
        let m = memory_estimate(&c);
        assert_eq!(m.total, 5120);
        assert_eq!(m.per_layer, vec![5120]);
    }

    #[test]
    fn snapshot_lists_kept_and_dropped() {
        let c = cache_with(1, 1, &images(3));
        let scores = vec![Some(vec![vec![0.8, 0.15, 0.05]])];
        let cfg = CompressionConfig { beta: 0.9, start_layer: 0 };
        let (out, report) = compress_all_reported(&c, &scores, &cfg).unwrap();
        let mut buf = Vec::new();
        out.write_snapshot_csv(&mut buf, Some(&report)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "layer,head,position,segment,retained,score\n0,0,0,image,1,\n0,0,1,image,1,\n0,0,2,image,0,0.05\n"
        );
    }

    proptest! {
        #[test]
        fn retention_is_minimal_monotone_and_idempotent(
            scores in prop::collection::vec(0.001f32..1.0, 1..80),
            b1 in 0.05f64..1.0,
            b2 in 0.05f64..1.0,
        ) {
            let segs = images(scores.len());
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let small = retention_mask(&scores, &segs, lo);
            let large = retention_mask(&scores, &segs, hi);
            for (a, b) in small.iter().zip(&large) {
                prop_assert!(!a || *b);
            }
            let kept = large.iter().filter(|&&k| k).count();
            prop_assert_eq!(kept, minimal_prefix_count(&scores, hi));

            let c = cache_with(1, 1, &segs);
            let cfg = CompressionConfig { beta: hi, start_layer: 0 };
            let once = compress_layer(&c.layers[0], std::slice::from_ref(&scores), &cfg).unwrap();
            let kept_scores: Vec<f32> = scores.iter().zip(&large).filter(|(_, &k)| k).map(|(s, _)| *s).collect();
            prop_assert_eq!(once.heads[0].len(), kept_scores.len());
            let twice = compress_layer(&once, &[kept_scores], &cfg).unwrap();
            prop_assert_eq!(&once, &twice);
        }
    }
}
