//! Toy decoder-only transformer with prefill, cached decode and greedy
//! generation.
//!
//! Blocks are pre-norm: `x += attn(ln1(x))`, then `x += mlp(ln2(x))` with a
//! 4× GELU MLP. There is no positional encoding; position ids are metadata
//! for ordering the cache and placing merged tokens.

mod input;
mod weights;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_row, average_over_heads, causal_attention_tiled, AttentionWeights, StridedRows};
use crate::error::{Error, Result};
use crate::kvcache::{memory_estimate, CacheLayer, CompressionConfig, CompressionReport, KVCache};
use crate::merge::{merge_step, MergeSchedule, Segment, TokenSequence};
use crate::numerics::{argmax, gelu, layer_norm, matmul, Matrix};

pub use input::build_input;
pub use weights::{load_weights, save_weights, MANIFEST_FILE};

const INIT_SCALE: f32 = 0.05;
const MLP_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 28,
            n_heads: 4,
            dim: 256,
            vocab: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("dim", self.dim),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide dim {}",
                self.n_heads, self.dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub attention: AttentionWeights,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Immutable weights; share freely across sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_gain: Vec<f32>,
    pub final_bias: Vec<f32>,
    pub lm_head: Matrix,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-INIT_SCALE..=INIT_SCALE))
}

/// Draws every weight matrix from a ChaCha8 stream seeded with
/// `config.seed`. Layer-norm gains start at 1 and biases at 0.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.dim;
    let token_embedding = uniform(&mut rng, config.vocab, c);
    let blocks = (0..config.n_layers)
        .map(|_| {
            let attention = AttentionWeights {
                wq: uniform(&mut rng, c, c),
                wk: uniform(&mut rng, c, c),
                wv: uniform(&mut rng, c, c),
                wo: uniform(&mut rng, c, c),
                n_heads: config.n_heads,
            };
            Block {
                ln1_gain: vec![1.0; c],
                ln1_bias: vec![0.0; c],
                attention,
                ln2_gain: vec![1.0; c],
                ln2_bias: vec![0.0; c],
                w_up: uniform(&mut rng, c, MLP_EXPANSION * c),
                w_down: uniform(&mut rng, MLP_EXPANSION * c, c),
            }
        })
        .collect();
    let lm_head = uniform(&mut rng, c, config.vocab);
    Ok(Model {
        config: config.clone(),
        token_embedding,
        blocks,
        final_gain: vec![1.0; c],
        final_bias: vec![0.0; c],
        lm_head,
    })
}

fn fnv1a(hash: &mut u64, values: &[f32]) {
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            *hash ^= b as u64;
            *hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

impl Model {
    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Input embedding of a vocabulary id.
    pub fn embedding(&self, token_id: u32) -> Result<&[f32]> {
        let id = token_id as usize;
        if id >= self.token_embedding.rows() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                self.token_embedding.rows()
            )));
        }
        Ok(self.token_embedding.row(id))
    }

    /// FNV-1a over the bit patterns of one block's weights.
    pub fn layer_checksum(&self, layer: usize) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        if let Some(b) = self.blocks.get(layer) {
            for v in [&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias] {
                fnv1a(&mut h, v);
            }
            let a = &b.attention;
            for m in [&a.wq, &a.wk, &a.wv, &a.wo, &b.w_up, &b.w_down] {
                fnv1a(&mut h, m.as_slice());
            }
        }
        h
    }

    fn logits(&self, last_hidden: &[f32]) -> Result<Vec<f32>> {
        let row = Matrix::new(1, last_hidden.len(), last_hidden.to_vec())?;
        let normed = layer_norm(&row, &self.final_gain, &self.final_bias)?;
        Ok(matmul(&normed, &self.lm_head)?.into_vec())
    }
}

fn mlp_residual(block: &Block, x: &mut Matrix) -> Result<()> {
    let h = layer_norm(x, &block.ln2_gain, &block.ln2_bias)?;
    let mut up = matmul(&h, &block.w_up)?;
    for v in up.as_mut_slice() {
        *v = gelu(*v);
    }
    x.add_assign(&matmul(&up, &block.w_down)?)
}

struct LayerPass {
    keys: Matrix,
    values: Matrix,
    cum: Option<Vec<Vec<f32>>>,
}

/// One block over the whole sequence, updating `x` in place.
fn forward_block(block: &Block, x: &mut Matrix, score_rows: Option<&[bool]>) -> Result<LayerPass> {
    let a = &block.attention;
    let h = layer_norm(x, &block.ln1_gain, &block.ln1_bias)?;
    let q = matmul(&h, &a.wq)?;
    let keys = matmul(&h, &a.wk)?;
    let values = matmul(&h, &a.wv)?;
    let (ctx, cum) = causal_attention_tiled(&q, &keys, &values, a.n_heads, score_rows)?;
    x.add_assign(&matmul(&ctx, &a.wo)?)?;
    mlp_residual(block, x)?;
    Ok(LayerPass { keys, values, cum })
}

/// Token-merging and cache-compression settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub merge_layers: Vec<usize>,
    /// Fraction of image tokens left after the last merge stage.
    pub keep_ratio: f64,
    /// Explicit per-stage keep counts; planned from `keep_ratio` when absent.
    pub keep_counts: Option<Vec<usize>>,
    pub compression: CompressionConfig,
    pub merging_enabled: bool,
    pub compression_enabled: bool,
    /// Also drop merged-away tokens' entries from the layers before the
    /// merge point.
    pub evict_merged_entries: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            merge_layers: vec![5, 9, 13],
            keep_ratio: 0.03,
            keep_counts: None,
            compression: CompressionConfig::default(),
            merging_enabled: true,
            compression_enabled: true,
            evict_merged_entries: false,
        }
    }
}

impl PipelineConfig {
    /// Plain transformer: no merging, no compression.
    pub fn disabled() -> Self {
        Self {
            merging_enabled: false,
            compression_enabled: false,
            ..Self::default()
        }
    }

    /// Both mechanisms on, configured so neither changes anything.
    pub fn identity() -> Self {
        Self {
            keep_ratio: 1.0,
            compression: CompressionConfig {
                beta: 1.0,
                ..CompressionConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.merging_enabled {
            if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "keep ratio {} outside (0, 1]",
                    self.keep_ratio
                )));
            }
            if let Some(&l) = self.merge_layers.iter().find(|&&l| l >= n_layers) {
                return Err(Error::InvalidConfig(format!(
                    "merge layer {l} outside a {n_layers}-layer model"
                )));
            }
        }
        if self.compression_enabled {
            self.compression.validate(n_layers)?;
        }
        Ok(())
    }

    /// Merge schedule for an input with `n_image` image tokens, or `None`
    /// when nothing will be merged.
    pub fn merge_schedule(&self, n_image: usize) -> Result<Option<MergeSchedule>> {
        if !self.merging_enabled || self.merge_layers.is_empty() || n_image == 0 {
            return Ok(None);
        }
        let schedule = match &self.keep_counts {
            Some(counts) => {
                if let Some(&k) = counts.iter().find(|&&k| k > n_image || k == 0) {
                    return Err(Error::InvalidConfig(format!(
                        "keep count {k} not within 1..={n_image} available image tokens"
                    )));
                }
                MergeSchedule {
                    merge_layers: self.merge_layers.clone(),
                    keep_counts: counts.clone(),
                    target_ratio: self.keep_ratio,
                }
            }
            None => MergeSchedule::plan(self.merge_layers.clone(), n_image, self.keep_ratio)?,
        };
        Ok(Some(schedule))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub prefill_ms: f64,
    pub decode_ms_per_token: Vec<f64>,
    /// Tokens leaving each layer, i.e. after that layer's merge.
    pub tokens_per_layer: Vec<usize>,
    pub image_tokens_per_layer: Vec<usize>,
    /// Cache entries per layer, summed over heads.
    pub cache_entries_per_layer: Vec<usize>,
    pub memory_bytes: usize,
    pub output_tokens: Vec<u32>,
}

impl RunMetrics {
    pub fn text_tokens_per_layer(&self) -> Vec<usize> {
        self.tokens_per_layer
            .iter()
            .zip(&self.image_tokens_per_layer)
            .map(|(t, i)| t - i)
            .collect()
    }

    pub fn decode_ms(&self) -> f64 {
        self.decode_ms_per_token.iter().sum()
    }

    pub fn mean_decode_ms(&self) -> f64 {
        if self.decode_ms_per_token.is_empty() {
            0.0
        } else {
            self.decode_ms() / self.decode_ms_per_token.len() as f64
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.prefill_ms + self.decode_ms()
    }
}

/// Image-token attention statistics of one layer during prefill.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Positions of the image tokens entering the layer.
    pub image_positions: Vec<usize>,
    pub image_segments: Vec<Segment>,
    /// Head-averaged cumulative scores of those tokens.
    pub image_scores: Vec<f32>,
    /// At merge layers: original positions of the unmerged image tokens.
    pub retained_positions: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PrefillOutput {
    /// Next-token logits.
    pub logits: Vec<f32>,
    pub cache: KVCache,
    pub metrics: RunMetrics,
    pub compression: Option<CompressionReport>,
    /// Filled by [`prefill_traced`].
    pub trace: Option<Vec<LayerTrace>>,
}

pub fn prefill(model: &Model, input: &TokenSequence, pipeline: &PipelineConfig) -> Result<PrefillOutput> {
    run_prefill(model, input, pipeline, false)
}

/// [`prefill`] that also records per-layer image attention statistics.
pub fn prefill_traced(model: &Model, input: &TokenSequence, pipeline: &PipelineConfig) -> Result<PrefillOutput> {
    run_prefill(model, input, pipeline, true)
}

/// Removes `tokens` from one cache layer and the matching stored scores.
fn evict_with_scores(layer: &mut CacheLayer, scores: Option<&mut Vec<Vec<f32>>>, tokens: &[(usize, Segment)]) {
    if let Some(scores) = scores {
        for (head, s) in layer.heads.iter().zip(scores.iter_mut()) {
            let mut keep = head
                .positions()
                .iter()
                .zip(head.segments())
                .map(|(&p, &seg)| !tokens.contains(&(p, seg)));
            s.retain(|_| keep.next().unwrap_or(true));
        }
    }
    layer.evict_tokens(tokens);
}

fn run_prefill(
    model: &Model,
    input: &TokenSequence,
    pipeline: &PipelineConfig,
    trace: bool,
) -> Result<PrefillOutput> {
    let cfg = &model.config;
    if input.is_empty() {
        return Err(Error::InvalidArgument("prefill over an empty input".into()));
    }
    if input.dim() != cfg.dim {
        return Err(Error::LengthMismatch {
            op: "prefill input width",
            expected: cfg.dim,
            actual: input.dim(),
        });
    }
    pipeline.validate(cfg.n_layers)?;
    let schedule = pipeline.merge_schedule(input.image_count())?;
    if let Some(s) = &schedule {
        s.validate(cfg.n_layers)?;
    }

    let start = Instant::now();
    let n_layers = model.n_layers();
    let hd = cfg.head_dim();
    let mut seq = input.clone();
    let mut cache = KVCache::new(n_layers, cfg.n_heads, hd);
    let mut stored: Vec<Option<Vec<Vec<f32>>>> = vec![None; n_layers];
    let mut traces = Vec::new();
    let mut metrics = RunMetrics::default();

    for (l, block) in model.blocks.iter().enumerate() {
        let keep = schedule.as_ref().and_then(|s| s.keep_count_at(l));
        let compress_here = pipeline.compression_enabled && l >= pipeline.compression.start_layer;
        let need_scores = keep.is_some() || compress_here || trace;
        // generated tokens attend but never vote on importance
        let mask: Vec<bool> = seq.segments.iter().map(|&s| s != Segment::Generated).collect();
        let pass = forward_block(block, &mut seq.embeddings, need_scores.then_some(mask.as_slice()))?;

        let mut kh: Vec<&[f32]> = Vec::with_capacity(cfg.n_heads);
        let mut vh: Vec<&[f32]> = Vec::with_capacity(cfg.n_heads);
        for i in 0..seq.len() {
            kh.clear();
            vh.clear();
            for h in 0..cfg.n_heads {
                kh.push(&pass.keys.row(i)[h * hd..(h + 1) * hd]);
                vh.push(&pass.values.row(i)[h * hd..(h + 1) * hd]);
            }
            cache.append(l, &kh, &vh, seq.positions[i], seq.segments[i])?;
        }

        let image = seq.image_indices();
        let image_meta: Option<(Vec<usize>, Vec<Segment>)> = trace.then(|| {
            (
                image.iter().map(|&i| seq.positions[i]).collect(),
                image.iter().map(|&i| seq.segments[i]).collect(),
            )
        });
        let image_scores: Option<Vec<f32>> = pass.cum.as_ref().map(|cum| {
            let avg = average_over_heads(cum);
            image.iter().map(|&i| avg[i]).collect()
        });
        if compress_here {
            stored[l] = pass.cum.clone();
        }
        let mut retained_positions = None;
        if let (Some(kc), Some(importance)) = (keep, image_scores.as_ref()) {
            let step = merge_step(&seq, importance, kc)?;
            if pipeline.evict_merged_entries && !step.merged_away.is_empty() {
                let gone: Vec<(usize, Segment)> = step
                    .merged_away
                    .iter()
                    .map(|&i| (seq.positions[i], seq.segments[i]))
                    .collect();
                for (layer, scores) in cache.layers.iter_mut().zip(stored.iter_mut()).take(l + 1) {
                    evict_with_scores(layer, scores.as_mut(), &gone);
                }
            }
            if trace {
                let s = &step.sequence;
                retained_positions = Some(
                    (0..s.len())
                        .filter(|&i| s.segments[i] == Segment::Image)
                        .map(|i| s.positions[i])
                        .collect(),
                );
            }
            seq = step.sequence;
        }
        if let Some((image_positions, image_segments)) = image_meta {
            traces.push(LayerTrace {
                image_positions,
                image_segments,
                image_scores: image_scores.unwrap_or_default(),
                retained_positions,
            });
        }
        metrics.tokens_per_layer.push(seq.len());
        metrics.image_tokens_per_layer.push(seq.image_count());
    }

    let logits = model.logits(seq.embeddings.row(seq.len() - 1))?;
    let compression = if pipeline.compression_enabled {
        Some(cache.compress_in_place(&stored, &pipeline.compression)?)
    } else {
        None
    };
    metrics.prefill_ms = start.elapsed().as_secs_f64() * 1e3;
    metrics.cache_entries_per_layer = cache.entries_per_layer();
    metrics.memory_bytes = memory_estimate(&cache).total;
    Ok(PrefillOutput {
        logits,
        cache,
        metrics,
        compression,
        trace: trace.then_some(traces),
    })
}

/// Runs one generated token through every layer against the cache,
/// appending its keys and values, and returns the next-token logits.
pub fn decode_step(model: &Model, cache: &mut KVCache, token_id: u32) -> Result<Vec<f32>> {
    let cfg = &model.config;
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if cache.n_layers() != model.n_layers() || cache.n_heads() != cfg.n_heads || cache.head_dim() != cfg.head_dim() {
        return Err(Error::InvalidArgument("cache does not match the model shape".into()));
    }
    let hd = cfg.head_dim();
    let position = cache.next_position();
    let mut x = Matrix::new(1, cfg.dim, model.embedding(token_id)?.to_vec())?;
    let mut ctx = Matrix::zeros(1, cfg.dim);
    let mut scratch = Vec::new();
    for (l, block) in model.blocks.iter().enumerate() {
        let a = &block.attention;
        let h = layer_norm(&x, &block.ln1_gain, &block.ln1_bias)?;
        let q = matmul(&h, &a.wq)?;
        let k = matmul(&h, &a.wk)?;
        let v = matmul(&h, &a.wv)?;
        let kh: Vec<&[f32]> = k.as_slice().chunks_exact(hd).collect();
        let vh: Vec<&[f32]> = v.as_slice().chunks_exact(hd).collect();
        cache.append(l, &kh, &vh, position, Segment::Generated)?;
        for (hi, head) in cache.layers[l].heads.iter().enumerate() {
            let keys = StridedRows::new(head.keys(), hd, 0, hd);
            let values = StridedRows::new(head.values(), hd, 0, hd);
            attend_row(
                &q.as_slice()[hi * hd..(hi + 1) * hd],
                keys,
                values,
                head.len(),
                &mut ctx.row_mut(0)[hi * hd..(hi + 1) * hd],
                &mut scratch,
            );
        }
        x.add_assign(&matmul(&ctx, &a.wo)?)?;
        mlp_residual(block, &mut x)?;
    }
    model.logits(x.row(0))
}

/// Prefill followed by `max_new` greedy steps. Each step picks the argmax
/// of the current logits and feeds it back, so the final cache holds every
/// generated token.
pub fn generate(
    model: &Model,
    input: &TokenSequence,
    pipeline: &PipelineConfig,
    max_new: usize,
) -> Result<(Vec<u32>, RunMetrics)> {
    if max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be at least 1".into()));
    }
    let out = prefill(model, input, pipeline)?;
    let mut cache = out.cache;
    let mut logits = out.logits;
    let mut metrics = out.metrics;
    let mut ids = Vec::with_capacity(max_new);
    metrics.decode_ms_per_token.reserve(max_new);
    for _ in 0..max_new {
        let t = argmax(&logits) as u32;
        ids.push(t);
        let start = Instant::now();
        logits = decode_step(model, &mut cache, t)?;
        metrics.decode_ms_per_token.push(start.elapsed().as_secs_f64() * 1e3);
    }
    metrics.cache_entries_per_layer = cache.entries_per_layer();
    metrics.memory_bytes = memory_estimate(&cache).total;
    metrics.output_tokens = ids.clone();
    Ok((ids, metrics))
}

/// Share of image cache entries still present, over layers
/// `from_layer..`, relative to `n_image` entries per head per layer.
pub fn retained_image_fraction(cache: &KVCache, n_image: usize, from_layer: usize) -> f64 {
    let layers = cache.n_layers().saturating_sub(from_layer);
    let full = n_image * cache.n_heads() * layers;
    if full == 0 {
        return 0.0;
    }
    let kept: usize = cache.image_entries_per_layer().iter().skip(from_layer).sum();
    kept as f64 / full as f64
}
