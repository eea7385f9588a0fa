//! The five subcommands. Each returns its report as data; CSV and console
//! rendering live next to the report types.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lightinfer_core::attention::{multi_head_attention, AttentionMode};
use lightinfer_core::kvcache::retention_mask;
use lightinfer_core::merge::{merge_tokens, partition_tokens};
use lightinfer_core::numerics::Matrix;
use lightinfer_core::oracle;
use lightinfer_core::{build_input, generate, init_model, prefill_traced, Model, PipelineConfig, RunMetrics, Segment, TokenSequence};

use crate::config::{Config, Variant};
use crate::report::Table;
use crate::Error;

pub fn build_model(cfg: &Config) -> Result<Model, Error> {
    Ok(init_model(&cfg.model)?)
}

pub fn build_sequence(cfg: &Config) -> Result<TokenSequence, Error> {
    let i = &cfg.input;
    Ok(build_input(i.n_system, i.n_image, i.n_instruction, i.redundancy, i.seed, cfg.model.dim)?)
}

/// `cfg` with model and input seeds shifted by `offset`.
pub fn reseeded(cfg: &Config, offset: u64) -> Config {
    let mut c = cfg.clone();
    c.model.seed = cfg.model.seed.wrapping_add(offset);
    c.input.seed = cfg.input.seed.wrapping_add(offset);
    c
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

/// Medians of one pipeline's timings over `repetitions` runs after a
/// discarded warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub prefill_ms: f64,
    pub mean_decode_ms: f64,
    pub total_ms: f64,
    /// Median over runs of the per-step decode times.
    pub decode_ms_per_token: Vec<f64>,
    pub memory_bytes: usize,
    pub output_tokens: Vec<u32>,
    pub repetitions: usize,
}

pub fn time_generate(
    model: &Model,
    input: &TokenSequence,
    pipeline: &PipelineConfig,
    max_new: usize,
    repetitions: usize,
) -> Result<Timing, Error> {
    generate(model, input, pipeline, max_new)?;
    let mut runs: Vec<RunMetrics> = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        runs.push(generate(model, input, pipeline, max_new)?.1);
    }
    let pick = |f: &dyn Fn(&RunMetrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let decode_ms_per_token = (0..max_new)
        .map(|t| pick(&|m| m.decode_ms_per_token[t]))
        .collect();
    let first = &runs[0];
    Ok(Timing {
        prefill_ms: pick(&|m| m.prefill_ms),
        mean_decode_ms: pick(&RunMetrics::mean_decode_ms),
        total_ms: pick(&RunMetrics::total_ms),
        decode_ms_per_token,
        memory_bytes: first.memory_bytes,
        output_tokens: first.output_tokens.clone(),
        repetitions,
    })
}

// ---------------------------------------------------------------- run

pub struct RunReport {
    pub metrics: RunMetrics,
    pub n_image: usize,
}

pub fn cmd_run(cfg: &Config) -> Result<RunReport, Error> {
    let model = build_model(cfg)?;
    let input = build_sequence(cfg)?;
    let (_, metrics) = generate(&model, &input, &cfg.pipeline, cfg.bench.max_new)?;
    Ok(RunReport {
        metrics,
        n_image: input.image_count(),
    })
}

impl RunReport {
    pub fn ledger(&self) -> Table {
        let m = &self.metrics;
        let mut t = Table::new(&["layer", "tokens", "image_tokens", "text_tokens", "cache_entries"], 1);
        let text = m.text_tokens_per_layer();
        for (l, tokens) in m.tokens_per_layer.iter().enumerate() {
            t.push(vec![
                l.to_string(),
                tokens.to_string(),
                m.image_tokens_per_layer[l].to_string(),
                text[l].to_string(),
                m.cache_entries_per_layer[l].to_string(),
            ]);
        }
        t
    }

    pub fn print<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = &self.metrics;
        writeln!(w, "layer  tokens  image  text  cache_entries")?;
        for row in &self.ledger().rows {
            writeln!(w, "{:>5}  {:>6}  {:>5}  {:>4}  {:>13}", row[0], row[1], row[2], row[3], row[4])?;
        }
        writeln!(w, "prefill_ms          {:.3}", m.prefill_ms)?;
        writeln!(w, "decode_ms           {:.3}", m.decode_ms())?;
        writeln!(w, "mean_decode_ms      {:.3}", m.mean_decode_ms())?;
        writeln!(w, "total_ms            {:.3}", m.total_ms())?;
        writeln!(w, "memory_bytes        {}", m.memory_bytes)?;
        let ids: Vec<String> = m.output_tokens.iter().map(u32::to_string).collect();
        writeln!(w, "output_tokens       {}", ids.join(" "))
    }
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub length: usize,
    pub keep_ratio: f64,
    pub beta: f64,
    pub timing: Timing,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repetitions: usize,
}

/// Keep ratio and beta a variant actually runs with.
fn effective(pipeline: &PipelineConfig) -> (f64, f64) {
    let keep = if pipeline.merging_enabled { pipeline.keep_ratio } else { 1.0 };
    let beta = if pipeline.compression_enabled { pipeline.compression.beta } else { 1.0 };
    (keep, beta)
}

pub fn cmd_bench(cfg: &Config, jobs: usize) -> Result<BenchReport, Error> {
    let model = build_model(cfg)?;
    let input = build_sequence(cfg)?;
    let b = &cfg.bench;
    let mut variants = b.variants.clone();
    if !variants.contains(&Variant::Vanilla) {
        variants.insert(0, Variant::Vanilla);
    }
    let cells: Vec<(Variant, usize)> = variants
        .iter()
        .flat_map(|&v| b.output_lengths.iter().map(move |&n| (v, n)))
        .collect();
    let timings = parallel_map(&cells, jobs, |&(v, n)| {
        time_generate(&model, &input, &v.apply(&cfg.pipeline), n, b.repetitions)
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (&(variant, length), timing) in cells.iter().zip(timings) {
        let (keep_ratio, beta) = effective(&variant.apply(&cfg.pipeline));
        rows.push(BenchRow {
            variant,
            length,
            keep_ratio,
            beta,
            timing: timing?,
            speedup: 1.0,
        });
    }
    let vanilla: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.variant == Variant::Vanilla)
        .map(|r| (r.length, r.timing.total_ms))
        .collect();
    for r in &mut rows {
        if let Some(&(_, base)) = vanilla.iter().find(|(n, _)| *n == r.length) {
            r.speedup = base / r.timing.total_ms;
        }
    }
    Ok(BenchReport {
        rows,
        repetitions: b.repetitions,
    })
}

impl BenchReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            &[
                "label",
                "output_length",
                "keep_ratio",
                "beta",
                "prefill_ms",
                "mean_decode_ms",
                "total_ms",
                "memory_bytes",
                "speedup",
            ],
            self.repetitions,
        );
        for r in &self.rows {
            t.push(vec![
                r.variant.label().into(),
                r.length.to_string(),
                r.keep_ratio.to_string(),
                r.beta.to_string(),
                format!("{:.3}", r.timing.prefill_ms),
                format!("{:.3}", r.timing.mean_decode_ms),
                format!("{:.3}", r.timing.total_ms),
                r.timing.memory_bytes.to_string(),
                format!("{:.2}", r.speedup),
            ]);
        }
        t
    }

    pub fn row(&self, variant: Variant, length: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant && r.length == length)
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub keep_ratio: f64,
    pub beta: f64,
    /// Mean over seeds of the share of generated ids that differ from
    /// the vanilla run.
    pub drift: f64,
    pub timing: Timing,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub seeds: usize,
    pub repetitions: usize,
}

fn differing_share(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    (n - same) as f64 / n as f64
}

/// Runs the keep-ratio by beta grid. Drift runs over all seeds on `jobs`
/// threads; timings use the base seed and always run one at a time.
pub fn cmd_sweep(cfg: &Config, jobs: usize) -> Result<SweepReport, Error> {
    let b = &cfg.bench;
    if b.keep_ratios.is_empty() || b.betas.is_empty() {
        return Err(Error::Config(crate::config::ConfigError::Invalid(
            "sweep needs at least one keep ratio and one beta".into(),
        )));
    }
    let grid: Vec<(f64, f64)> = b
        .keep_ratios
        .iter()
        .flat_map(|&k| b.betas.iter().map(move |&beta| (k, beta)))
        .collect();
    let seeds: Vec<u64> = (0..b.seeds as u64).collect();
    let sessions: Vec<(Model, TokenSequence)> = parallel_map(&seeds, jobs, |&s| {
        let c = reseeded(cfg, s);
        Ok::<_, Error>((build_model(&c)?, build_sequence(&c)?))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let vanilla = PipelineConfig::disabled();
    let baseline: Vec<Vec<u32>> = parallel_map(&sessions, jobs, |(m, x)| {
        generate(m, x, &vanilla, b.max_new).map(|r| r.0)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..sessions.len()).map(move |s| (c, s)))
        .collect();
    let drifts: Vec<f64> = parallel_map(&tasks, jobs, |&(c, s)| {
        let (keep, beta) = grid[c];
        let (m, x) = &sessions[s];
        generate(m, x, &cfg.pipeline_with(keep, beta), b.max_new).map(|r| differing_share(&r.0, &baseline[s]))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let (model, input) = &sessions[0];
    let base = time_generate(model, input, &vanilla, b.max_new, b.repetitions)?;
    let mut cells = Vec::with_capacity(grid.len());
    for (c, &(keep_ratio, beta)) in grid.iter().enumerate() {
        let timing = time_generate(model, input, &cfg.pipeline_with(keep_ratio, beta), b.max_new, b.repetitions)?;
        let cell_drift = &drifts[c * sessions.len()..(c + 1) * sessions.len()];
        cells.push(SweepCell {
            keep_ratio,
            beta,
            drift: cell_drift.iter().sum::<f64>() / cell_drift.len() as f64,
            speedup: base.total_ms / timing.total_ms,
            timing,
        });
    }
    Ok(SweepReport {
        cells,
        seeds: sessions.len(),
        repetitions: b.repetitions,
    })
}

impl SweepReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            &[
                "keep_ratio",
                "beta",
                "seeds",
                "drift",
                "prefill_ms",
                "mean_decode_ms",
                "total_ms",
                "memory_bytes",
                "speedup",
            ],
            self.repetitions,
        );
        for c in &self.cells {
            t.push(vec![
                c.keep_ratio.to_string(),
                c.beta.to_string(),
                self.seeds.to_string(),
                format!("{:.6}", c.drift),
                format!("{:.3}", c.timing.prefill_ms),
                format!("{:.3}", c.timing.mean_decode_ms),
                format!("{:.3}", c.timing.total_ms),
                c.timing.memory_bytes.to_string(),
                format!("{:.2}", c.speedup),
            ]);
        }
        t
    }

    pub fn drift(&self, keep_ratio: f64, beta: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.keep_ratio == keep_ratio && c.beta == beta)
            .map(|c| c.drift)
    }
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug, PartialEq)]
pub struct MassRow {
    pub layer: usize,
    pub threshold: f64,
    pub k: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeReport {
    pub mass: Vec<MassRow>,
    /// Original positions of the input's image tokens.
    pub image_positions: Vec<usize>,
    /// `(merge layer, retained original positions)`.
    pub masks: Vec<(usize, Vec<usize>)>,
}

pub fn cmd_analyze(cfg: &Config) -> Result<AnalyzeReport, Error> {
    let model = build_model(cfg)?;
    let input = build_sequence(cfg)?;
    let out = prefill_traced(&model, &input, &cfg.pipeline)?;
    let trace = out.trace.unwrap_or_default();
    let mut mass = Vec::new();
    for (layer, t) in trace.iter().enumerate() {
        if t.image_scores.is_empty() || t.image_scores.iter().all(|&s| s == 0.0) {
            continue;
        }
        let ks = oracle::attention_mass_curve(&t.image_scores, &cfg.bench.thresholds)?;
        for (&threshold, k) in cfg.bench.thresholds.iter().zip(ks) {
            mass.push(MassRow {
                layer,
                threshold,
                k,
                n: t.image_scores.len(),
            });
        }
    }
    let masks = trace
        .iter()
        .enumerate()
        .filter_map(|(l, t)| t.retained_positions.clone().map(|p| (l, p)))
        .collect();
    let image_positions = input
        .image_indices()
        .into_iter()
        .map(|i| input.positions[i])
        .collect();
    Ok(AnalyzeReport {
        mass,
        image_positions,
        masks,
    })
}

impl AnalyzeReport {
    pub fn mass_table(&self) -> Table {
        let mut t = Table::new(&["layer", "threshold", "k", "k/N"], 1);
        for r in &self.mass {
            t.push(vec![
                r.layer.to_string(),
                r.threshold.to_string(),
                r.k.to_string(),
                format!("{}/{}", r.k, r.n),
            ]);
        }
        t
    }

    /// One row per merge layer, one 0/1 column per original image position.
    pub fn mask_table(&self) -> Table {
        let header: Vec<String> = std::iter::once("layer".to_string())
            .chain(self.image_positions.iter().map(|p| format!("p{p}")))
            .collect();
        let mut t = Table::with_header(header, 1);
        for (layer, kept) in &self.masks {
            let mut row = vec![layer.to_string()];
            row.extend(
                self.image_positions
                    .iter()
                    .map(|p| if kept.binary_search(p).is_ok() { "1" } else { "0" }.to_string()),
            );
            t.push(row);
        }
        t
    }
}

// ---------------------------------------------------------------- verify

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn print<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(w, "{verdict} {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Steps checked against full recomputation.
const RECOMPUTE_STEPS: usize = 8;
/// Rows fed to the attention mode comparison.
const MODE_ROWS: usize = 128;

pub fn cmd_verify(cfg: &Config) -> Result<VerifyReport, Error> {
    let model = build_model(cfg)?;
    let input = build_sequence(cfg)?;
    let max_new = cfg.bench.max_new;
    let mut checks = Vec::new();

    let identity = cfg.pipeline_with(1.0, 1.0);
    let (plain, _) = generate(&model, &input, &PipelineConfig::disabled(), max_new)?;
    let (same, _) = generate(&model, &input, &identity, max_new)?;
    checks.push(Check {
        name: "identity",
        passed: plain == same,
        detail: format!("{} tokens with keep_ratio=1 and beta=1 against the disabled pipeline", max_new),
    });

    let steps = max_new.min(RECOMPUTE_STEPS);
    let exact = cfg.pipeline_with(cfg.pipeline.keep_ratio, 1.0);
    let (cached, _) = generate(&model, &input, &exact, steps)?;
    let recomputed = oracle::full_recompute_decode(&model, &input, &exact, steps)?;
    checks.push(Check {
        name: "cached-decode",
        passed: cached == recomputed,
        detail: format!("{steps} greedy steps against full recomputation"),
    });

    let traced = prefill_traced(&model, &input, &PipelineConfig::disabled())?;
    let trace = traced.trace.unwrap_or_default();
    checks.push(merge_check(&input.embeddings));
    checks.push(partition_check(trace.iter().map(|t| t.image_scores.as_slice())));
    checks.push(coverage_check(&trace));
    checks.push(mode_check(&model, &input)?);
    Ok(VerifyReport { checks })
}

fn merge_check(rows: &Matrix) -> Check {
    let mut worst = 0.0f32;
    let mut instances = 0;
    for r in 0..rows.rows().min(33) {
        let picked: Vec<usize> = (0..=r).map(|i| (i * 7 + r) % rows.rows()).collect();
        let m = rows.select_rows(&picked);
        let weights = lightinfer_core::merge::merge_weights(r);
        if let (Ok(fast), Ok(slow)) = (merge_tokens(&m), oracle::naive_weighted_merge(&m, &weights)) {
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
            instances += 1;
        }
    }
    Check {
        name: "merge",
        passed: instances > 0 && worst <= 1e-6,
        detail: format!("{instances} merges, max abs error {worst:e}"),
    }
}

fn partition_check<'a>(score_sets: impl Iterator<Item = &'a [f32]>) -> Check {
    let mut cases = 0;
    let mut mismatches = 0;
    for scores in score_sets.filter(|s| s.len() > 1) {
        for r in [0, scores.len() / 3, scores.len() - 2] {
            cases += 1;
            let fast = partition_tokens(scores, r);
            let (keep, merged) = oracle::sort_partition(scores, r);
            match fast {
                Ok(p) if p.unmerged_indices == keep && p.merged_indices == merged => {}
                _ => mismatches += 1,
            }
        }
    }
    Check {
        name: "partition",
        passed: cases > 0 && mismatches == 0,
        detail: format!("{cases} partitions, {mismatches} mismatches"),
    }
}

fn coverage_check(trace: &[lightinfer_core::model::LayerTrace]) -> Check {
    let mut cases = 0;
    let mut bad = 0;
    for t in trace.iter().filter(|t| !t.image_scores.is_empty()) {
        let segments = vec![Segment::Image; t.image_scores.len()];
        for beta in [0.5, 0.9, 0.995] {
            cases += 1;
            let kept = retention_mask(&t.image_scores, &segments, beta)
                .iter()
                .filter(|&&k| k)
                .count();
            if kept != oracle::minimal_prefix_count(&t.image_scores, beta) {
                bad += 1;
            }
        }
    }
    Check {
        name: "coverage",
        passed: cases > 0 && bad == 0,
        detail: format!("{cases} retention masks, {bad} not minimal"),
    }
}

fn mode_check(model: &Model, input: &TokenSequence) -> Result<Check, Error> {
    let n = input.len().min(MODE_ROWS);
    let hidden = input.embeddings.select_rows(&(0..n).collect::<Vec<_>>());
    let weights = &model.blocks[0].attention;
    let full = multi_head_attention(&hidden, weights, AttentionMode::Full)?;
    let fast = multi_head_attention(&hidden, weights, AttentionMode::CumulativeOnly)?;
    let ctx = max_abs_diff(full.context.as_slice(), fast.context.as_slice());
    let cum = max_abs_diff(&full.avg_cum_scores, &fast.avg_cum_scores);
    Ok(Check {
        name: "attention-modes",
        passed: ctx <= 1e-5 && cum <= 1e-5,
        detail: format!("{n} rows, context diff {ctx:e}, score diff {cum:e}"),
    })
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
