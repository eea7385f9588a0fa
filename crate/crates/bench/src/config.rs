//! Flat `key = value` configuration with `[model]`, `[input]`,
//! `[pipeline]` and `[bench]` sections. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use lightinfer_core::kvcache::CompressionConfig;
use lightinfer_core::{ModelConfig, PipelineConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Key {
        section: String,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputConfig {
    pub n_system: usize,
    pub n_image: usize,
    pub n_instruction: usize,
    pub redundancy: f64,
    pub seed: u64,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            n_system: 30,
            n_image: 1476,
            n_instruction: 50,
            redundancy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    MergeOnly,
    CacheOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::MergeOnly, Variant::CacheOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::MergeOnly => "merge-only",
            Variant::CacheOnly => "cache-only",
            Variant::Full => "full",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// `base` with merging and compression switched to match the variant.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let (merging, compression) = match self {
            Variant::Vanilla => (false, false),
            Variant::MergeOnly => (true, false),
            Variant::CacheOnly => (false, true),
            Variant::Full => (true, true),
        };
        PipelineConfig {
            merging_enabled: merging,
            compression_enabled: compression,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Tokens generated by `run`, `verify` and `sweep`.
    pub max_new: usize,
    pub output_lengths: Vec<usize>,
    pub variants: Vec<Variant>,
    pub repetitions: usize,
    pub keep_ratios: Vec<f64>,
    pub betas: Vec<f64>,
    /// Seeds averaged per sweep cell.
    pub seeds: usize,
    pub thresholds: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            max_new: 32,
            output_lengths: vec![128, 256, 512, 1024, 2048, 4096],
            variants: Variant::ALL.to_vec(),
            repetitions: 5,
            keep_ratios: vec![0.35, 0.15, 0.03],
            betas: vec![0.995],
            seeds: 1,
            thresholds: vec![0.90, 0.95, 0.99],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub input: InputConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchConfig,
}


struct Entry<'a> {
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Key {
            section: self.section.to_string(),
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T, ConfigError> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected {what}, got {:?}", self.value)))
    }

    fn count(&self) -> Result<usize, ConfigError> {
        self.parse("a nonnegative integer")
    }

    fn number(&self) -> Result<f64, ConfigError> {
        let v: f64 = self.parse("a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err("expected a finite number"))
        }
    }

    fn flag(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(self.err(format!("expected true or false, got {other:?}"))),
        }
    }

    fn list<T>(&self, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, ConfigError> {
        if self.value.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| {
                item(s.trim()).ok_or_else(|| self.err(format!("bad list item {:?}", s.trim())))
            })
            .collect()
    }

    fn counts(&self) -> Result<Vec<usize>, ConfigError> {
        self.list(|s| s.parse().ok())
    }

    fn numbers(&self) -> Result<Vec<f64>, ConfigError> {
        self.list(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<&str> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "input", "pipeline", "bench"].contains(&name) {
                    return Err(ConfigError::Syntax {
                        line: n + 1,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let section = section.ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: "key outside of any section".into(),
            })?;
            let entry = Entry {
                section,
                key: key.trim(),
                value: value.trim(),
            };
            cfg.set(&entry)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, e: &Entry<'_>) -> Result<(), ConfigError> {
        let (m, i, p, b) = (&mut self.model, &mut self.input, &mut self.pipeline, &mut self.bench);
        match (e.section, e.key) {
            ("model", "n_layers") => m.n_layers = e.count()?,
            ("model", "n_heads") => m.n_heads = e.count()?,
            ("model", "dim") => m.dim = e.count()?,
            ("model", "vocab") => m.vocab = e.count()?,
            ("model", "seed") => m.seed = e.parse("an unsigned integer")?,
            ("input", "n_system") => i.n_system = e.count()?,
            ("input", "n_image") => i.n_image = e.count()?,
            ("input", "n_instruction") => i.n_instruction = e.count()?,
            ("input", "redundancy") => {
                i.redundancy = e.number()?;
                if !(0.0..=1.0).contains(&i.redundancy) {
                    return Err(e.err("must lie in [0, 1]"));
                }
            }
            ("input", "seed") => i.seed = e.parse("an unsigned integer")?,
            ("pipeline", "merging") => p.merging_enabled = e.flag()?,
            ("pipeline", "compression") => p.compression_enabled = e.flag()?,
            ("pipeline", "merge_layers") => p.merge_layers = e.counts()?,
            ("pipeline", "keep_ratio") => {
                p.keep_ratio = e.number()?;
                if !(p.keep_ratio > 0.0 && p.keep_ratio <= 1.0) {
                    return Err(e.err("must lie in (0, 1]"));
                }
            }
            ("pipeline", "keep_counts") => {
                let counts = e.counts()?;
                p.keep_counts = (!counts.is_empty()).then_some(counts);
            }
            ("pipeline", "beta") => {
                p.compression.beta = e.number()?;
                if !(p.compression.beta > 0.0 && p.compression.beta <= 1.0) {
                    return Err(e.err("must lie in (0, 1]"));
                }
            }
            ("pipeline", "start_layer") => p.compression.start_layer = e.count()?,
            ("pipeline", "evict_merged_entries") => p.evict_merged_entries = e.flag()?,
            ("bench", "max_new") => {
                b.max_new = e.count()?;
                if b.max_new == 0 {
                    return Err(e.err("must be at least 1"));
                }
            }
            ("bench", "output_lengths") => {
                b.output_lengths = e.counts()?;
                if b.output_lengths.contains(&0) {
                    return Err(e.err("lengths must be at least 1"));
                }
            }
            ("bench", "variants") => {
                b.variants = e.list(Variant::parse)?;
                if !b.variants.contains(&Variant::Vanilla) {
                    b.variants.insert(0, Variant::Vanilla);
                }
            }
            ("bench", "repetitions") => {
                b.repetitions = e.count()?;
                if b.repetitions < 5 {
                    return Err(e.err("at least 5 repetitions are required"));
                }
            }
            ("bench", "keep_ratios") => {
                b.keep_ratios = e.numbers()?;
                if b.keep_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                    return Err(e.err("ratios must lie in (0, 1]"));
                }
            }
            ("bench", "betas") => {
                b.betas = e.numbers()?;
                if b.betas.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                    return Err(e.err("betas must lie in (0, 1]"));
                }
            }
            ("bench", "seeds") => {
                b.seeds = e.count()?;
                if b.seeds == 0 {
                    return Err(e.err("must be at least 1"));
                }
            }
            ("bench", "thresholds") => {
                b.thresholds = e.numbers()?;
                if b.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
                    return Err(e.err("thresholds must lie in (0, 1]"));
                }
            }
            _ => return Err(e.err("unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks that no single key can catch.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: lightinfer_core::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        let n_layers = self.model.n_layers;
        if let Some(&l) = self.pipeline.merge_layers.iter().find(|&&l| l >= n_layers) {
            return Err(ConfigError::Key {
                section: "pipeline".into(),
                key: "merge_layers".into(),
                message: format!("layer {l} is not below n_layers = {n_layers}"),
            });
        }
        if self.pipeline.compression_enabled && self.pipeline.compression.start_layer >= n_layers {
            return Err(ConfigError::Key {
                section: "pipeline".into(),
                key: "start_layer".into(),
                message: format!("must be below n_layers = {n_layers}"),
            });
        }
        if let Some(counts) = &self.pipeline.keep_counts {
            if counts.len() != self.pipeline.merge_layers.len() {
                return Err(ConfigError::Key {
                    section: "pipeline".into(),
                    key: "keep_counts".into(),
                    message: format!("needs one count per merge layer ({})", self.pipeline.merge_layers.len()),
                });
            }
        }
        self.pipeline.validate(n_layers).map_err(invalid)?;
        let i = &self.input;
        if i.n_system + i.n_image + i.n_instruction == 0 {
            return Err(ConfigError::Key {
                section: "input".into(),
                key: "n_image".into(),
                message: "the input needs at least one token".into(),
            });
        }
        Ok(())
    }

    /// Every setting as `section.key=value` lines, in a fixed order.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let nums = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let (m, i, p, b) = (&self.model, &self.input, &self.pipeline, &self.bench);
        let mut s = String::new();
        let _ = writeln!(s, "model.n_layers={}", m.n_layers);
        let _ = writeln!(s, "model.n_heads={}", m.n_heads);
        let _ = writeln!(s, "model.dim={}", m.dim);
        let _ = writeln!(s, "model.vocab={}", m.vocab);
        let _ = writeln!(s, "model.seed={}", m.seed);
        let _ = writeln!(s, "input.n_system={}", i.n_system);
        let _ = writeln!(s, "input.n_image={}", i.n_image);
        let _ = writeln!(s, "input.n_instruction={}", i.n_instruction);
        let _ = writeln!(s, "input.redundancy={}", i.redundancy);
        let _ = writeln!(s, "input.seed={}", i.seed);
        let _ = writeln!(s, "pipeline.merging={}", p.merging_enabled);
        let _ = writeln!(s, "pipeline.compression={}", p.compression_enabled);
        let _ = writeln!(s, "pipeline.merge_layers={}", list(&p.merge_layers));
        let _ = writeln!(s, "pipeline.keep_ratio={}", p.keep_ratio);
        let _ = writeln!(s, "pipeline.keep_counts={}", list(p.keep_counts.as_deref().unwrap_or(&[])));
        let _ = writeln!(s, "pipeline.beta={}", p.compression.beta);
        let _ = writeln!(s, "pipeline.start_layer={}", p.compression.start_layer);
        let _ = writeln!(s, "pipeline.evict_merged_entries={}", p.evict_merged_entries);
        let _ = writeln!(s, "bench.max_new={}", b.max_new);
        let _ = writeln!(s, "bench.output_lengths={}", list(&b.output_lengths));
        let variants: Vec<&str> = b.variants.iter().map(|v| v.label()).collect();
        let _ = writeln!(s, "bench.variants={}", variants.join(","));
        let _ = writeln!(s, "bench.repetitions={}", b.repetitions);
        let _ = writeln!(s, "bench.keep_ratios={}", nums(&b.keep_ratios));
        let _ = writeln!(s, "bench.betas={}", nums(&b.betas));
        let _ = writeln!(s, "bench.seeds={}", b.seeds);
        let _ = writeln!(s, "bench.thresholds={}", nums(&b.thresholds));
        s
    }

    /// SHA-256 of [`Config::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Pipeline with one sweep cell's keep ratio and beta.
    pub fn pipeline_with(&self, keep_ratio: f64, beta: f64) -> PipelineConfig {
        PipelineConfig {
            keep_ratio,
            compression: CompressionConfig {
                beta,
                ..self.pipeline.compression
            },
            ..self.pipeline.clone()
        }
    }
}
