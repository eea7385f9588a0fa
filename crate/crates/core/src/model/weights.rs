//! Weight directories: a text manifest plus one LVT1 file per tensor.
//!
//! ```text
//! lightinfer-weights 1
//! n_layers 28
//! n_heads 4
//! dim 256
//! vocab 512
//! seed 0
//! tensor token_embedding 512 256
//! tensor layers.0.ln1_gain 1 256
//! ...
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Block, Model, ModelConfig};
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::numerics::{read_tensor, write_tensor, Matrix};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "lightinfer-weights 1";

fn vector(v: &[f32]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, j| v[j])
}

fn named_tensors(model: &Model) -> Vec<(String, Matrix)> {
    let mut out = vec![("token_embedding".to_string(), model.token_embedding.clone())];
    for (l, b) in model.blocks.iter().enumerate() {
        let a = &b.attention;
        let entries = [
            ("ln1_gain", vector(&b.ln1_gain)),
            ("ln1_bias", vector(&b.ln1_bias)),
            ("wq", a.wq.clone()),
            ("wk", a.wk.clone()),
            ("wv", a.wv.clone()),
            ("wo", a.wo.clone()),
            ("ln2_gain", vector(&b.ln2_gain)),
            ("ln2_bias", vector(&b.ln2_bias)),
            ("w_up", b.w_up.clone()),
            ("w_down", b.w_down.clone()),
        ];
        out.extend(entries.into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
    }
    out.push(("final_gain".into(), vector(&model.final_gain)));
    out.push(("final_bias".into(), vector(&model.final_bias)));
    out.push(("lm_head".into(), model.lm_head.clone()));
    out
}

/// Writes the manifest and every tensor into `dir`, creating it if needed.
pub fn save_weights(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &model.config;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    writeln!(manifest, "{MANIFEST_HEADER}")?;
    writeln!(manifest, "n_layers {}", c.n_layers)?;
    writeln!(manifest, "n_heads {}", c.n_heads)?;
    writeln!(manifest, "dim {}", c.dim)?;
    writeln!(manifest, "vocab {}", c.vocab)?;
    writeln!(manifest, "seed {}", c.seed)?;
    for (name, m) in named_tensors(model) {
        writeln!(manifest, "tensor {name} {} {}", m.rows(), m.cols())?;
        let mut w = BufWriter::new(File::create(dir.join(format!("{name}.lvt")))?);
        write_tensor(&mut w, &m)?;
        w.flush()?;
    }
    manifest.flush()?;
    Ok(())
}

fn parse_usize(value: Option<&str>, what: &str) -> Result<usize> {
    value
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("manifest entry {what} is not a count")))
}

/// Reads a directory written by [`save_weights`], checking every tensor
/// against the manifest and the model shape.
pub fn load_weights(dir: &Path) -> Result<Model> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format("missing manifest header".into()));
    }
    let mut fields: HashMap<String, u64> = HashMap::new();
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Format("tensor entry without a name".into()))?;
                let rows = parse_usize(parts.next(), name)?;
                let cols = parse_usize(parts.next(), name)?;
                let m = read_tensor(BufReader::new(File::open(dir.join(format!("{name}.lvt")))?))?;
                if m.shape() != (rows, cols) {
                    return Err(Error::Format(format!(
                        "{name} is {}x{}, manifest says {rows}x{cols}",
                        m.rows(),
                        m.cols()
                    )));
                }
                tensors.insert(name.to_string(), m);
            }
            Some(key) => {
                let v = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("manifest entry {key} is not a number")))?;
                fields.insert(key.to_string(), v);
            }
            None => {}
        }
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
    };
    let config = ModelConfig {
        n_layers: field("n_layers")? as usize,
        n_heads: field("n_heads")? as usize,
        dim: field("dim")? as usize,
        vocab: field("vocab")? as usize,
        seed: field("seed")?,
    };
    config.validate()?;
    let c = config.dim;
    let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
        let m = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("manifest lacks tensor {name}")))?;
        if m.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "{name} is {}x{}, model needs {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    };
    let token_embedding = take("token_embedding".into(), config.vocab, c)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut t = |n: &str, rows, cols| take(format!("layers.{l}.{n}"), rows, cols);
        blocks.push(Block {
            ln1_gain: t("ln1_gain", 1, c)?.into_vec(),
            ln1_bias: t("ln1_bias", 1, c)?.into_vec(),
            attention: AttentionWeights {
                wq: t("wq", c, c)?,
                wk: t("wk", c, c)?,
                wv: t("wv", c, c)?,
                wo: t("wo", c, c)?,
                n_heads: config.n_heads,
            },
            ln2_gain: t("ln2_gain", 1, c)?.into_vec(),
            ln2_bias: t("ln2_bias", 1, c)?.into_vec(),
            w_up: t("w_up", c, super::MLP_EXPANSION * c)?,
            w_down: t("w_down", super::MLP_EXPANSION * c, c)?,
        });
    }
    let final_gain = take("final_gain".into(), 1, c)?.into_vec();
    let final_bias = take("final_bias".into(), 1, c)?.into_vec();
    let lm_head = take("lm_head".into(), c, config.vocab)?;
    Ok(Model {
        config,
        token_embedding,
        blocks,
        final_gain,
        final_bias,
        lm_head,
    })
}
