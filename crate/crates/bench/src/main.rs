use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lightinfer_bench::commands::{cmd_analyze, cmd_bench, cmd_run, cmd_sweep, cmd_verify};
use lightinfer_bench::{Config, Error, Table};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "lightinfer", version, about = "Toy multimodal inference with token merging and KV cache compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate once and print the per-layer token ledger and timings.
    Run(Common),
    /// Check the optimized paths against the reference implementations.
    Verify(Common),
    /// Time every variant at every output length.
    Bench(Common),
    /// Drift and timing over the keep-ratio by beta grid.
    Sweep(Common),
    /// Attention-mass curves per layer and retained-token masks.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Write CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the input seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to 1 for bench and all cores for sweep.
    #[arg(long)]
    jobs: Option<usize>,
}

fn emit(table: &Table, out: Option<&Path>, hash: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            table.write_csv(&mut w, hash)?;
            w.flush()?;
        }
        None => table.write_csv(io::stdout().lock(), hash)?,
    }
    Ok(())
}

/// `results.csv` becomes `results_masks.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn execute(command: Command) -> Result<ExitCode, anyhow::Error> {
    let (kind, common) = match command {
        Command::Run(c) => ("run", c),
        Command::Verify(c) => ("verify", c),
        Command::Bench(c) => ("bench", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Analyze(c) => ("analyze", c),
    };
    let mut cfg = Config::load(&common.config).map_err(Error::from)?;
    if let Some(seed) = common.seed {
        cfg.input.seed = seed;
    }
    let hash = cfg.hash();
    let out = common.out.as_deref();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match kind {
        "run" => {
            let report = cmd_run(&cfg)?;
            report.print(io::stdout().lock())?;
            if let Some(path) = out {
                emit(&report.ledger(), Some(path), &hash)?;
            }
        }
        "verify" => {
            let report = cmd_verify(&cfg)?;
            report.print(io::stdout().lock())?;
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        "bench" => emit(&cmd_bench(&cfg, common.jobs.unwrap_or(1))?.table(), out, &hash)?,
        "sweep" => emit(&cmd_sweep(&cfg, common.jobs.unwrap_or(cores))?.table(), out, &hash)?,
        _ => {
            let report = cmd_analyze(&cfg)?;
            emit(&report.mass_table(), out, &hash)?;
            match out {
                Some(path) => emit(&report.mask_table(), Some(&sibling(path, "masks")), &hash)?,
                None => {
                    println!();
                    emit(&report.mask_table(), None, &hash)?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config = err.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}
