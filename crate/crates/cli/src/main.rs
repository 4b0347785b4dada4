//! `moba`: verification suites, op-count benchmarks, segmentation sweeps,
//! toy training, gate traces and power-law fits.

mod config;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use moba_core::attention::AttentionConfig;
use moba_core::harness::{flop_report, gate_trace, run_suites, segmentation_sweep, SweepProbe, SUITE_NAMES};
use moba_core::metrics::fit_power_law;
use moba_core::model::{load_corpus, synthetic_corpus, train_run};

use config::{TrainFile, TrainOverrides, DEFAULT_SYNTHETIC_LEN};

#[derive(Parser)]
#[command(name = "moba", version, about = "Mixture of Block Attention toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "MOBA_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-equivalence and invariant suites.
    Verify {
        /// Only run these suites (repeatable).
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITE_NAMES))]
        suites: Vec<String>,
    },
    /// Operation counts of dense vs MoBA attention over context lengths, as CSV.
    Bench(BenchArgs),
    /// Fixed-sparsity sweep over block counts, as CSV.
    Sweep(SweepArgs),
    /// Train the toy model; writes loss.csv and checkpoints.
    Train(TrainArgs),
    /// Routing of seeded random queries and keys, as CSV.
    GateTrace(GateTraceArgs),
    /// Fit L = a·C^b to a two-column (C, L) CSV.
    Fit {
        input: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Context lengths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long)]
    block_size: usize,
    #[arg(long)]
    topk: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    sparsity: f64,
    /// Block counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    blocks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Also compare MoBA with dense attention on random inputs of this length.
    #[arg(long)]
    probe_len: Option<usize>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model], [schedule] and optional [corpus] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for loss.csv and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Text file to train on (byte tokens).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    total_tokens: Option<usize>,
    #[arg(long)]
    switch_fraction: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    /// Keep the last F layers in full attention throughout.
    #[arg(long)]
    full_layers: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct GateTraceArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    block_size: usize,
    #[arg(long)]
    topk: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Input problems map to exit code 2, failed checks to 1.
enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        use moba_core::Error as E;
        match e.downcast_ref::<E>() {
            Some(
                E::Partition(_) | E::Parameter(_) | E::Config(_) | E::Domain(_) | E::ContextOverflow { .. },
            ) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Verify { suites } => verify(seed.unwrap_or(0), &suites),
        Command::Bench(args) => bench(args).map_err(Failure::from),
        Command::Sweep(args) => sweep(args, seed.unwrap_or(0)).map_err(Failure::from),
        Command::Train(args) => train(args, seed),
        Command::GateTrace(args) => trace(args, seed.unwrap_or(0)).map_err(Failure::from),
        Command::Fit { input } => fit(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn csv_sink(output: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn verify(seed: u64, suites: &[String]) -> Result<(), Failure> {
    let results = run_suites(seed, suites);
    println!("{:<16} {:>6} {:>6} {:>12} {:>10}", "suite", "result", "cases", "residual", "tolerance");
    for r in &results {
        println!(
            "{:<16} {:>6} {:>6} {:>12.3e} {:>10.0e}{}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.cases,
            r.max_residual,
            r.tolerance,
            r.error.as_deref().map(|e| format!("  {e}")).unwrap_or_default()
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} suites passed (seed {seed})", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} verification suite(s) failed")));
    }
    Ok(())
}

/// Counts are operation counts, not timings.
#[derive(Serialize)]
struct BenchRow {
    n: usize,
    block_size: usize,
    top_k: usize,
    num_heads: usize,
    head_dim: usize,
    sparsity: f64,
    dense_op_count: u64,
    moba_op_count: u64,
    moba_attention_op_count: u64,
    gate_op_count: u64,
    attention_op_ratio: f64,
    total_op_ratio: f64,
    late_query_op_ratio: f64,
    theoretical_ratio: f64,
}

fn bench(args: BenchArgs) -> Result<()> {
    let config = AttentionConfig::moba(args.block_size, args.topk, args.heads, args.head_dim);
    let mut out = csv_sink(args.output.as_deref())?;
    for &n in &args.n {
        let r = flop_report(&config, n)?;
        out.serialize(BenchRow {
            n: r.n,
            block_size: r.block_size,
            top_k: r.top_k,
            num_heads: r.num_heads,
            head_dim: r.head_dim,
            sparsity: r.sparsity,
            dense_op_count: r.dense_flops,
            moba_op_count: r.moba_flops,
            moba_attention_op_count: r.moba_attention_flops,
            gate_op_count: r.gate_flops,
            attention_op_ratio: r.ratio,
            total_op_ratio: r.total_ratio,
            late_query_op_ratio: r.late_query_ratio,
            theoretical_ratio: r.theoretical_ratio,
        })?;
    }
    out.flush()?;
    Ok(())
}

fn sweep(args: SweepArgs, seed: u64) -> Result<()> {
    let probe = args.probe_len.map(|len| SweepProbe {
        context_len: len,
        num_heads: args.heads,
        head_dim: args.head_dim,
        seed,
    });
    let rows = segmentation_sweep(args.n, args.sparsity, &args.blocks, args.heads, args.head_dim, probe)?;
    let mut out = csv_sink(args.output.as_deref())?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    tokens_seen: usize,
    mode: &'static str,
    loss: f64,
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut file = match &args.config {
        Some(p) => TrainFile::load(p).map_err(Failure::Usage)?,
        None => TrainFile::toy(),
    };
    TrainOverrides {
        seed,
        total_tokens: args.total_tokens,
        switch_fraction: args.switch_fraction,
        seq_len: args.seq_len,
        batch_size: args.batch_size,
        lr: args.lr,
        block_size: args.block_size,
        top_k: args.topk,
        full_layers: args.full_layers,
        checkpoint_every: args.checkpoint_every,
        corpus: args.corpus.clone(),
    }
    .apply(&mut file)
    .map_err(Failure::Usage)?;
    file.model.validate().map_err(|e| Failure::Usage(e.into()))?;
    file.schedule.validate(&file.model).map_err(|e| Failure::Usage(e.into()))?;

    let corpus = match &file.corpus.path {
        Some(p) => load_corpus(p).with_context(|| format!("loading corpus {}", p.display()))?,
        None => synthetic_corpus(
            file.corpus.synthetic_len.unwrap_or(DEFAULT_SYNTHETIC_LEN),
            file.schedule.seed,
        ),
    };
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let report = train_run(&corpus, &file.model, &file.schedule, Some(&args.out_dir)).map_err(anyhow::Error::from)?;

    let loss_path = args.out_dir.join("loss.csv");
    let mut out = csv_sink(Some(&loss_path))?;
    for r in &report.records {
        out.serialize(LossRow {
            step: r.step,
            tokens_seen: r.tokens_seen,
            mode: r.mode.as_str(),
            loss: r.loss,
        })
        .map_err(anyhow::Error::from)?;
    }
    out.flush().map_err(anyhow::Error::from)?;

    let first = report.records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = report.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "steps {}  switch step {}  loss {first:.4} -> {last:.4}",
        report.records.len(),
        report.switch_step.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
    );
    println!("wrote {}", loss_path.display());
    for c in &report.checkpoints {
        println!("wrote {}", c.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    query_pos: usize,
    head: usize,
    selected_blocks: String,
}

fn trace(args: GateTraceArgs, seed: u64) -> Result<()> {
    let routing = gate_trace(args.n, args.block_size, args.topk, args.heads, args.head_dim, seed)?;
    let mut out = csv_sink(args.output.as_deref())?;
    for row in routing.rows() {
        out.serialize(TraceRow {
            query_pos: row.query_pos,
            head: row.head,
            selected_blocks: row.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
        })?;
    }
    out.flush()?;
    Ok(())
}

fn fit(input: &Path) -> Result<(), Failure> {
    let points = read_points(input).map_err(Failure::Usage)?;
    let fit = fit_power_law(&points).map_err(|e| Failure::Usage(e.into()))?;
    println!("a={:.6} b={:.6} residual={:.3e} points={}", fit.a, fit.b, fit.residual, fit.points);
    Ok(())
}

/// First two columns as (C, L); a header row is expected.
fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            bail!("row {} has fewer than two columns", i + 2);
        }
        let parse = |s: &str| s.trim().parse::<f64>().with_context(|| format!("row {}: bad number {s:?}", i + 2));
        points.push((parse(&record[0])?, parse(&record[1])?));
    }
    Ok(points)
}
