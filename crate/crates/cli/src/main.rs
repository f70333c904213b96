use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use stepsearch_cli::commands::{cmd_check, cmd_decode, cmd_evolve, cmd_extract, cmd_stats};
use stepsearch_cli::config::{parse_scheme, BackendKind, DecodeMethod, RunConfig};
use stepsearch_cli::io::RecordKind;

#[derive(Parser)]
#[command(name = "stepsearch", version, about = "Tree-search reasoning pipeline")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the worker parallelism.
    #[arg(long, global = true)]
    parallel: Option<usize>,

    /// Override the backend kind.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile the seed set, sample a curriculum, and search every selected
    /// problem, writing tree dumps and a manifest.
    Evolve {
        /// Seed problem file (line-delimited records).
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Output directory for dumps and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evolution round tag recorded in artifacts.
        #[arg(long)]
        iteration: Option<u32>,
        /// Curriculum size (0 selects every eligible problem).
        #[arg(long)]
        take: Option<usize>,
        /// Rejection samples per problem during profiling.
        #[arg(long)]
        profile_samples: Option<usize>,
    },
    /// Extract the three training corpora from finished tree dumps.
    Extract {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label scheme: soft_dual, hard_single, or hard_dual.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        /// Minimum sibling value gap for preference pairs.
        #[arg(long)]
        min_gap: Option<f64>,
    },
    /// Decode the seed problems with one strategy and report accuracy.
    Decode {
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: DecodeMethod,
        /// Samples per problem.
        #[arg(long)]
        n: Option<usize>,
        /// Report path (line-delimited rows; summary written alongside).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize trajectory lengths and reflective-token usage from tree
    /// dumps (directory) or an SFT corpus (file).
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Lengths below this count as short.
        #[arg(long, default_value_t = 256)]
        short_below: usize,
        /// Lengths above this count as long.
        #[arg(long, default_value_t = 512)]
        long_above: usize,
    },
    /// Validate artifact files against their schemas; exits nonzero on any
    /// violation.
    Check {
        #[arg(long, value_enum)]
        kind: RecordKind,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.search.seed = seed;
        run.backend.mock.seed = seed;
    }
    if let Some(parallel) = cli.parallel {
        run.parallelism = parallel;
    }
    if let Some(backend) = cli.backend {
        run.backend.kind = backend;
    }
    Ok(run)
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    let cli = Cli::parse();
    let mut run = load_config(&cli)?;
    match &cli.command {
        Command::Evolve {
            seeds,
            out,
            iteration,
            take,
            profile_samples,
        } => {
            if let Some(seeds) = seeds {
                run.seeds = seeds.clone();
            }
            if let Some(out) = out {
                run.output_dir = out.clone();
            }
            if let Some(iteration) = iteration {
                run.iteration = *iteration;
            }
            if let Some(take) = take {
                run.curriculum.take = *take;
            }
            if let Some(samples) = profile_samples {
                run.curriculum.samples = *samples;
            }
            let manifest = cmd_evolve(&run)?;
            println!(
                "evolved {} trees ({} failed) into {} in {} ms",
                manifest.succeeded,
                manifest.failed.len(),
                run.output_dir.display(),
                manifest.wall_time_ms
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Extract {
            trees,
            out,
            scheme,
            beta,
            min_gap,
        } => {
            if let Some(name) = scheme {
                run.label.scheme = parse_scheme(name)?;
            }
            if let Some(beta) = beta {
                run.label.beta = *beta;
            }
            if let Some(min_gap) = min_gap {
                run.extract.min_gap = *min_gap;
            }
            let out_dir = out
                .clone()
                .unwrap_or_else(|| run.output_dir.join("corpora"));
            let summary = cmd_extract(&run, trees, &out_dir)?;
            println!(
                "extracted {} sft / {} dpo / {} prm records from {} trees ({} mixed, {} all-correct, {} all-incorrect, {} corrupt)",
                summary.sft_records,
                summary.dpo_records,
                summary.prm_records,
                summary.trees_total,
                summary.trees_mixed,
                summary.trees_all_correct,
                summary.trees_all_incorrect,
                summary.trees_corrupt
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Decode {
            seeds,
            method,
            n,
            out,
        } => {
            if let Some(seeds) = seeds {
                run.seeds = seeds.clone();
            }
            let n = n.unwrap_or(run.decode.params.n);
            let out_path = out
                .clone()
                .unwrap_or_else(|| run.output_dir.join("report.jsonl"));
            let summary = cmd_decode(&run, *method, n, &out_path)?;
            println!(
                "{}@{}: {}/{} correct ({:.1}%)",
                summary.method,
                summary.n,
                summary.correct,
                summary.total,
                summary.accuracy * 100.0
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats {
            input,
            out,
            short_below,
            long_above,
        } => {
            let report = cmd_stats(input, *short_below, *long_above)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => stepsearch_cli::io::atomic_write(path, text.as_bytes())?,
                None => println!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { kind, paths } => {
            let violations = cmd_check(*kind, paths)?;
            if violations == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{violations} schema violation(s)");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
