use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use unmt_core::pipeline::{self, ExperimentConfig};
use unmt_core::trainer::Cell;

#[derive(Parser)]
#[command(name = "unmt-lab", version, about = "Desk-scale unsupervised NMT experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/reference.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pair, corpora, BPE and vocabulary.
    Prepare,
    /// Embed, pre-train, fine-tune and evaluate grid cells.
    Run {
        /// Cells to run, e.g. `dae-original mass-reordered` (default: all
        /// cells in the config).
        #[arg(long, num_args = 1..)]
        cells: Option<Vec<String>>,
    },
    /// Re-evaluate fine-tuned cells on the test split.
    Evaluate {
        #[arg(long, num_args = 1..)]
        cells: Option<Vec<String>>,
    },
    /// Comparison table, curves, length bins and position heatmaps.
    Report,
    /// Print MASS and DAE corruptions of a few prepared sentences.
    NoiseDebug {
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
}

fn parse_cells(cells: &Option<Vec<String>>) -> Result<Option<Vec<Cell>>> {
    cells
        .as_ref()
        .map(|cs| cs.iter().map(|c| c.parse::<Cell>().map_err(anyhow::Error::from)).collect())
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    match cli.command {
        Command::Prepare => {
            let m = pipeline::cmd_prepare(&cfg)?;
            println!("prepared {} files under {}", m.files.len(), cfg.stage_dir("prepare").display());
            for name in pipeline::MONO_FILES {
                println!("  {name}: {} sentences", m.lines(name).unwrap_or(0));
            }
        }
        Command::Run { cells } => {
            let cells = parse_cells(&cells)?;
            for r in pipeline::cmd_run(&cfg, cells.as_deref())? {
                let bleu = pipeline::test_bleu(&r).map(|b| format!("{b:.2}")).unwrap_or_else(|| "-".into());
                println!("{}: test BLEU src->tgt {bleu}", r.cell);
            }
        }
        Command::Evaluate { cells } => {
            let cells = parse_cells(&cells)?;
            for rep in pipeline::cmd_evaluate(&cfg, cells.as_deref())? {
                for e in &rep.entries {
                    println!("{} {}: BLEU {:.2} CHRF {:.2}", rep.cell, e.direction.as_str(), e.bleu, e.chrf);
                }
            }
        }
        Command::Report => {
            let bundle = pipeline::cmd_report(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.stage_dir("report").join("comparison.txt"))?);
            println!("{} report files in {}", bundle.files.len(), cfg.stage_dir("report").display());
        }
        Command::NoiseDebug { n } => print!("{}", pipeline::noise_debug(&cfg, n)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
