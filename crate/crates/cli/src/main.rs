use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cmnas::config::RunConfig;
use cmnas::nn::{Baseline, SeparationUnit};
use cmnas::pipeline::{self, ArchSpec};
use cmnas::search::{stage_blocks, SweepMode};

/// Cross-modality normalization-layer architecture search on synthetic data.
#[derive(Parser)]
#[command(name = "cmnas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `output_dir` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SingleBlock,
    FixedPlusTraverse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    Block,
    Bn,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: search the normalization routing, write the architecture file.
    Search {
        #[command(flatten)]
        common: Common,
        /// Resume from a search checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Alignment losses during the search.
        #[arg(long = "phase1-c3mmd", value_enum)]
        phase1_c3mmd: Option<OnOff>,
    },
    /// Phase 2: train a fixed architecture on all training identities.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Architecture file with a '0'/'1' bit line.
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        arch: Option<PathBuf>,
        /// Named baseline instead of an architecture file.
        #[arg(long)]
        baseline: Option<String>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on the held-out identities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate manually separated schemes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "single-block")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "both")]
        unit: Unit,
        /// Fixed blocks for fixed-plus-traverse, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "fix_stage")]
        fix: Vec<String>,
        /// Fix every block of this stage instead.
        #[arg(long = "fix-stage")]
        fix_stage: Option<String>,
    },
    /// Print (or write) the annotated architecture file of a checkpoint.
    ExportArch {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override '{o}' is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[cmnas::eval::RetrievalReport]) {
    for r in reports {
        println!(
            "{:<10} rank1 {:6.2} +- {:5.2}  rank10 {:6.2}  rank20 {:6.2}  mAP {:6.2} +- {:5.2}",
            r.protocol,
            100.0 * r.mean.rank1,
            100.0 * r.std.rank1,
            100.0 * r.mean.rank10,
            100.0 * r.mean.rank20,
            100.0 * r.mean.map,
            100.0 * r.std.map
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { common, checkpoint, phase1_c3mmd } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = phase1_c3mmd {
                cfg.phase1_c3mmd = matches!(t, OnOff::On);
            }
            let out = pipeline::cmd_search(&cfg, checkpoint.as_deref())?;
            for e in &out.log {
                println!("epoch {:>3}  train {:.4}  val {:.4}  arch {}", e.epoch, e.train.total, e.val.total, e.bits);
            }
            println!("architecture {} -> {}", out.bits, cfg.output_dir.join(pipeline::ARCH_FILE).display());
        }
        Command::Retrain { common, arch, baseline, checkpoint } => {
            let cfg = load_config(&common)?;
            let spec = match (arch, baseline) {
                (Some(p), _) => ArchSpec::Bits(
                    pipeline::read_arch_file(&p).with_context(|| format!("reading architecture {}", p.display()))?,
                ),
                (None, Some(b)) => ArchSpec::Baseline(Baseline::parse(&b)?),
                (None, None) => bail!("either --arch or --baseline is required"),
            };
            let run = pipeline::cmd_retrain(&cfg, &spec, checkpoint.as_deref())?;
            println!(
                "trained {} for {} epochs ({} weights) -> {}",
                spec.encode(),
                run.state.epoch,
                run.state.net.weight_count(),
                cfg.output_dir.join(pipeline::MODEL_CKPT).display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let reports = pipeline::cmd_eval(&cfg, &checkpoint)?;
            print_reports(&reports);
        }
        Command::Sweep { common, mode, unit, fix, fix_stage } => {
            let cfg = load_config(&common)?;
            let mode = match mode {
                Mode::SingleBlock => SweepMode::SingleBlock,
                Mode::FixedPlusTraverse => {
                    let fixed = match fix_stage {
                        Some(s) => stage_blocks(&cfg.backbone_shape(), &s)?,
                        None if !fix.is_empty() => fix,
                        None => bail!("fixed-plus-traverse needs --fix or --fix-stage"),
                    };
                    SweepMode::FixedPlusTraverse { fixed }
                }
            };
            let units: &[SeparationUnit] = match unit {
                Unit::Block => &[SeparationUnit::Block],
                Unit::Bn => &[SeparationUnit::Bn],
                Unit::Both => &[SeparationUnit::Block, SeparationUnit::Bn],
            };
            let rows = pipeline::cmd_sweep(&cfg, &mode, units)?;
            for r in &rows {
                println!(
                    "{:<24} {:<5} rank1 {:6.2}  mAP {:6.2}",
                    r.scheme.label(),
                    r.scheme.unit.as_str(),
                    100.0 * r.rank1,
                    100.0 * r.map
                );
            }
        }
        Command::ExportArch { checkpoint, out } => {
            let text = pipeline::cmd_export_arch(&checkpoint)?;
            match out {
                Some(p) => write_new(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn write_new(p: &Path, text: &str) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
