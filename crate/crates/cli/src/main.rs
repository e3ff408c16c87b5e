use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use p2lca_core::checkpoint;
use p2lca_core::config::ConfigFile;
use p2lca_core::data::{load_dataset, stamp_embeddings, write_dataset};
use p2lca_core::harness::{run_benchmark, simulate_pretraining, Method};
use p2lca_core::p2l::load_semantic_embeddings;
use p2lca_core::report::{prompts_csv, Report};

#[derive(Parser)]
#[command(name = "p2lca", version, about = "Prompt-to-label continual adapters on synthetic multi-label streams")]
struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Benchmark,
    Pretrain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `benchmark` applies the configured domain shift; `pretrain` does not.
        #[arg(long, value_enum, default_value = "benchmark")]
        domain: Domain,
        /// Also write stand-in class embeddings for semantic prompt init.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Pretrain a backbone on a dataset and save it frozen.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the incremental benchmark and write report.json, sessions.csv,
    /// timing.json and model.ckpt.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the method named in the config.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, env = "P2LCA_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Render a report JSON as an aligned table.
    Report {
        input: PathBuf,
        /// Also print per-session CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Write every class prompt of a checkpoint as CSV rows.
    DumpPrompts {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    Ok(match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    })
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        print!("{}", ConfigFile::default_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given (try --help)");
    };
    match command {
        Command::GenData {
            config,
            out,
            domain,
            embeddings,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = match domain {
                Domain::Benchmark => cfg.benchmark_dataset()?,
                Domain::Pretrain => cfg.pretrain_dataset()?,
            };
            write_dataset(&ds, &out)?;
            let back = load_dataset(&out)?;
            if back != ds {
                bail!("dataset written to {} does not read back identically", out.display());
            }
            if let Some(path) = embeddings {
                write(&path, &stamp_embeddings(&cfg.synthetic_spec())?.to_text())?;
            }
            print!("{}", ds.histogram());
            println!("wrote {} train / {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Pretrain { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let start = Instant::now();
            let model = cfg.model();
            let encoder = simulate_pretraining(&model, &ds, &cfg.pretrain_config())?;
            checkpoint::save_backbone(&encoder, &model, &out)?;
            let (back, _) = checkpoint::load_backbone(&out)?;
            if back != encoder {
                bail!("backbone checkpoint {} does not read back identically", out.display());
            }
            println!(
                "pretrained backbone written to {} in {:.1}s",
                out.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Run {
            config,
            data,
            method,
            backbone,
            embeddings,
            out,
        } => {
            let file = load_config(config.as_deref())?;
            let mut cfg = file.run_config()?;
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            let ds = load_dataset(&data)?;
            let backbone = match backbone {
                Some(p) => {
                    let (enc, bcfg) = checkpoint::load_backbone(&p)?;
                    if bcfg != cfg.model {
                        bail!("backbone {} was trained with a different model config", p.display());
                    }
                    Some(enc)
                }
                None => None,
            };
            let emb = embeddings.map(load_semantic_embeddings).transpose()?;
            let result = run_benchmark(&cfg, &ds, backbone, emb.as_ref())?;
            result.report.write_all(&result.timing, &out)?;
            let stages = result.report.sessions.len();
            checkpoint::save(&result.model, stages, out.join("model.ckpt"))?;
            let back = Report::load(out.join("report.json"))?;
            if back != result.report {
                bail!("report in {} does not read back identically", out.display());
            }
            print!("{}", result.report.render_table());
            println!("outputs written to {}", out.display());
        }
        Command::Report { input, csv } => {
            let report = Report::load(&input)?;
            print!("{}", report.render_table());
            if csv {
                print!("{}", report.to_csv());
            }
        }
        Command::DumpPrompts { checkpoint: path, out } => {
            let (model, _) = checkpoint::load(&path)?;
            let csv = prompts_csv(&model.pool);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
