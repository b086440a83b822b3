use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgcm::lcnn::Mode;
use fgcm::pipeline::{self, PipelineConfig, RunDir};
use fgcm::Result;

/// Feature-genuinization spoofing countermeasure.
#[derive(Parser)]
#[command(name = "fgcm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic two-class corpus and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clips per class per subset.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
    /// Compute LPS caches and normalisation statistics.
    Extract(RunArgs),
    /// Train the transformer (fg, fs) and the classifier.
    Train(RunArgs),
    /// Score dev and eval rows and write the run report.
    Eval(RunArgs),
    /// Summarise every evaluated mode in a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Native or protocol-format manifest; may be repeated.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<(PipelineConfig, pipeline::Manifest, RunDir)> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let manifest = pipeline::parse_manifests(&self.manifest)?;
        for w in &manifest.warnings {
            log::warn!("{w}");
        }
        Ok((cfg, manifest, RunDir::new(&self.out)))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            seed,
            count,
            sample_rate,
        } => {
            let path = pipeline::write_corpus(&out, count, seed, sample_rate)?;
            println!("wrote {}", path.display());
        }
        Command::Extract(a) => {
            let (cfg, m, run) = a.load()?;
            let s = pipeline::cmd_extract(&m, &cfg, &run)?;
            println!("extracted {} features, statistics from {} rows", s.extracted, s.stats_rows);
        }
        Command::Train(a) => {
            let (cfg, m, run) = a.load()?;
            let r = pipeline::cmd_train(&m, &cfg, &run)?;
            println!(
                "trained {} mode: {} (final loss {:.4})",
                r.mode,
                r.checkpoints.join(", "),
                r.classifier_history.loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval(a) => {
            let (cfg, m, run) = a.load()?;
            let r = pipeline::cmd_eval(&m, &cfg, &run)?;
            for (name, s) in [("dev", &r.dev), ("eval", &r.eval)] {
                if let Some(s) = s {
                    println!("{name}: EER {:.2}%  min t-DCF {:.4}", 100.0 * s.eer, s.min_tdcf);
                }
            }
        }
        Command::Report { out } => {
            print!("{}", pipeline::cmd_report(&RunDir::new(out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
