use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use synreid::config::ExperimentConfig;
use synreid::report::emit_report;
use synreid::toygen::{generate_toy_dataset, ToyWorldSpec};
use synreid::train::{run_eval, run_train};

#[derive(Parser)]
#[command(
    name = "synreid",
    about = "Synthetic-to-real domain-adaptive video person re-identification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a TOML experiment config; writes checkpoint.bin and
    /// run_report.json into the configured output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint's student on the configured test split; writes
    /// metrics.txt and metrics.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate even when the checkpoint's config hash disagrees.
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Generate the procedural two-domain toy corpus.
    Toygen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-emit the metrics table and plots from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> synreid::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, report) = run_train(&cfg)?;
            println!(
                "trained {} steps; final total loss {:.4}; artifacts in {}",
                report.final_step,
                report.steps.last().map(|s| s.total).unwrap_or(f64::NAN),
                cfg.output_dir.display()
            );
            if let Some(p) = report.probe_accuracy {
                println!("domain probe accuracy on frozen features: {p:.4}");
            }
            Ok(())
        }
        Command::Eval { config, checkpoint, allow_hash_mismatch } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_eval(&cfg, &checkpoint, allow_hash_mismatch)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Toygen { spec, seed, out, force } => {
            let spec = ToyWorldSpec::load(&spec)?;
            let summary = generate_toy_dataset(&spec, seed, &out, force)?;
            println!(
                "wrote toy corpus to {}: {} source-train, {} target-train, {} test tracklets",
                summary.out_dir.display(),
                summary.source_rows,
                summary.target_rows,
                summary.test_rows
            );
            Ok(())
        }
        Command::Report { run } => {
            let bundle = emit_report(&run)?;
            for p in [bundle.table_txt, bundle.table_json, bundle.loss_plot, bundle.domain_plot]
                .into_iter()
                .flatten()
            {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
