use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gdistill::config::parse_config;
use gdistill::runner::{emit_plots, run_experiment};

#[derive(Parser)]
#[command(name = "gdistill", version, about = "Class-incremental learning experiments with global distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, seed) trial of a config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long, env = "GDISTILL_OUTPUT")]
        output: Option<PathBuf>,
    },
    /// Check a config and print it with all defaults filled in.
    Validate { config: PathBuf },
    /// Regenerate the ACC/FGT series from a results directory.
    Plots { results: PathBuf },
}

fn load(path: &PathBuf) -> Result<gdistill::config::ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => load(&config).map(|cfg| print!("{}", cfg.to_toml())),
        Command::Run { config, output } => load(&config).and_then(|cfg| {
            let out = output.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let summary = run_experiment(&cfg, &out).map_err(|e| e.to_string())?;
            println!("{:<16} {:>5} {:>16} {:>16} {:>6}", "variant", "seeds", "ACC", "FGT", "failed");
            for r in &summary.aggregate {
                println!(
                    "{:<16} {:>5} {:>7.2} ± {:<6.2} {:>7.2} ± {:<6.2} {:>6}",
                    r.variant,
                    r.seeds,
                    100.0 * r.acc_mean,
                    100.0 * r.acc_std,
                    100.0 * r.fgt_mean,
                    100.0 * r.fgt_std,
                    r.failed
                );
            }
            for rec in summary.records.iter().filter(|r| r.error.is_some()) {
                eprintln!("trial {} seed {} failed: {}", rec.variant, rec.seed, rec.error.as_deref().unwrap_or(""));
            }
            println!("results in {}", out.display());
            Ok(())
        }),
        Command::Plots { results } => emit_plots(&results).map_err(|e| e.to_string()).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
