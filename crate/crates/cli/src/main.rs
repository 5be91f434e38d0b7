use std::path::PathBuf;
use std::process::ExitCode;

use adpnet_cli::{cmd_export_plots, cmd_run, cmd_run_seeds, default_out_dir, verify};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adpnet",
    about = "Train leaky recurrent networks by reservoir actor-critic optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a config file.
    Run {
        /// Config path (TOML; JSON accepted with a .json extension).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seed list; spawns one worker per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (per-seed subdirectories with --seeds).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        /// Inject a fault into the Riccati solution (harness self-test).
        #[arg(long)]
        perturb_care: bool,
    },
    /// Export plot-ready trajectory and diagnostics CSVs from a run.
    ExportPlots {
        /// A completed run directory (containing report.csv).
        #[arg(long)]
        run: PathBuf,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            seed,
            seeds,
            out,
        } => {
            let out = out.unwrap_or_else(default_out_dir);
            let result = match seeds {
                Some(list) if !list.is_empty() => cmd_run_seeds(&config, &list, &out),
                _ => cmd_run(&config, seed, &out),
            };
            match result {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.code
                }
            }
        }
        Command::Verify { perturb_care } => verify::cmd_verify(perturb_care),
        Command::ExportPlots { run, out } => match cmd_export_plots(&run, out.as_deref()) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                e.code
            }
        },
    };
    ExitCode::from(code as u8)
}
