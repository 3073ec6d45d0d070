use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scalenas::commands::{self, ConfigArgs};
use scalenas::CliError;
use scalenas_core::train::EpochReport;
use scalenas_core::Ablation;

#[derive(Parser)]
#[command(name = "scalenas", version, about = "Multi-scale architecture search for multivariate forecasting")]
struct Cli {
    /// Suppress per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of temporal scales.
    #[arg(long)]
    scales: Option<usize>,
    /// shared | non-shared | no-att | no-conv | no-basic | no-grouping
    #[arg(long, value_parser = parse_ablation)]
    ablation: Vec<Ablation>,
}

impl RunArgs {
    fn into_config(self) -> ConfigArgs {
        ConfigArgs {
            config: self.config,
            scales: self.scales,
            ablations: self.ablation,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series with a planted graph.
    GenSynth {
        /// Generator spec (TOML, or JSON by extension); defaults if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the architecture search.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a fixed architecture from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint's architecture as JSON.
    ExportArch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint's learned adjacency matrices as CSV.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: scalenas_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let quiet = cli.quiet;
    let mut progress = |r: EpochReport| {
        if !quiet {
            eprintln!("{} epoch {}/{}: valid loss {:.6}", r.stage.name(), r.epoch, r.epochs, r.valid_loss);
        }
    };
    match cli.command {
        Command::GenSynth { spec, seed, out } => commands::gen_synth(spec.as_deref(), seed, &out),
        Command::Search { data, out, run } => commands::search(&data, &run.into_config(), &out, &mut progress),
        Command::Train { data, arch, out, run } => {
            commands::train(&data, &arch, &run.into_config(), &out, &mut progress)
        }
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, &out),
        Command::ExportArch { checkpoint, out } => commands::export_arch(&checkpoint, &out),
        Command::ExportGraph { checkpoint, out } => commands::export_graph(&checkpoint, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
