use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corporea::gp_forward::Modality;
use corporea::harness::{
    cmd_acquire, cmd_config, cmd_reconstruct, cmd_rhi, cmd_selfdetect, cmd_train, Context,
    RunConfig,
};
use corporea::par::Exec;
use corporea::Error;

#[derive(Parser, Debug)]
#[command(
    name = "corporea",
    version,
    about = "Body self-perception on a simulated planar arm"
)]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every inner loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample joint states and record multimodal readings.
    Acquire {
        /// Number of samples; defaults to acquisition.samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the visual and tactile forward models.
    Train {
        /// Dataset CSV; defaults to <out>/dataset.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Rubber-hand drift under synchronous, asynchronous and no stimulation.
    Rhi {
        /// Use the 2-D identity toy instead of the learned models.
        #[arg(long)]
        toy: bool,
    },
    /// Self/other segmentation of a synthetic saliency sequence.
    Selfdetect,
    /// Drop one modality on held-out samples and reconstruct it.
    Reconstruct {
        /// proprio, visual or tactile; defaults to reconstruct.drop.
        #[arg(long)]
        drop: Option<String>,
    },
    /// Print (and store) the resolved config.
    Config {
        /// Print the built-in defaults and exit.
        #[arg(long)]
        print_default: bool,
    },
}

fn run(cli: Cli) -> corporea::Result<String> {
    if let Command::Config {
        print_default: true,
    } = cli.command
    {
        return Ok(RunConfig::default().to_json());
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let out = match cli.command {
        Command::Acquire { n } => cmd_acquire(&Context::new(config, exec), n)?,
        Command::Train { dataset } => cmd_train(&Context::new(config, exec), dataset.as_deref())?,
        Command::Rhi { toy } => {
            config.rhi.toy |= toy;
            cmd_rhi(&Context::new(config, exec))?
        }
        Command::Selfdetect => cmd_selfdetect(&Context::new(config, exec))?,
        Command::Reconstruct { drop } => {
            let drop = drop.map(|d| d.parse::<Modality>()).transpose()?;
            cmd_reconstruct(&Context::new(config, exec), drop)?
        }
        Command::Config { .. } => cmd_config(&Context::new(config, exec))?,
    };
    Ok(out.report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
