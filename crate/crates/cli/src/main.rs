use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skelact_cli::commands;
use skelact_cli::config::{parse_config, PipelineConfig};
use skelact_cli::CliError;

#[derive(Parser)]
#[command(
    name = "skelact",
    about = "2D-to-3D pose lifting, pose-image encoding, cell search and action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the split protocol.
    #[arg(long)]
    protocol: Option<String>,
    /// Override the test fold (sbu_5fold).
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-stream 2D-to-3D lifter and write its checkpoint.
    LiftTrain(CommonArgs),
    /// Evaluate the lifter checkpoint (prints MPJPE).
    LiftEval(CommonArgs),
    /// Lift the action sequences and encode them into the image cache.
    Encode(CommonArgs),
    /// Run the cell search and write the derived genotype.
    Search(CommonArgs),
    /// Train the final recognizer from the derived genotype.
    RecogTrain(CommonArgs),
    /// Evaluate recognition accuracy (prints the benchmark row).
    RecogEval(CommonArgs),
    /// Run every stage in order.
    Pipeline(CommonArgs),
}

fn effective_config(args: &CommonArgs) -> Result<(PipelineConfig, PathBuf), CliError> {
    let mut config = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.synthetic.seed = seed;
        config.lifter.seed = seed;
        config.search.seed = seed;
        config.recognizer.seed = seed;
        config.pipeline.split_seed = seed;
    }
    if let Some(out) = &args.out {
        config.pipeline.out_dir = out.display().to_string();
    }
    if let Some(protocol) = &args.protocol {
        config.pipeline.protocol = protocol.clone();
    }
    if let Some(fold) = args.fold {
        config.pipeline.fold = fold;
    }
    skelact_cli::config::validate_config(&config)?;
    let out_dir = PathBuf::from(&config.pipeline.out_dir);
    Ok((config, out_dir))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::LiftTrain(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_lift_train(&config, &out)?;
        }
        Command::LiftEval(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_lift_eval(&config, &out)?;
        }
        Command::Encode(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_encode(&config, &out)?;
        }
        Command::Search(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_search(&config, &out)?;
        }
        Command::RecogTrain(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_recog_train(&config, &out)?;
        }
        Command::RecogEval(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_recog_eval(&config, &out)?;
        }
        Command::Pipeline(args) => {
            let (config, out) = effective_config(&args)?;
            commands::cmd_pipeline(&config, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
