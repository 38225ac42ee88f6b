use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crpsrft::commands::{self, EvalPaths, TrainKind, TrainPaths, DEFAULT_SIZES};
use crpsrft::{init_threads, report, CliError, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "crpsrft", version, about = "Retrofit deterministic surrogates into CRPS-trained ensemble forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BranchArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Deterministic checkpoint to start from.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Peer configuration whose forward budget this run must equal.
    #[arg(long = "match")]
    peer: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a deterministic model.
    TrainDet(TrainArgs),
    /// Attach a noise branch and train under the fair CRPS.
    RetrofitCrps(BranchArgs),
    /// Continue deterministic training of a checkpoint.
    FinetuneDet(BranchArgs),
    /// Score a model on the test split; writes `<out>.json` and `<out>.csv`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Reference model for paired percentage improvements.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ensemble size.
        #[arg(long = "M")]
        members: Option<usize>,
        /// Output path prefix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median rollout VRMSE against ensemble size.
    EnsembleScaling {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output path prefix.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES)]
        sizes: Vec<usize>,
    },
    /// Merge evaluation artifacts into CSV tables and plot files.
    Report {
        #[arg(long, num_args = 0..)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn train_paths(a: TrainArgs, base: Option<PathBuf>, peer: Option<PathBuf>) -> TrainPaths {
    TrainPaths {
        data: a.data,
        base,
        out: a.out,
        log: a.log,
        peer,
    }
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(c.config.as_deref(), c.seed)
}

fn run(cli: Cli) -> Result<String, CliError> {
    init_threads()?;
    match cli.command {
        Command::GenerateData { common, out } => commands::generate_data(&resolve(&common)?, out),
        Command::TrainDet(a) => {
            let cfg = resolve(&a.common)?;
            commands::train(TrainKind::Pretrain, &cfg, train_paths(a, None, None))
        }
        Command::RetrofitCrps(b) => {
            let cfg = resolve(&b.train.common)?;
            commands::train(TrainKind::Retrofit, &cfg, train_paths(b.train, b.base, b.peer))
        }
        Command::FinetuneDet(b) => {
            let cfg = resolve(&b.train.common)?;
            commands::train(TrainKind::Finetune, &cfg, train_paths(b.train, b.base, b.peer))
        }
        Command::Evaluate {
            common,
            model,
            baseline,
            data,
            members,
            out,
        } => commands::evaluate(
            &resolve(&common)?,
            EvalPaths {
                model,
                baseline,
                data,
                out,
            },
            members,
        ),
        Command::EnsembleScaling {
            common,
            model,
            data,
            out,
            sizes,
        } => commands::ensemble_scaling(&resolve(&common)?, &model, data, out, &sizes),
        Command::Report { inputs, out } => {
            let s = report::merge(&inputs, &out)?;
            Ok(format!(
                "merged {} inputs into {}: {} run rows, {} scaling rows, {} improvement rows, {} plot files\n",
                inputs.len(),
                out.display(),
                s.runs,
                s.scaling,
                s.improvement,
                s.dat_files
            ))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
