use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dagr_cli::commands::{self, CommandError, RunContext, EXIT_USAGE};
use dagr_cli::config::{parse_config, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dagr", version, about = "Geometry-aware multimodal regularization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; all defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and CSV files.
    #[arg(long, global = true, default_value = "dagr-out")]
    out: PathBuf,
    /// Worker threads for sweeps; never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Comma-separated epochs (train) or steps (flow) to dump embeddings at.
    #[arg(long, global = true, value_delimiter = ',')]
    dump_embeddings: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference checks of every gradient.
    Gradcheck,
    /// Particle flow on the hypersphere.
    Flow,
    /// Train on synthetic multimodal data.
    Train,
    /// Geometry report for an embedding dump.
    Diagnose {
        /// Embedding dump CSV (overrides diagnose.input).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Test-time corruption sweeps on a trained model.
    Robustness,
}

fn run(cli: Cli) -> Result<i32, CommandError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CommandError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CommandError::Usage(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(d) = cli.dump_embeddings {
        cfg.dump_embeddings = d;
    }
    let ctx = RunContext::prepare(cli.out)?;
    log::debug!("effective config: {}", cfg.echo());
    match cli.command {
        Command::Gradcheck => commands::cmd_gradcheck(&cfg, &ctx),
        Command::Flow => commands::cmd_flow(&cfg, &ctx),
        Command::Train => commands::cmd_train(&cfg, &ctx),
        Command::Diagnose { input } => commands::cmd_diagnose(&cfg, input.as_deref(), &ctx),
        Command::Robustness => commands::cmd_robustness(&cfg, &ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAGR_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(u8::try_from(code).unwrap_or(EXIT_USAGE as u8))
}
