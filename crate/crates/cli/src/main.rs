use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use differ::train::RunMode;
use differ_cli::{cmd_eval, cmd_sample, cmd_synth, cmd_train, load_members, output_dir, CliError, EvalArgs, RunConfig, SampleArgs, OUT_ENV};

#[derive(Parser)]
#[command(name = "differ", version, about = "Categorical diffusion ensembles for single-step retrosynthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out`.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Rank candidate reactant sets for one product.
    Sample {
        #[arg(long = "ckpt", required = true, num_args = 1..)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        product: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-aug", default_value_t = 20)]
        n_aug: usize,
        /// True reactant token count; starts the chain at that length.
        #[arg(long = "oracle-length")]
        oracle_length: Option<usize>,
    },
    /// Top-k accuracy, validity and candidate counts over a test file.
    Eval {
        #[arg(long = "ckpt", required = true, num_args = 1..)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "variant")]
        mode: RunMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-aug", default_value_t = 20)]
        n_aug: usize,
        #[arg(long)]
        limit: Option<usize>,
        /// Directory for the result files; printed only when unset.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic template-reaction dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let done = cmd_train(&cfg, out.as_deref())?;
            if let Some(last) = done.manifest.metrics.last() {
                println!("epoch\t{}\ttotal\t{}", last.epoch, last.total);
            }
            println!("output\t{}", done.out.display());
        }
        Command::Sample { ckpts, product, seed, n_aug, oracle_length } => {
            let members = load_members(&ckpts)?;
            let (_, report) = cmd_sample(&members, &product, &SampleArgs { seed, n_aug, oracle_length })?;
            print!("{report}");
        }
        Command::Eval { ckpts, test, mode, seed, n_aug, limit, out } => {
            let members = load_members(&ckpts)?;
            let summary = cmd_eval(&members, &test, &EvalArgs { mode, seed, n_aug, limit }, out.as_deref())?;
            println!("{}\n{}", differ::ensemble::EvalSummary::header(), summary.row());
        }
        Command::Synth { out, n, seed } => {
            // The synth target is a file; a directory override relocates it.
            let dir = output_dir(None, out.parent().unwrap_or(std::path::Path::new(".")));
            let path = dir.join(out.file_name().ok_or_else(|| CliError::User("--out must name a file".into()))?);
            cmd_synth(&path, n, seed)?;
            println!("wrote\t{}\t{n}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
