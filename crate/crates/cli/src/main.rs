use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctrtab::config::RunConfig;
use ctrtab::pipeline;
use ctrtab::train::Stage;
use ctrtab::Error;

/// Condition-controlled diffusion for tabular data.
///
/// Exit codes: 0 ok, 1 other failure, 2 config or usage, 3 missing input
/// file, 4 missing prerequisite artifact, 5 data or schema, 6 training
/// abort, 7 checkpoint format, 8 evaluation.
#[derive(Parser)]
#[command(name = "ctrtab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Denoiser,
    Control,
    Joint,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic table (data.csv, schema.json).
    Gen(Common),
    /// Train one stage (denoiser.ckpt or ctrtab.ckpt).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "denoiser")]
        stage: StageArg,
    },
    /// Sample synthetic.csv from the trained model.
    Sample(Common),
    /// Score synthetic.csv into metrics.json.
    Eval(Common),
    /// Check the noise-regularization identity into verify.json.
    Verify(Common),
    /// Run the ablation variants into ablation.json.
    Ablate(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::MissingPrerequisite(_) => 4,
        Error::Data(_) | Error::Schema(_) | Error::Csv(_) | Error::Shape { .. } => 5,
        Error::NonFinite { .. } | Error::FrozenViolation => 6,
        Error::Format(_) => 7,
        Error::Eval(_) => 8,
        _ => 1,
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, out))
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("CTRTAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CTRTAB_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    log::info!("sequential build; ignoring CTRTAB_THREADS={n}");
    Ok(())
}

fn run(cli: Cli) -> Result<PathBuf, Error> {
    init_threads()?;
    let with = |common: &Common, f: &dyn Fn(&RunConfig, &Path) -> Result<(), Error>| {
        let (cfg, out) = resolve(common)?;
        f(&cfg, &out)?;
        Ok(out)
    };
    match &cli.command {
        Command::Gen(c) => with(c, &pipeline::cmd_gen),
        Command::Train { common, stage } => {
            let stage = match stage {
                StageArg::Denoiser => Stage::Denoiser,
                StageArg::Control => Stage::Control,
                StageArg::Joint => Stage::Joint,
            };
            with(common, &|cfg, out| pipeline::cmd_train(cfg, stage, out))
        }
        Command::Sample(c) => with(c, &pipeline::cmd_sample),
        Command::Eval(c) => with(c, &pipeline::cmd_eval),
        Command::Verify(c) => with(c, &pipeline::cmd_verify),
        Command::Ablate(c) => with(c, &pipeline::cmd_ablate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(out) => {
            log::info!("artifacts in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
