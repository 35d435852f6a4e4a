use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use int8flow::qgemm::ExecMode;
use int8flow_cli::{run, RunSpec, Subcommand};

#[derive(Parser)]
#[command(name = "int8flow", version, about = "INT8 block-quantized training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Quantization error of each scheme on synthetic outlier matrices.
    QuantError(Common),
    /// Counter audit and timing of the kernels.
    Bench(Common),
    /// Training sweep over schemes and seeds.
    Train(TrainArgs),
    /// Fixed-size invariant checks.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config (built-in defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (speed only, never output bytes).
    #[arg(long)]
    threads: Option<usize>,
    /// int8 | qcd
    #[arg(long)]
    mode: Option<String>,
    /// per-block | per-token | per-channel | per-tensor | fp32
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Exit 0 even when a run diverges.
    #[arg(long)]
    allow_divergence: bool,
    /// Continue runs from checkpoints in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop each run after this step and checkpoint it.
    #[arg(long)]
    stop_after: Option<usize>,
}

fn spec_from(sub: Subcommand, c: Common) -> Result<RunSpec, String> {
    let mode = match c.mode {
        Some(m) => Some(m.parse::<ExecMode>().map_err(|e| e.to_string())?),
        None => None,
    };
    Ok(RunSpec {
        config: c.config,
        seed: c.seed,
        threads: c.threads,
        mode,
        scheme: c.scheme,
        block_size: c.block_size,
        ..RunSpec::new(sub, c.out)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = match cli.command {
        Command::QuantError(c) => spec_from(Subcommand::QuantError, c),
        Command::Bench(c) => spec_from(Subcommand::Bench, c),
        Command::Selftest(c) => spec_from(Subcommand::Selftest, c),
        Command::Train(t) => spec_from(Subcommand::Train, t.common).map(|s| RunSpec {
            allow_divergence: t.allow_divergence,
            resume: t.resume,
            stop_after: t.stop_after,
            ..s
        }),
    };
    let spec = match spec {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&spec) {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
