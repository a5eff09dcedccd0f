//! Batch command-line front end for the epidemic inference pipeline.
//!
//! Commands: `synth`, `simulate`, `fit`, `sample`, `summarize`.
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical
//! failure, 3 finished without convergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use commands::{CliError, CmdResult};
use config::LoadedConfig;
use epifuse::inference::McmcOptions;

const USAGE: &str = "\
usage: epifuse <command> --config <path> --out <dir> [options]

commands:
  synth       generate a synthetic scenario: data CSVs plus truth.json
  simulate    project trajectories for a parameter file (paths.params)
  fit         MAP fit with Laplace covariance -> map.json
  sample      adaptive Metropolis sampling from a saved fit -> posterior_samples.csv
  summarize   medians, 95% intervals and diagnostics -> summary.json

options:
  --config <path>   run configuration (TOML), required
  --out <dir>       output directory, required
  --seed <u64>      RNG seed, required for synth, fit and sample
  --chains <n>      override inference.chains (sample)
  --iters <n>       override inference.iters (sample)
  --warmup <n>      override inference.warmup (sample)
";

#[derive(Debug, Default)]
pub struct InferenceOverrides {
    chains: Option<usize>,
    iters: Option<usize>,
    warmup: Option<usize>,
}

impl InferenceOverrides {
    pub fn apply(&self, opts: &mut McmcOptions) {
        if let Some(c) = self.chains {
            opts.chains = c;
        }
        if let Some(i) = self.iters {
            opts.iters = i;
        }
        if let Some(w) = self.warmup {
            opts.warmup = w;
        }
    }
}

struct Args {
    command: String,
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    overrides: InferenceOverrides,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let mut command = None;
    let mut config = None;
    let mut out = None;
    let mut seed = None;
    let mut overrides = InferenceOverrides::default();
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                config = Some(PathBuf::from(
                    it.next().ok_or("--config needs a value")?,
                ))
            }
            "--out" => out = Some(PathBuf::from(it.next().ok_or("--out needs a value")?)),
            "--seed" => {
                let v = it.next().ok_or("--seed needs a value")?;
                seed = Some(v.parse().map_err(|_| format!("invalid seed `{v}`"))?);
            }
            "--chains" => {
                let v = it.next().ok_or("--chains needs a value")?;
                overrides.chains =
                    Some(v.parse().map_err(|_| format!("invalid chains `{v}`"))?);
            }
            "--iters" => {
                let v = it.next().ok_or("--iters needs a value")?;
                overrides.iters = Some(v.parse().map_err(|_| format!("invalid iters `{v}`"))?);
            }
            "--warmup" => {
                let v = it.next().ok_or("--warmup needs a value")?;
                overrides.warmup =
                    Some(v.parse().map_err(|_| format!("invalid warmup `{v}`"))?);
            }
            other if command.is_none() && !other.starts_with('-') => {
                command = Some(other.to_string());
            }
            other => return Err(format!("unexpected argument `{other}`")),
        }
    }
    Ok(Args {
        command: command.ok_or("missing command")?,
        config: config.ok_or("missing --config")?,
        out: out.ok_or("missing --out")?,
        seed,
        overrides,
    })
}

fn require_seed(args: &Args) -> Result<u64, CliError> {
    args.seed.ok_or_else(|| {
        CliError::Config(format!("--seed is required for `{}`", args.command))
    })
}

fn run(args: &Args) -> CmdResult {
    let loaded = LoadedConfig::load(&args.config).map_err(CliError::Config)?;
    match args.command.as_str() {
        "synth" => commands::cmd_synth(&loaded, &args.out, require_seed(args)?),
        "simulate" => commands::cmd_simulate(&loaded, &args.out),
        "fit" => commands::cmd_fit(&loaded, &args.out, require_seed(args)?),
        "sample" => commands::cmd_sample(&loaded, &args.out, require_seed(args)?, &args.overrides),
        "summarize" => commands::cmd_summarize(&loaded, &args.out),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" {
        eprint!("{USAGE}");
        return ExitCode::from(if argv.is_empty() { 1 } else { 0 });
    }
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
