use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distill_core::{load_experiment, run_experiment, Category, Error, Registry, RunOptions};

#[derive(Parser)]
#[command(name = "distill", version, about = "Run knowledge distillation experiments from YAML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (and test) the experiment described by a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run log; defaults to stdout only.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, env = "DISTILL_DEVICE", default_value = "auto")]
        device: String,
        /// Only evaluate the student checkpoint on the test split.
        #[arg(long)]
        test_only: bool,
        /// Start the student from this checkpoint.
        #[arg(long)]
        resume_ckpt: Option<PathBuf>,
        /// Write a JSON report of losses, metrics and timings.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Suppress the log echo on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Validate a config and print it fully resolved.
    Resolve {
        #[arg(long)]
        config: PathBuf,
    },
    /// List registered components.
    Registry,
}

fn load(path: &PathBuf, registry: &Registry) -> Result<distill_core::ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.clone()),
        _ => Error::Other(format!("cannot read {}: {e}", path.display())),
    })?;
    load_experiment(&text, registry)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let registry = Registry::with_builtins();
    match cli.command {
        Command::Registry => {
            for c in Category::ALL {
                println!("{c}: {}", registry.names(c).join(", "));
            }
            ExitCode::SUCCESS
        }
        Command::Resolve { config } => match load(&config, &registry) {
            Ok(cfg) => {
                for w in &cfg.warnings {
                    eprintln!("warning: {w}");
                }
                print!("{}", cfg.to_yaml());
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
        Command::Run { config, log, seed, device, test_only, resume_ckpt, report, quiet } => {
            let cfg = match load(&config, &registry) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            let opts = RunOptions {
                seed,
                log_path: log,
                report_path: report,
                base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
                echo_console: !quiet,
                test_only,
                resume_ckpt,
                device,
            };
            match run_experiment(&cfg, &registry, &opts) {
                Ok(r) => {
                    if let Some(t) = r.test {
                        eprintln!("test top1={:.2} top5={:.2}", t.top1, t.top5);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
    }
}
