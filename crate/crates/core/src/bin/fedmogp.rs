//! `fedmogp` command-line runner.
//!
//! Log verbosity comes from `FEDMOGP_LOG` (`error`, `warn`, `info`,
//! `debug`, `trace`; default `info`). On failure the process exits with
//! status 1, prints a JSON error object on stderr and leaves
//! `FAILED.json` in the output directory so partial artifacts are flagged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmogp::config::{parse_config, ExperimentConfig, Overrides};
use fedmogp::experiment::{cmd_ablate, cmd_gen, cmd_run, AblationAxis};
use fedmogp::kernels::KernelFamily;
use fedmogp::prior::AggregationMode;

const FAILURE_MARKER: &str = "FAILED.json";

#[derive(Parser)]
#[command(name = "fedmogp", version, about = "Federated multi-output GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic client datasets, a manifest and the ground truth.
    Gen(Common),
    /// Run federation and write metrics, predictions and logs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.cbor`.
        #[arg(long)]
        resume: bool,
    },
    /// Run one experiment per aggregation mode or kernel family.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["mode", "kernel"])]
        axis: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Points per task for synthetic data.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    mf_iters: Option<usize>,
    #[arg(long)]
    local_iters: Option<usize>,
    /// One of N, K, W, A.
    #[arg(long)]
    aggregation_mode: Option<AggregationMode>,
    #[arg(long)]
    inducing_m: Option<usize>,
    /// One of rbf, linear, laplace, cauchy.
    #[arg(long)]
    kernel: Option<KernelFamily>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest to read client data from instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> fedmogp::Result<ExperimentConfig> {
        let overrides = Overrides {
            rounds: self.rounds,
            clients: self.clients,
            points: self.points,
            sample_size: self.sample_size,
            mf_iters: self.mf_iters,
            local_iters: self.local_iters,
            aggregation_mode: self.aggregation_mode,
            inducing_m: self.inducing_m,
            kernel: self.kernel,
            seed: self.seed,
            out: self.out.clone(),
            data: self.data.clone(),
        };
        parse_config(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| ExperimentConfig::default().out)
    }
}

fn error_json(command: &str, err: &fedmogp::Error) -> String {
    let mut chain = Vec::new();
    let mut source: Option<&dyn std::error::Error> = Some(err);
    while let Some(e) = source {
        chain.push(e.to_string());
        source = e.source();
    }
    serde_json::json!({ "status": "error", "command": command, "error": err.to_string(), "chain": chain })
        .to_string()
}

fn run(cli: &Cli) -> (&'static str, PathBuf, fedmogp::Result<()>) {
    match &cli.command {
        Command::Gen(c) => ("gen", c.out_dir(), c.load().and_then(|cfg| {
            clear_marker(&cfg.out);
            let manifest = cmd_gen(&cfg)?;
            log::info!("wrote {}", manifest.display());
            Ok(())
        })),
        Command::Run { common, resume } => ("run", common.out_dir(), common.load().and_then(|cfg| {
            clear_marker(&cfg.out);
            let report = cmd_run(&cfg, *resume)?;
            log::info!(
                "finished {} rounds, final ELBO {:.6}, artifacts in {}",
                report.result.logs.len(),
                report.result.final_elbo,
                cfg.out.display()
            );
            Ok(())
        })),
        Command::Ablate { common, axis } => ("ablate", common.out_dir(), common.load().and_then(|cfg| {
            clear_marker(&cfg.out);
            let axis: AblationAxis = axis.parse()?;
            let rows = cmd_ablate(&cfg, axis)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                return Err(fedmogp::Error::numeric(format!(
                    "{failed} of {} ablation cells failed (see ablation.csv)",
                    rows.len()
                )));
            }
            Ok(())
        })),
    }
}

fn clear_marker(out: &Path) {
    let _ = std::fs::remove_file(out.join(FAILURE_MARKER));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDMOGP_LOG", "info")).init();
    let (command, out, outcome) = run(&cli);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = error_json(command, &e);
            eprintln!("{msg}");
            if out.is_dir() {
                let _ = std::fs::write(out.join(FAILURE_MARKER), &msg);
            }
            ExitCode::FAILURE
        }
    }
}
