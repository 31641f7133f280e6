use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hmrsim::config::{Execution, ModelWorkload, ScenarioConfig};
use hmrsim::report::{cmd_inject, cmd_model, cmd_run, CommandOutput};

/// Cycle-level simulator of a redundant RISC-V cluster.
#[derive(Parser)]
#[command(name = "hmrsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured workload and section script.
    Run {
        #[command(flatten)]
        common: Common,
        /// Time section switches from the calibration table.
        #[arg(long, conflicts_with = "functional")]
        calibrated: bool,
        /// Execute the section-switch protocol on the cluster model.
        #[arg(long)]
        functional: bool,
    },
    /// Run a single-fault injection campaign.
    Inject {
        #[command(flatten)]
        common: Common,
        /// Also write per-run records as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Evaluate the throughput and overhead models.
    Model {
        #[command(flatten)]
        common: Common,
        /// Cross-check the closed forms with Monte Carlo.
        #[arg(long)]
        validate: bool,
        #[arg(long, value_enum)]
        workload: Option<WorkloadArg>,
    },
    /// Print the JSON schema of scenario configs.
    Schema,
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; reports go to a subdirectory named by config digest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WorkloadArg {
    Matmul,
    Cfft,
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ScenarioConfig::from_json(&text).with_context(|| format!("loading {}", p.display()))?
        }
        None => ScenarioConfig::from_json("{}")?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_outputs(out: &CommandOutput, root: &Path, cfg: &ScenarioConfig) -> Result<PathBuf> {
    let dir = root.join(cfg.short_digest());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = dir.join(out.report_name());
    fs::write(&report, out.report_json()).with_context(|| format!("writing {}", report.display()))?;
    for f in &out.files {
        let p = dir.join(&f.name);
        fs::write(&p, &f.contents).with_context(|| format!("writing {}", p.display()))?;
        log::info!("wrote {}", p.display());
    }
    Ok(report)
}

fn execute(cli: Cli) -> Result<bool> {
    let (common, cfg, out) = match cli.command {
        Command::Run {
            common,
            calibrated,
            functional,
        } => {
            let mut cfg = load(&common)?;
            if calibrated {
                cfg.execution = Execution::Calibrated;
            } else if functional {
                cfg.execution = Execution::Functional;
            }
            let out = cmd_run(&cfg)?;
            (common, cfg, out)
        }
        Command::Inject { common, csv } => {
            let cfg = load(&common)?;
            let out = cmd_inject(&cfg, csv)?;
            (common, cfg, out)
        }
        Command::Model {
            common,
            validate,
            workload,
        } => {
            let mut cfg = load(&common)?;
            if let Some(w) = workload {
                cfg.analytics.workload = match w {
                    WorkloadArg::Matmul => ModelWorkload::Matmul,
                    WorkloadArg::Cfft => ModelWorkload::Cfft,
                };
                cfg.analytics.constants = None;
            }
            let out = cmd_model(&cfg, validate)?;
            (common, cfg, out)
        }
        Command::Schema => {
            print!("{}", ScenarioConfig::schema());
            return Ok(true);
        }
    };
    for line in &out.summary {
        println!("{line}");
    }
    let path = write_outputs(&out, &common.out, &cfg)?;
    println!("report: {}", path.display());
    for a in out.report["assertions"].as_array().into_iter().flatten() {
        if a["pass"] == false {
            println!("assertion failed: {} {} {} (actual {})", a["path"], a["op"], a["value"], a["actual"]);
        }
    }
    Ok(out.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
