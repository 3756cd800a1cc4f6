//! Command-line front end. `run_cli` returns the process exit code: 0 on
//! success, 1 for invalid input, 2 for runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use consensus_core::policies::{list_policies, LLM_POLICY};
use consensus_core::{build_policies, validate_config, Engine, GameConfig, RunLog, ScriptedPolicies};
use consensus_llm::{Gateway, LlmPolicies};

use crate::report;
use crate::sweep::{run_sweep, SweepOptions, SweepSpec};
use crate::RunnerError;

#[derive(Debug, Parser)]
#[command(name = "consensus-sim", version, about = "Byzantine scalar-consensus game simulator")]
pub struct Cli {
    /// Seed override (game seed for `run`, base seed for `sweep`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for run logs and reports.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Game config (`run`) or sweep spec (`sweep`), as JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Play one game and write its run log (to stdout without --output-dir).
    Run {
        /// Use the parallel engine for agent queries.
        #[arg(long)]
        parallel: bool,
    },
    /// Run every configuration of a sweep spec, skipping finished runs.
    Sweep {
        /// Worker threads (default: one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Aggregate every run log under DIR into CSV.
    Analyze { dir: PathBuf },
    /// Print a stored run round by round and check its outcome.
    Replay { file: PathBuf },
    /// List the available policies.
    Policies,
}

pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                RunnerError::Validation(_) => "invalid input",
                RunnerError::Runtime(_) => "error",
            };
            let _ = writeln!(err, "{kind}: {e}");
            e.exit_code()
        }
    }
}

fn need_config(cli: &Cli) -> Result<&Path, RunnerError> {
    cli.config
        .as_deref()
        .ok_or_else(|| RunnerError::Validation("--config <FILE> is required".into()))
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), RunnerError> {
    match &cli.command {
        Command::Run { parallel } => {
            let log = run_single(cli, *parallel)?;
            let summary = format!(
                "{}: {} after {} rounds",
                consensus_core::ConfigKey::of(&log),
                log.outcome.kind.as_str(),
                log.outcome.rounds_used
            );
            match &cli.output_dir {
                Some(dir) => {
                    let path = dir.join(format!("run_seed{}.json", log.seed));
                    report::write_log(&path, &log)?;
                    if !cli.quiet {
                        let _ = writeln!(err, "{summary}\nwrote {}", path.display());
                    }
                }
                None => {
                    let mut bytes = serde_json::to_vec_pretty(&log).expect("run logs serialize");
                    bytes.push(b'\n');
                    write_out(out, &bytes)?;
                    if !cli.quiet {
                        let _ = writeln!(err, "{summary}");
                    }
                }
            }
            if let Some(e) = &log.error {
                return Err(RunnerError::Runtime(format!("game aborted: {e}")));
            }
            Ok(())
        }
        Command::Sweep { jobs } => {
            let mut spec = SweepSpec::from_file(need_config(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.base_seed = seed;
            }
            let dir = cli
                .output_dir
                .clone()
                .or_else(|| spec.output_dir.clone())
                .ok_or_else(|| RunnerError::Validation("no output directory: pass --output-dir".into()))?;
            let report = run_sweep(
                &spec,
                &dir,
                &SweepOptions {
                    jobs: *jobs,
                    quiet: cli.quiet,
                },
            )?;
            if !cli.quiet {
                let _ = writeln!(
                    err,
                    "sweep {}: {} runs executed, {} already present, {} aborted, {} failed",
                    spec.name,
                    report.executed,
                    report.skipped,
                    report.aborted,
                    report.failures.len()
                );
            }
            if !report.failures.is_empty() {
                for (path, e) in &report.failures {
                    let _ = writeln!(err, "  {}: {e}", path.display());
                }
                return Err(RunnerError::Runtime(format!("{} runs failed", report.failures.len())));
            }
            Ok(())
        }
        Command::Analyze { dir } => {
            let csv = report::analyze_dir(dir)?;
            match &cli.output_dir {
                Some(o) => report::write_bytes(&o.join(report::AGGREGATE_FILE), &csv),
                None => write_out(out, &csv),
            }
        }
        Command::Replay { file } => {
            let log = report::read_log(file)?;
            let text = crate::replay::render(&log)?;
            write_out(out, text.as_bytes())
        }
        Command::Policies => {
            let mut text = String::new();
            for p in list_policies() {
                let roles = match (p.honest, p.byzantine) {
                    (true, true) => "honest, byzantine",
                    (true, false) => "honest",
                    _ => "byzantine",
                };
                text.push_str(&format!("{:<14} {:<18} {}\n", p.name, roles, p.summary));
            }
            write_out(out, text.as_bytes())
        }
    }
}

fn write_out(out: &mut dyn Write, bytes: &[u8]) -> Result<(), RunnerError> {
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|e| RunnerError::Runtime(format!("cannot write output: {e}")))
}

fn run_single(cli: &Cli, parallel: bool) -> Result<RunLog, RunnerError> {
    let path = need_config(cli)?;
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let mut config: GameConfig = serde_json::from_str(&text)
        .map_err(|e| RunnerError::Validation(format!("{}: invalid game config: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let config = validate_config(config).map_err(|e| RunnerError::Validation(e.to_string()))?;
    let uses_llm = config.policy_assignment.values().any(|s| s.name == LLM_POLICY);
    let policies = if uses_llm {
        let gw_config = crate::gateway_config(&config.model, None)?;
        let gateway = Gateway::http(gw_config).map_err(|e| RunnerError::Validation(e.to_string()))?;
        build_policies(&config, &LlmPolicies::new(Arc::new(gateway)))
    } else {
        build_policies(&config, &ScriptedPolicies)
    }
    .map_err(|e| RunnerError::Validation(e.to_string()))?;
    Engine::default()
        .parallel(parallel)
        .run_game(config, &policies)
        .map_err(|e| RunnerError::Runtime(e.to_string()))
}
