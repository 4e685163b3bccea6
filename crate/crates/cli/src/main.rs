//! `stancevote` command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error,
//! 3 backend exhaustion (the ledger keeps every finished exchange).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use stancevote::runner::{ExperimentConfig, RunOptions, Runner, RunnerError};
use stancevote::PromptId;

#[derive(Parser)]
#[command(name = "stancevote", version, about = "Multi-prompt stance classification with ensemble voting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Convert source datasets to canonical records.
    Ingest,
    /// Ingest, crop and stratified-trim datasets; writes manifests.
    Sample,
    /// Query backends for every pending exchange and write parsed results.
    Run,
    /// Vote over recorded predictions.
    Vote,
    /// Leave-one-out prompt ablation.
    Ablate,
    /// Fleiss' kappa across repeats.
    Kappa,
    /// Regenerate every report table from the results file.
    Report,
    /// Print how many requests `run` would send.
    DryRun,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict to these datasets (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    dataset: Vec<String>,
    /// Restrict to these backends (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    model: Vec<String>,
    /// Override the prompt set, e.g. `P1,P2,P3,P4,P5_CoT`.
    #[arg(long, global = true, value_delimiter = ',')]
    prompts: Vec<PromptId>,
    #[arg(long, global = true)]
    repeats: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue an existing ledger; `--resume false` starts over.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    resume: bool,
    /// Print a progress line while running.
    #[arg(long, global = true)]
    progress: bool,
    /// Stop after this many new exchanges.
    #[arg(long, global = true, hide = true)]
    max_exchanges: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, RunnerError> {
        let path = self.config.as_ref().ok_or_else(|| RunnerError::Config("--config is required".into()))?;
        let mut config = ExperimentConfig::load(path)?;
        config.select_datasets(&self.dataset)?;
        config.select_backends(&self.model)?;
        if !self.prompts.is_empty() {
            config.prompts = self.prompts.clone();
        }
        if let Some(r) = self.repeats {
            config.repeats = r;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(c) = self.concurrency {
            config.concurrency = c;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn execute(command: Command, common: &Common) -> Result<ExitCode, RunnerError> {
    let config = common.config()?;
    let options = RunOptions {
        resume: common.resume,
        max_exchanges: common.max_exchanges,
        progress: common.progress,
        sleeper: None,
    };
    let runner = Runner::new(config).with_options(options);
    match command {
        Command::Ingest => {
            for s in runner.ingest()? {
                println!("{}: {} records, {} rejected -> {}", s.dataset, s.records, s.rejected, s.path.display());
            }
        }
        Command::Sample => {
            for m in runner.sample()? {
                let quotas: Vec<String> = m.quotas.iter().map(|(l, n)| format!("{l}={n}")).collect();
                println!(
                    "{}: {} records (seed {}, dropped by crop {}, quotas {})",
                    m.dataset,
                    m.records,
                    m.seed,
                    m.dropped_by_crop,
                    quotas.join(" ")
                );
            }
        }
        Command::DryRun => {
            let dry = runner.dry_run()?;
            for p in &dry.pending {
                println!("{}\t{}\t{}", p.backend, p.dataset, p.exchanges);
            }
            println!("total requests: {}", dry.total);
        }
        Command::Run => {
            let s = runner.run()?;
            println!(
                "issued {} exchanges, skipped {}, {} result rows",
                s.batch.issued, s.batch.skipped, s.rows
            );
            if s.batch.interrupted {
                println!("stopped early; rerun to resume");
            }
            if s.failed_exchanges > 0 {
                eprintln!("error: {} exchanges failed after all retries; ledger preserved", s.failed_exchanges);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Vote => {
            let rows = runner.vote()?;
            println!("{} vote outcomes -> {}", rows.len(), runner.config.votes_path().display());
        }
        Command::Ablate => {
            for e in runner.ablate()? {
                let cells: Vec<String> = e.table.row().iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
                println!("{}\t{}\t{}\t{}", e.backend, e.dataset, e.table.algorithm, cells.join(" "));
            }
        }
        Command::Kappa => {
            for e in runner.kappa()?.entries {
                let k = e.kappa.map_or_else(|| "NA".to_string(), |k| format!("{k:.4}"));
                println!("{}\t{}\t{}\t{k}", e.backend, e.dataset, e.method);
            }
        }
        Command::Report => {
            runner.report()?;
            println!("report written to {}", runner.config.reports_dir().display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command, &cli.common) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
