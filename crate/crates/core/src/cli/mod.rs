//! Command-line front end: `synth`, `run`, `check` and `report`.

pub mod check;
pub mod config;
pub mod report;
pub mod run;
pub mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use check::{cmd_check, CheckOptions, CheckReport};
pub use config::{reference_experiment, ArmConfig, CohortSource, CsvSource, RunConfig};
pub use report::{cmd_report, render_report, ReportTable};
pub use run::{cmd_run, effective_jobs, fold_seed, load_dataset, RunOutput, DETERMINISTIC_ENV};
pub use synth::{cmd_synth, SynthOutput};

use crate::baselines::ArmKind;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "autoselect", version, about = "Learned auxiliary-task selection for clinical time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort as events/labels CSVs plus its manifest.
    Synth(Common),
    /// Train and evaluate the configured arms.
    Run(Common),
    /// Run the gradient and hyper-gradient oracle suites.
    Check(CheckArgs),
    /// Summarize the metrics of a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to these arms (repeatable).
    #[arg(long = "arm")]
    pub arms: Vec<ArmKind>,
    /// Restrict to these labelled-data fractions (repeatable).
    #[arg(long = "fraction")]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Seeds for the primitive gradient suite.
    #[arg(long, default_value_t = 100)]
    pub grad_seeds: usize,
    /// Corrupts one exact hyper-gradient, to exercise failure reporting.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
}

impl Common {
    /// The configuration file (or the defaults) with the command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if !self.arms.is_empty() {
            let mut arms = Vec::new();
            for &kind in &self.arms {
                let existing = cfg.arms.iter().find(|a| a.kind == kind).cloned();
                arms.push(existing.unwrap_or_else(|| ArmConfig::new(kind)));
            }
            cfg.arms = arms;
        }
        if !self.fractions.is_empty() {
            cfg.fractions = self.fractions.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        cfg.out
            .clone()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out` in the config".into()))
    }
}

/// Runs one parsed command, printing its summary to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            let out = cmd_synth(&cfg, &c.out_dir(&cfg)?)?;
            println!("wrote {} patients, {} events to {}", out.n_patients, out.n_events, out.dir.display());
        }
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let out = cmd_run(&cfg, &c.out_dir(&cfg)?)?;
            print!("{}", render_report(&ReportTable::from_rows(&out.rows)).0);
        }
        Command::Check(c) => {
            let cfg = c.common.resolve()?;
            let opts = CheckOptions {
                seed: cfg.seed,
                grad_seeds: c.grad_seeds,
                inject_fault: c.inject_fault,
            };
            let report = cmd_check(&opts)?;
            print!("{}", report.table());
            report.into_result()?;
        }
        Command::Report(c) => {
            let dir = match &c.common.out {
                Some(d) => d.clone(),
                None => c.common.resolve().and_then(|cfg| c.common.out_dir(&cfg))?,
            };
            let (text, _) = cmd_report(&dir)?;
            print!("{text}");
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
