//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{ExperimentConfig, ReportFormat};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "starfm", version, about = "Shift-robust calibration experiments on synthetic data")]
pub struct Cli {
    /// Worker threads for training sweeps and data generation.
    #[arg(long, global = true, env = "STARFM_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output formats; repeat for several. Replaces `report_formats`.
    #[arg(long, value_enum)]
    pub format: Vec<ReportFormat>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its checksum manifest.
    Gen(RunArgs),
    /// Train one model and write its report and checkpoint.
    Train(RunArgs),
    /// Train once per (λ1, λ2) grid point and write a summary table.
    Sweep(RunArgs),
    /// Emit reliability-diagram bins and a bounds summary for a trained run.
    Report {
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the oracle-equivalence and gradient-check suites.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per oracle comparison.
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
}

fn load(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if !args.format.is_empty() {
        let mut f = args.format.clone();
        f.sort();
        f.dedup();
        cfg.report_formats = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Gen(a) => {
            let cfg = load(&a)?;
            let m = commands::gen(&cfg)?;
            println!("wrote {} files to {}", m.files.len(), cfg.data_dir().display());
        }
        Command::Train(a) => {
            let cfg = load(&a)?;
            let f = commands::train(&cfg)?;
            println!(
                "target quality {:.4}, target ECE {:.4}, DGG {:.4}; report in {}",
                f.run.target_quality(),
                f.run.target_ece(),
                f.run.domain.dgg,
                cfg.output_dir.join(commands::REPORT).display()
            );
        }
        Command::Sweep(a) => {
            let cfg = load(&a)?;
            let rows = commands::sweep(&cfg)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} grid points, {failed} failed; results in {}", rows.len(), cfg.output_dir.display());
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output_dir,
                (None, None) => return Err(CliError::Usage("report needs --out or --config".into())),
            };
            let (bins, bounds) = commands::report(&dir)?;
            println!("{} bin rows, {} bound rows in {}", bins.len(), bounds.len(), dir.display());
        }
        Command::Check { seed, instances } => {
            if instances == 0 {
                return Err(CliError::Usage("--instances must be at least 1".into()));
            }
            let lines = commands::check(instances, seed)?;
            for l in &lines {
                println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            let failed = lines.iter().filter(|l| !l.passed).count();
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
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
