use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmsckf_core::harness::{export_all, Comparison, RunSummary};
use cmsckf_core::{compare_backends, run, Backend, Result, RunConfig, Scenario};

#[derive(Parser)]
#[command(name = "cmsckf", version, about = "Run and compare MSCKF back-ends on simulated scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one back-end and export its report.
    Run(RunArgs),
    /// Run every back-end on the same scenario and tabulate the results.
    Compare(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override the keyframe interval, s.
    #[arg(long)]
    keyframe_interval: Option<f64>,
    /// Override the local region radius, m.
    #[arg(long)]
    r_local: Option<f64>,
    /// Override the re-centering radius, m.
    #[arg(long)]
    r_recenter: Option<f64>,
    /// Override the clone window size.
    #[arg(long)]
    n_clones: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// full, schmidt or compressed.
    #[arg(long)]
    mode: String,
    /// Drive a dense twin on the same linearizations and report divergence.
    #[arg(long)]
    lockstep: bool,
    #[command(flatten)]
    common: CommonArgs,
}

impl CommonArgs {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = Scenario::load(&self.scenario)?;
        let f = &mut s.filter;
        if let Some(v) = self.keyframe_interval {
            f.keyframe_interval = v;
        }
        if let Some(v) = self.r_local {
            f.r_local = v;
        }
        if let Some(v) = self.r_recenter {
            f.r_recenter = Some(v);
        }
        if let Some(v) = self.n_clones {
            f.n_clones = v;
        }
        s.validate()?;
        Ok(s)
    }

    fn config(&self, mode: Backend) -> Result<RunConfig> {
        Ok(RunConfig::new(mode, self.scenario()?).with_seed(self.seed))
    }
}

fn print_summary(s: &RunSummary) {
    println!(
        "{:<10} rmse {:.4} m / {:.5} rad  nees {:.3}  keyframes {}  recenters {}  recoveries {}  peak dim {}",
        s.mode, s.rmse_position, s.rmse_attitude, s.mean_nees, s.keyframes, s.recenters, s.recoveries, s.peak_state_dim
    );
    if let Some(l) = &s.lockstep {
        println!(
            "{:<10} lockstep: mean {:.3e}  cov {:.3e}  conservative violations {}",
            "", l.max_mean_divergence, l.max_cov_divergence, l.conservative_violations
        );
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mode: Backend = args.mode.parse()?;
    let cfg = args.common.config(mode)?.with_lockstep(args.lockstep).with_out_dir(&args.common.out);
    let report = run(&cfg)?;
    print_summary(&report.summary);
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<()> {
    let configs = Backend::ALL.iter().map(|&m| args.config(m)).collect::<Result<Vec<_>>>()?;
    let cmp = compare_backends(&configs)?;
    for report in &cmp.reports {
        export_all(report, &args.out.join(report.mode.as_str()))?;
        print_summary(&report.summary);
    }
    write_compare(&cmp, &args.out)
}

fn write_compare(cmp: &Comparison, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cmp.write_csv(&out.join("compare.csv"))?;
    if let Some(d) = cmp.envelope_dominance(Backend::Schmidt, Backend::Full, 1e-9) {
        println!("schmidt position 3σ ≥ full at {:.1}% of steps", 100.0 * d);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
