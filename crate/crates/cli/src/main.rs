//! Command-line front end of the entropy laboratory.
//!
//! Failures print a single line `error kind=<kind> msg=<message>` to stderr
//! and exit with status 1 (2 for argument errors, reported by clap).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecvgpo_core::harness::config::parse_seeds;
use ecvgpo_core::harness::{self, ExperimentConfig};
use ecvgpo_core::{LabError, Result};

#[derive(Parser)]
#[command(name = "ecvgpo-lab", version, about = "GRPO / ECVGPO entropy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`[train]`, `[env]`, `[experiment]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed of single runs and checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed list for multi-seed experiments: `N..M` or `a,b,c`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (overrides `experiment.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// One training run: telemetry CSV and policy snapshots.
    Train(Common),
    /// Matched reasoning and grounding runs across seeds.
    CompareRewards(Common),
    /// One arm per r0 value across seeds, with an ordering verdict.
    SweepR0(Common),
    /// Entropy-change forecast error at eta and eta / 2.
    VerifyTheorem(Common),
    /// Analytic surrogate gradients against central differences.
    Gradcheck(Common),
    /// SVG charts and a summary from telemetry CSVs.
    Report {
        /// Telemetry CSV files.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = &c.seeds {
        cfg.experiment.seeds = parse_seeds("--seeds", s)?;
    }
    cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.experiment.out.clone())
        .ok_or_else(|| LabError::config("experiment.out", "no output directory; pass --out"))?;
    Ok((cfg, out))
}

fn print_arms(arms: &[harness::experiments::ArmSummary]) {
    for a in arms {
        println!(
            "arm={} initial_entropy={:.6} final_entropy={:.6} se={:.6} eval={:.4} numeric_below_other={}",
            a.label,
            a.initial_mean,
            a.final_mean,
            a.final_se,
            a.final_eval_mean,
            a.numeric_below_other.map_or("n/a".into(), |f| format!("{f:.3}"))
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            let run = harness::run_training(&cfg, &out, c.overwrite)?;
            let h = run.records.last().map_or(run.initial.exact_policy_entropy(), |r| r.entropy_exact);
            println!("steps={} final_entropy={h:.6} out={}", run.records.len(), out.display());
        }
        Command::CompareRewards(c) => {
            let (cfg, out) = load(&c)?;
            let report = harness::run_compare_rewards(&cfg, &out, c.overwrite)?;
            print_arms(&report.arms);
            if let Some(r) = report.entropy_ratio {
                println!("grounding_over_reasoning={r:.4}");
            }
            if let Some(r) = report.reasoning_retention {
                println!("reasoning_final_over_initial={r:.4}");
            }
        }
        Command::SweepR0(c) => {
            let (cfg, out) = load(&c)?;
            let report = harness::run_sweep_r0(&cfg, &out, c.overwrite)?;
            print_arms(&report.arms);
            match report.ordered {
                Some(v) => println!("ordered={v}"),
                None => println!("ordered=n/a"),
            }
        }
        Command::VerifyTheorem(c) => {
            let (cfg, out) = load(&c)?;
            let r = harness::run_verify_theorem(&cfg, &out, c.overwrite)?;
            println!(
                "instances={} eta={} mean_error={:.3e} half_eta_mean_error={:.3e} decay_ratio={:.4}",
                r.instances, r.full.eta, r.full.mean_abs_error, r.half.mean_abs_error, r.decay_ratio
            );
        }
        Command::Gradcheck(c) => {
            let (cfg, out) = load(&c)?;
            let r = harness::run_gradcheck(&cfg, &out, c.overwrite)?;
            for case in &r.cases {
                println!(
                    "case=\"{}\" checked={} skipped={} max_rel_error={:.3e}",
                    case.case.label(),
                    case.checked,
                    case.skipped,
                    case.max_rel_error
                );
            }
            println!("max_rel_error={:.3e}", r.max_rel_error);
        }
        Command::Report { csv, out, overwrite } => {
            let files = harness::emit_report(&csv, &out, overwrite)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
