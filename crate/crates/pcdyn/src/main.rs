use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcdyn::commands::{self, Outcome, SlopeCheck};
use pcdyn::config::{ModelKind, Overrides, ScenarioConfig};
use pcdyn::{run, Failure};
use serde::Serialize;

/// Charged-particle dynamics with Darwin and radiation-reaction corrections.
#[derive(Debug, Parser)]
#[command(name = "pcdyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate each model at each ε and write one CSV per run.
    Simulate(RunArgs),
    /// Run several models from the same initial data and compare them
    /// against the first.
    Compare(RunArgs),
    /// Fit how the gap between two models scales with ε.
    ScalingStudy(ScalingArgs),
    /// Check the algebraic identities behind the slow manifold.
    VerifyAlgebra(VerifyArgs),
    /// Recompute the energy columns of a trajectory CSV.
    EnergyAudit(AuditArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(short, long)]
    config: PathBuf,

    /// Override the ε list; repeat for several values.
    #[arg(short, long)]
    epsilon: Vec<f64>,

    /// Override the model list; repeat for several models.
    #[arg(short, long)]
    model: Vec<ModelKind>,

    /// RNG seed for generated scenarios.
    #[arg(short, long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,

    /// Relative step tolerance (the absolute one is 1% of it).
    #[arg(long)]
    tol: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            epsilons: self.epsilon.clone(),
            models: self.model.clone(),
            seed: self.seed,
            out: self.out.clone(),
            tol: self.tol,
        }
    }
}

#[derive(Debug, Args)]
struct ScalingArgs {
    /// Scenario file; not needed with --synthetic.
    #[arg(short, long, required_unless_present = "synthetic")]
    config: Option<PathBuf>,

    #[arg(short, long)]
    epsilon: Vec<f64>,

    #[arg(short, long)]
    model: Vec<ModelKind>,

    #[arg(short, long)]
    seed: Option<u64>,

    #[arg(short, long)]
    out: Option<PathBuf>,

    #[arg(long)]
    tol: Option<f64>,

    /// Skip simulation and fit errors that are exactly ε^POWER.
    #[arg(long, value_name = "POWER")]
    synthetic: Option<f64>,

    /// Fail with exit code 7 unless every fitted slope is this close to SLOPE.
    #[arg(long, value_name = "SLOPE")]
    expect_slope: Option<f64>,

    #[arg(long, default_value_t = 0.1)]
    slope_tol: f64,

    /// Only judge this metric (sup_dr, sup_du, sup_dudot, sup_dh_d).
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(short, long, default_value_t = 0)]
    seed: u64,

    /// Random systems on top of the fixed instances; 0 runs only those.
    #[arg(long, default_value_t = 100)]
    trials: usize,

    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,

    /// Also write verify.json here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// A pcdyn-csv v1 trajectory file.
    file: PathBuf,

    /// Largest accepted gap between stored and recomputed energies.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,

    /// Also fail when the conserved energy drifts more than this.
    #[arg(long)]
    max_drift: Option<f64>,

    /// Also write audit.json here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn load(path: &Path, o: &Overrides) -> Result<pcdyn::Scenario, Failure> {
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.apply(o);
    Ok(cfg.build()?)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("reports serialize"));
}

fn print_runs(runs: &[commands::RunSummary]) {
    for r in runs {
        let file = r.file.as_deref().map(|f| format!(" -> {f}")).unwrap_or_default();
        println!("{} eps={}: {} after {} samples{file}", r.model, r.epsilon, r.termination, r.samples);
        if let Some(m) = &r.message {
            println!("  {m}");
        }
    }
}

fn metric_name(m: &str) -> Result<&'static str, Failure> {
    commands::METRICS.iter().copied().find(|k| *k == m).ok_or_else(|| {
        pcdyn::ConfigError::Invalid { field: "--metric".into(), message: format!("unknown metric `{m}`") }.into()
    })
}

fn dispatch(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Simulate(a) => {
            let sc = load(&a.config, &a.overrides())?;
            let Outcome { report, exit_code } = commands::simulate(&sc, &run::thread_pool()?)?;
            print_runs(&report.runs);
            Ok(exit_code)
        }
        Command::Compare(a) => {
            let sc = load(&a.config, &a.overrides())?;
            let Outcome { report, exit_code } = commands::compare(&sc, &run::thread_pool()?)?;
            print_runs(&report.runs);
            for c in &report.comparisons {
                match (&c.norms, &c.error) {
                    (Some(n), _) => println!(
                        "{} vs {} eps={}: |dr|={:e} |du|={:e} |du'|={:e} |dH_D|={:e}",
                        c.model, c.reference, c.epsilon, n.sup_dr, n.sup_du, n.sup_dudot, n.sup_dh_d
                    ),
                    (None, e) => {
                        println!("{} vs {} eps={}: {}", c.model, c.reference, c.epsilon, e.as_deref().unwrap_or(""))
                    }
                }
            }
            Ok(exit_code)
        }
        Command::ScalingStudy(a) => {
            let check = SlopeCheck {
                expected: a.expect_slope,
                tolerance: a.slope_tol,
                metric: a.metric.as_deref().map(metric_name).transpose()?,
            };
            let Outcome { report, exit_code } = match (a.synthetic, &a.config) {
                (Some(p), _) => {
                    let check = SlopeCheck { metric: None, ..check };
                    commands::scaling_synthetic(&a.epsilon, p, check, a.out.as_deref())?
                }
                (None, Some(path)) => {
                    let o = Overrides {
                        epsilons: a.epsilon.clone(),
                        models: a.model.clone(),
                        seed: a.seed,
                        out: a.out.clone(),
                        tol: a.tol,
                    };
                    commands::scaling_study(&load(path, &o)?, &run::thread_pool()?, check)?
                }
                (None, None) => unreachable!("clap requires --config without --synthetic"),
            };
            for f in &report.fits {
                match f.slope {
                    Some(s) => println!("{}: slope {s:.4} (r² {:.4})", f.metric, f.r_squared.unwrap_or(f64::NAN)),
                    None => println!("{}: {}", f.metric, f.error.as_deref().unwrap_or("no fit")),
                }
            }
            if let Some(p) = report.passed {
                println!(
                    "expected slope {}: {}",
                    report.expected_slope.unwrap_or(f64::NAN),
                    if p { "pass" } else { "FAIL" }
                );
            }
            Ok(exit_code)
        }
        Command::VerifyAlgebra(a) => {
            let Outcome { report, exit_code } = commands::verify_algebra(a.seed, a.trials, a.tol)?;
            commands::save_report(a.out.as_deref(), "verify.json", &report)?;
            for c in &report.checks {
                println!(
                    "[{}] {}: {} cases, max error {:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.cases,
                    c.max_error
                );
            }
            Ok(exit_code)
        }
        Command::EnergyAudit(a) => {
            let Outcome { report, exit_code } = commands::energy_audit(&a.file, a.tol, a.max_drift)?;
            commands::save_report(a.out.as_deref(), "audit.json", &report)?;
            print_json(&report);
            Ok(exit_code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("pcdyn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
