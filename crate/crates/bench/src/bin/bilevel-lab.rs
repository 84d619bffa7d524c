use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_bench::{report, run_experiment, sweep, verify_lower_bounds, BenchError, ExperimentConfig, Overrides};
use clap::{Args, Parser, Subcommand};

/// Bilevel optimization laboratory.
#[derive(Parser)]
#[command(name = "bilevel-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solver configuration.
    Run(RunArgs),
    /// Run the configured grid.
    Sweep(RunArgs),
    /// Run the lower-bound verification battery.
    VerifyLb(RunArgs),
    /// Tabulate every trace under a directory.
    Report {
        /// Directory searched recursively for trace.csv files
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment JSON document
    config: PathBuf,
    /// Output directory; beats BILEVEL_LAB_OUT and the config's output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for spot-check sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps
    #[arg(long)]
    jobs: Option<usize>,
    /// Cost of a Hessian- or Jacobian-vector product in gradient units
    #[arg(long)]
    tau_cost: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, Overrides), BenchError> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let ov = Overrides { out: self.out.clone(), seed: self.seed, jobs: self.jobs, tau_cost: self.tau_cost };
        Ok((cfg, ov))
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "-".into())
}

fn dispatch(cmd: Command) -> Result<(), BenchError> {
    match cmd {
        Command::Run(a) => {
            let (cfg, ov) = a.load()?;
            let (r, out) = run_experiment(&cfg, &ov)?;
            let last = r.trace.last();
            println!(
                "{}: {} records, final gap {}, complexity {}, N = {}, M = {}, L_phi = {:.4}",
                r.trace.algorithm,
                r.trace.records.len(),
                fmt(last.phi_gap),
                last.counters.complexity(),
                r.resolved.n,
                r.resolved.m,
                r.resolved.l_phi
            );
            println!("artifacts in {}", out.display());
        }
        Command::Sweep(a) => {
            let (cfg, ov) = a.load()?;
            let (meta, out) = sweep(&cfg, &ov)?;
            println!("{:>12} {:>16} {:>12}", "value", "complexity", "final_gap");
            for p in &meta.points {
                match &p.error {
                    Some(e) => println!("{:>12.4e} failed: {e}", p.axis_value),
                    None => println!("{:>12.4e} {:>16} {:>12}", p.axis_value, fmt(p.complexity_to_eps), fmt(p.final_gap)),
                }
            }
            if let Some(f) = meta.loglog_fit {
                println!("log-log slope {:.4}", f.slope);
            }
            println!("artifacts in {}", out.display());
        }
        Command::VerifyLb(a) => {
            let (cfg, ov) = a.load()?;
            let result = verify_lower_bounds(&cfg, &ov);
            if let Ok((report, out)) = &result {
                for item in &report.items {
                    println!("{:<40} {}", item.label, if item.report.pass { "pass" } else { "FAIL" });
                }
                println!("report in {}", out.join("lower_bound_report.json").display());
            }
            result?;
        }
        Command::Report { dir } => {
            let rows = report(&dir)?;
            println!("{:<40} {:>6} {:>20} {:>12} {:>12} {:>14}", "trace", "rows", "status", "final_gap", "grad_norm", "complexity");
            for r in rows {
                println!(
                    "{:<40} {:>6} {:>20} {:>12} {:>12} {:>14}",
                    r.trace.display().to_string(),
                    r.rows,
                    r.status,
                    fmt(r.final_gap),
                    fmt(r.final_grad_norm),
                    r.complexity
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
