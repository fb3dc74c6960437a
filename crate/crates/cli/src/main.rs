//! `fbsvie`: batch runner for the solver and verification pipelines.
//!
//! Exit status 0 when the run passes, 1 on a solver failure or a failed
//! check, 2 on a configuration or usage error. Every failure prints one line on
//! stderr of the form `fbsvie: <kind>: <message>`.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{Failure, Outcome};
use config::RunConfig;
use report::Timing;

#[derive(Parser)]
#[command(name = "fbsvie", version, about = "Controlled forward-backward stochastic Volterra equations on a binomial tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the controlled forward equation; writes E[X] and Var[X].
    SolveForward(Common),
    /// Solve the state pair (X, Y, Z); writes E[Y] and Var[Y].
    SolveBsvie(Common),
    /// Check the duality identities on seeded random instances.
    CheckDuality(Common),
    /// Compare variational, adjoint and finite-difference derivatives.
    CheckGradient(Common),
    /// Projected gradient descent on the cost.
    Optimize(Common),
}

type Runner = fn(&RunConfig) -> Result<Outcome, Failure>;

impl Command {
    fn parts(&self) -> (&'static str, &Common, Runner) {
        match self {
            Command::SolveForward(c) => ("solve-forward", c, commands::solve_forward),
            Command::SolveBsvie(c) => ("solve-bsvie", c, commands::solve_bsvie),
            Command::CheckDuality(c) => ("check-duality", c, commands::check_duality),
            Command::CheckGradient(c) => ("check-gradient", c, commands::check_gradient),
            Command::Optimize(c) => ("optimize", c, commands::optimize),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let (name, common, command) = cli.command.parts();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    let started = Instant::now();
    let Outcome { mut report, tables } = command(&cfg)?;
    if cfg.output.timing {
        report.timing = Some(Timing {
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    report::write_outputs(&dir, &report, &tables)
        .map_err(|e| Failure::Io(format!("writing to {}: {e}", dir.display())))?;
    if !report.pass {
        let failed = report.failed_checks();
        return Err(Failure::Check(if failed > 0 {
            format!("{name}: {failed} of {} checks failed; see {}", report.checks.len(), dir.display())
        } else {
            format!("{name}: did not converge; see {}", dir.display())
        }));
    }
    let summary = if report.checks.is_empty() {
        format!("{name}: ok; wrote {}", dir.display())
    } else {
        format!("{name}: {} checks pass; wrote {}", report.checks.len(), dir.display())
    };
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // clap's message ends with a usage block after a blank line
            let text = e.to_string();
            let head = text.split("\n\n").next().unwrap_or_default();
            eprintln!("fbsvie: usage error: {}", one_line(head.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let quiet = cli.command.parts().1.quiet;
    match run(&cli) {
        Ok(summary) => {
            if !quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (kind, msg, code) = match f {
                Failure::Config(e) => ("config error", e.to_string(), 2),
                Failure::Solver(e) => ("solver error", e.to_string(), 1),
                Failure::Check(m) => ("check failed", m, 1),
                Failure::Io(m) => ("io error", m, 1),
            };
            eprintln!("fbsvie: {kind}: {}", one_line(&msg));
            ExitCode::from(code)
        }
    }
}
