use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cras_core::cascade_sim::Strategy;
use cras_core::config::ExperimentConfig;
use cras_core::pipeline::{self, FIT_TABLE_HEADER};
use cras_core::{Error, Stage};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DEADLINE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "cras", version, about = "Candidate-set allocation for cascaded ranking")]
struct Cli {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override, e.g. `--set control.kp=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic traffic as JSON lines.
    GenTraffic,
    /// Replay per-user revenue curves and fit log models.
    Fit {
        /// pre, coarse, fine or all
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Run the closed loop over every session.
    Run {
        /// cras or baseline; defaults to the config's strategy
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Cost/revenue comparison against the fixed-quota baseline.
    Compare,
    /// Rank latency-feasible cap triples by revenue.
    GridSearch,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn usage(msg: String) -> Error {
    Error::config("argv", msg)
}

fn run(cli: Cli, out: &mut String) -> Result<u8, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={}", serde_json::to_string(out).expect("path serializes")));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::GenTraffic => {
            let summary = pipeline::cmd_gen_traffic(&cfg)?;
            let _ = writeln!(out, "wrote {}", summary.path.display());
            let _ = writeln!(out, "session,requests");
            for (t, n) in summary.per_session.iter().enumerate() {
                let _ = writeln!(out, "{t},{n}");
            }
        }
        Command::Fit { stage } => {
            let stages: Vec<Stage> = if stage == "all" {
                Stage::ALL.to_vec()
            } else {
                vec![stage.parse().map_err(usage)?]
            };
            let fits = pipeline::cmd_fit(&cfg, &stages)?;
            let _ = writeln!(out, "stage,{FIT_TABLE_HEADER}");
            for f in &fits {
                let _ = writeln!(out, "{},{}", f.stage, f.pooled.csv_row());
            }
        }
        Command::Run { strategy } => {
            let strategy: Strategy = match strategy {
                Some(s) => s.parse().map_err(usage)?,
                None => cfg.strategy,
            };
            let result = pipeline::cmd_run(&cfg, strategy)?;
            let violations = result.deadline_violations();
            let _ = writeln!(
                out,
                "{strategy}: {} sessions, total revenue {:.4}, deadline violations {violations}",
                result.sessions.len(),
                result.total_revenue()
            );
            if violations > 0 {
                eprintln!("error: {violations} requests exceeded the deadline");
                return Ok(EXIT_DEADLINE);
            }
        }
        Command::Compare => {
            let cmp = pipeline::cmd_compare(&cfg)?;
            for level in &cmp.skipped {
                eprintln!("warning: cost level {level} exceeds the stage cap; skipped");
            }
            let _ = writeln!(out, "cost_per_request,revenue_baseline,revenue_cras");
            for r in &cmp.rows {
                let _ = writeln!(out, "{}", r.csv_row());
            }
        }
        Command::GridSearch => {
            let rows = pipeline::cmd_grid_search(&cfg)?;
            let _ = writeln!(out, "D1,D2,D3,revenue,increment_pct,strategy");
            for r in &rows {
                let _ = writeln!(out, "{},{}", r.csv_row(), r.strategy);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let mut out = String::new();
    let result = run(cli, &mut out);
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
