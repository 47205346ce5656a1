//! Command-line front end: run experiment sweeps, fit convergence rates, and
//! check error bounds on the resulting tables.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use oais::harness::{
    check_bounds, fit_rate, load_table, run_sweep, write_outputs, BoundKind, ExperimentConfig,
    SweepRow,
};

#[derive(Parser)]
#[command(name = "oais", version, about = "Optimised adaptive importance sampling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sweep described by a JSON config file.
    Run {
        /// Path to the experiment config (JSON; unknown keys rejected).
        #[arg(long)]
        config: PathBuf,
        /// Output table path; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// csv writes the table plus a JSON sidecar; json writes one document.
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Worker threads (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Fit a log-log line to two columns of a sweep table.
    Fit {
        #[arg(long)]
        table: PathBuf,
        /// x column: N | t | seeds | mse | bias | mean_rho | mean_ess | theta_bar_norm
        #[arg(long)]
        x: String,
        /// y column, same choices.
        #[arg(long)]
        y: String,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Check a sweep table against a finite-sample bound.
    Check {
        #[arg(long)]
        table: PathBuf,
        /// thm1-mse | thm2-bias | lem3-gd | lem6-avg | lem9-vanilla
        #[arg(long)]
        kind: String,
        /// Config sidecar path (defaults to `<table>.json`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn column(row: &SweepRow, name: &str) -> oais::Result<f64> {
    Ok(match name {
        "N" | "n" => row.n as f64,
        "t" => row.t as f64,
        "seeds" => row.seeds as f64,
        "mse" => row.mse,
        "bias" => row.bias,
        "mean_rho" => row.mean_rho,
        "mean_ess" => row.mean_ess,
        "theta_bar_norm" => row.theta_bar_norm,
        other => {
            return Err(oais::OaisError::InvalidParameter(format!(
                "unknown column {other:?}"
            )))
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> oais::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            format,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&config)?)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let out_path = out
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| {
                    oais::OaisError::InvalidConfig(
                        "no output path: set `output` in the config or pass --out".into(),
                    )
                })?;
            let table = match jobs {
                Some(j) => rayon::ThreadPoolBuilder::new()
                    .num_threads(j)
                    .build()
                    .map_err(|e| oais::OaisError::InvalidConfig(e.to_string()))?
                    .install(|| run_sweep(&cfg)),
                None => run_sweep(&cfg),
            }?;
            match format {
                Format::Csv => {
                    write_outputs(&table, &out_path)?;
                    eprintln!(
                        "wrote {} rows to {} (+ sidecar)",
                        table.rows.len(),
                        out_path.display()
                    );
                }
                Format::Json => {
                    std::fs::write(&out_path, serde_json::to_string_pretty(&table)?)?;
                    eprintln!("wrote {} rows to {}", table.rows.len(), out_path.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Fit { table, x, y, format } => {
            let rows = oais::harness::parse_csv(&std::fs::read_to_string(&table)?)?;
            let xs: Vec<f64> = rows
                .iter()
                .map(|r| column(r, &x))
                .collect::<oais::Result<_>>()?;
            let ys: Vec<f64> = rows
                .iter()
                .map(|r| column(r, &y))
                .collect::<oais::Result<_>>()?;
            let fit = fit_rate(&xs, &ys)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&fit)?),
                Format::Csv => println!(
                    "slope={:.6} intercept={:.6} r2={:.6} points={}",
                    fit.slope, fit.intercept, fit.r2, fit.points
                ),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check {
            table,
            kind,
            config,
            format,
        } => {
            let kind = BoundKind::from_str(&kind)?;
            let table = load_table(&table, config.as_deref())?;
            let report = check_bounds(&table, kind)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Csv => print!("{report}"),
            }
            if report.all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
    }
}
