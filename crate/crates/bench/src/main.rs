use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dictation_bench::report::{render_comparison, Format};
use dictation_bench::{compare_modes, emit_report, run_matrix, run_scenario, ClockMode, LatencyReport, ScenarioConfig};
use dictation_server::ServerMode;

#[derive(Debug, Parser)]
#[command(version, about = "Dictation server latency benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and emit a latency report.
    Run {
        /// Scenario TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// multiplexed | sequential | both
        #[arg(long)]
        mode: Option<String>,
        /// One level or a comma-separated list, e.g. 5,10,20.
        #[arg(long, value_delimiter = ',')]
        concurrency: Vec<usize>,
        #[arg(long)]
        clock: Option<ClockMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: Format,
    },
    /// Per-cell p90 deltas of B relative to A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "table")]
        format: Format,
    },
}

fn parse_modes(mode: Option<&str>, default: ServerMode) -> anyhow::Result<Vec<ServerMode>> {
    Ok(match mode {
        None => vec![default],
        Some("both") => vec![ServerMode::Sequential, ServerMode::Multiplexed],
        Some(m) => vec![m.parse().map_err(anyhow::Error::msg)?],
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            mode,
            concurrency,
            clock,
            seed,
            out,
            format,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
                    toml::from_str(&text).map_err(|e| anyhow::anyhow!("cannot parse {}: {e}", path.display()))?
                }
                None => ScenarioConfig::default(),
            };
            if let Some(clock) = clock {
                cfg.clock = clock;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let modes = parse_modes(mode.as_deref(), cfg.mode)?;
            let levels = if concurrency.is_empty() { vec![cfg.concurrency] } else { concurrency };
            let report = if modes.len() == 1 && levels.len() == 1 {
                cfg.mode = modes[0];
                cfg.concurrency = levels[0];
                run_scenario(&cfg)?
            } else if cfg.clock == ClockMode::Virtual {
                run_matrix(&cfg, &modes, &levels)?
            } else {
                let mut merged: Option<LatencyReport> = None;
                for &m in &modes {
                    for &c in &levels {
                        let one = run_scenario(&ScenarioConfig {
                            mode: m,
                            concurrency: c,
                            ..cfg.clone()
                        })?;
                        match &mut merged {
                            Some(r) => r.cells.extend(one.cells),
                            None => merged = Some(one),
                        }
                    }
                }
                merged.expect("at least one run")
            };
            emit_report(&report, format, out.as_deref())?;
        }
        Command::Compare { a, b, format } => {
            let rows = compare_modes(&LatencyReport::load(&a)?, &LatencyReport::load(&b)?)?;
            match format {
                Format::Table => print!("{}", render_comparison(&rows)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
                Format::Csv => {
                    println!("concurrency,bucket_lo_s,bucket_hi_s,a_p90_ms,b_p90_ms,delta_ms,relative");
                    for r in rows {
                        println!(
                            "{},{},{},{},{},{},{:.4}",
                            r.concurrency, r.bucket_lo_s, r.bucket_hi_s, r.a_p90_ms, r.b_p90_ms, r.delta_ms, r.relative
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}
