//! Load generator and latency analysis for the dictation server.
//!
//! [`run_scenario`] drives `concurrency` closed-loop virtual users through
//! either pipeline and reports per-bucket latency percentiles. Latency is
//! measured from a segment's endpoint (end of the frame that finalized it)
//! to delivery of its transcript.

use dictation_server::ServerMode;
use thiserror::Error;

pub mod audio;
pub mod engine;
pub mod report;
pub mod scenario;
pub mod wall;

pub use audio::{generate_user_audio, VirtualUser};
pub use engine::{prepare_sessions, simulate, PreparedSession, RunTrace};
pub use report::{compare_modes, emit_report, CellStats, Format, LatencyReport};
pub use scenario::{ClockMode, ScenarioConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("scenario aborted: {0}")]
    Aborted(String),
}

/// Runs one `(mode, concurrency)` configuration.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<LatencyReport, BenchError> {
    cfg.validate()?;
    match cfg.clock {
        ClockMode::Virtual => {
            let sessions = prepare_sessions(cfg);
            let cells = virtual_cells(cfg, &sessions)?;
            Ok(LatencyReport::new(cfg, cells)?)
        }
        ClockMode::Wall => tokio::runtime::Runtime::new()
            .map_err(|e| BenchError::Aborted(e.to_string()))?
            .block_on(wall::run_wall(cfg)),
    }
}

fn virtual_cells(cfg: &ScenarioConfig, sessions: &[PreparedSession]) -> Result<Vec<CellStats>, BenchError> {
    let trace = simulate(cfg, sessions);
    let emitted: usize = sessions.iter().map(|s| s.segments.len()).sum();
    if trace.records.len() != emitted {
        return Err(BenchError::Aborted(format!(
            "{emitted} segments emitted but {} latencies recorded",
            trace.records.len()
        )));
    }
    Ok(report::cells_from_samples(cfg, &report::trace_samples(&trace))?)
}

/// Runs every `(mode, concurrency)` combination on the same users and merges
/// the cells into one report. Virtual clock only.
pub fn run_matrix(base: &ScenarioConfig, modes: &[ServerMode], concurrency: &[usize]) -> Result<LatencyReport, BenchError> {
    base.validate()?;
    if base.clock != ClockMode::Virtual {
        return Err(BenchError::Aborted("matrix runs need the virtual clock".into()));
    }
    let sessions = prepare_sessions(base);
    let mut cells = Vec::new();
    for &mode in modes {
        for &c in concurrency {
            let cfg = ScenarioConfig {
                mode,
                concurrency: c,
                ..base.clone()
            };
            cfg.validate()?;
            cells.extend(virtual_cells(&cfg, &sessions)?);
        }
    }
    Ok(LatencyReport::new(base, cells)?)
}
