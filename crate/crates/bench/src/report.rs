use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dictation_core::audio::Millis;
use dictation_core::metrics::percentile;
use dictation_server::ServerMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunTrace;
use crate::scenario::{ClockMode, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mode: ServerMode,
    pub concurrency: usize,
    pub bucket_lo_s: f64,
    pub bucket_hi_s: f64,
    pub n: usize,
    pub p50_ms: Millis,
    pub p90_ms: Millis,
    pub max_ms: Millis,
    /// Mean size of the batch each segment rode in.
    pub mean_batch_size: f64,
}

impl CellStats {
    fn key(&self) -> (usize, u64, u64) {
        (self.concurrency, self.bucket_lo_s.to_bits(), self.bucket_hi_s.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub seed: u64,
    pub config_hash: String,
    pub clock: ClockMode,
    pub cells: Vec<CellStats>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cell {mode:?}/C={concurrency}/[{lo}, {hi}] has no samples")]
    EmptyCell {
        mode: ServerMode,
        concurrency: usize,
        lo: f64,
        hi: f64,
    },
    #[error("cell {0} violates p50 <= p90 <= max")]
    Unordered(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a latency report: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// One latency sample: bucket index, latency, size of the batch it rode in.
pub type Sample = (usize, Millis, usize);

/// Builds the cells of one `(mode, concurrency)` run from raw samples.
/// Every configured bucket must have at least one sample.
pub fn cells_from_samples(cfg: &ScenarioConfig, samples: &[Sample]) -> Result<Vec<CellStats>, ReportError> {
    let mut per_bucket: Vec<(Vec<Millis>, usize)> = vec![(Vec::new(), 0); cfg.duration_buckets_s.len()];
    for &(bucket, latency, batch) in samples {
        per_bucket[bucket].0.push(latency);
        per_bucket[bucket].1 += batch;
    }
    let mut cells = Vec::new();
    for (b, (lat, batch_sum)) in per_bucket.into_iter().enumerate() {
        let (lo, hi) = cfg.duration_buckets_s[b];
        if lat.is_empty() {
            return Err(ReportError::EmptyCell {
                mode: cfg.mode,
                concurrency: cfg.concurrency,
                lo,
                hi,
            });
        }
        cells.push(CellStats {
            mode: cfg.mode,
            concurrency: cfg.concurrency,
            bucket_lo_s: lo,
            bucket_hi_s: hi,
            n: lat.len(),
            p50_ms: percentile(&lat, 0.5).expect("non-empty"),
            p90_ms: percentile(&lat, 0.9).expect("non-empty"),
            max_ms: *lat.iter().max().expect("non-empty"),
            mean_batch_size: batch_sum as f64 / lat.len() as f64,
        });
    }
    Ok(cells)
}

pub fn trace_samples(trace: &RunTrace) -> Vec<Sample> {
    trace
        .records
        .iter()
        .map(|r| (r.bucket, r.latency_ms(), r.batch_size))
        .collect()
}

impl LatencyReport {
    pub fn new(cfg: &ScenarioConfig, cells: Vec<CellStats>) -> Result<Self, ReportError> {
        let report = Self {
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            clock: cfg.clock,
            cells,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        for c in &self.cells {
            if c.n == 0 {
                return Err(ReportError::EmptyCell {
                    mode: c.mode,
                    concurrency: c.concurrency,
                    lo: c.bucket_lo_s,
                    hi: c.bucket_hi_s,
                });
            }
            if !(c.p50_ms <= c.p90_ms && c.p90_ms <= c.max_ms) {
                return Err(ReportError::Unordered(format!("{c:?}")));
            }
        }
        Ok(())
    }

    pub fn cell(&self, mode: ServerMode, concurrency: usize, bucket: (f64, f64)) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.concurrency == concurrency && (c.bucket_lo_s, c.bucket_hi_s) == bucket)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let report: Self = serde_json::from_str(&text).map_err(|source| ReportError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        report.validate()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown format {other:?} (expected csv|json|table)")),
        }
    }
}

pub const CSV_HEADER: &str = "mode,concurrency,bucket_lo_s,bucket_hi_s,n,p50_ms,p90_ms,max_ms,mean_batch_size,seed";

fn mode_name(m: ServerMode) -> &'static str {
    match m {
        ServerMode::Multiplexed => "multiplexed",
        ServerMode::Sequential => "sequential",
    }
}

pub fn render(report: &LatencyReport, format: Format) -> String {
    match format {
        Format::Json => report.to_json() + "\n",
        Format::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for c in &report.cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.3},{}",
                    mode_name(c.mode),
                    c.concurrency,
                    c.bucket_lo_s,
                    c.bucket_hi_s,
                    c.n,
                    c.p50_ms,
                    c.p90_ms,
                    c.max_ms,
                    c.mean_batch_size,
                    report.seed
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "seed {}  clock {:?}  config {}\n{:<12} {:>4} {:>11} {:>6} {:>10} {:>10} {:>10} {:>7}\n",
                report.seed,
                report.clock,
                &report.config_hash[..12.min(report.config_hash.len())],
                "mode",
                "C",
                "bucket_s",
                "n",
                "p50_ms",
                "p90_ms",
                "max_ms",
                "batch"
            );
            for c in &report.cells {
                let _ = writeln!(
                    out,
                    "{:<12} {:>4} {:>11} {:>6} {:>10} {:>10} {:>10} {:>7.2}",
                    mode_name(c.mode),
                    c.concurrency,
                    format!("{}-{}", c.bucket_lo_s, c.bucket_hi_s),
                    c.n,
                    c.p50_ms,
                    c.p90_ms,
                    c.max_ms,
                    c.mean_batch_size
                );
            }
            out
        }
    }
}

/// Writes to `out`, or stdout when `None`.
pub fn emit_report(report: &LatencyReport, format: Format, out: Option<&Path>) -> Result<(), ReportError> {
    report.validate()?;
    let text = render(report, format);
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| ReportError::Write {
            path: path.display().to_string(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub concurrency: usize,
    pub bucket_lo_s: f64,
    pub bucket_hi_s: f64,
    pub a_p90_ms: Millis,
    pub b_p90_ms: Millis,
    /// `b - a`.
    pub delta_ms: i64,
    /// `(b - a) / a`.
    pub relative: f64,
}

#[derive(Debug, Error, PartialEq)]
#[error("reports do not cover the same cells; missing from a: {missing_in_a:?}, missing from b: {missing_in_b:?}")]
pub struct CompareError {
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
}

/// Pairs cells by `(concurrency, bucket)` and reports p90 deltas of `b`
/// relative to `a`. Each report must hold one cell per pair.
pub fn compare_modes(a: &LatencyReport, b: &LatencyReport) -> Result<Vec<ComparisonRow>, CompareError> {
    let index = |r: &LatencyReport| -> BTreeMap<(usize, u64, u64), CellStats> {
        r.cells.iter().map(|c| (c.key(), c.clone())).collect()
    };
    let (ia, ib) = (index(a), index(b));
    let describe = |k: &(usize, u64, u64)| {
        format!("C={} [{}, {}]", k.0, f64::from_bits(k.1), f64::from_bits(k.2))
    };
    let missing_in_a: Vec<String> = ib.keys().filter(|k| !ia.contains_key(k)).map(describe).collect();
    let missing_in_b: Vec<String> = ia.keys().filter(|k| !ib.contains_key(k)).map(describe).collect();
    if !missing_in_a.is_empty() || !missing_in_b.is_empty() {
        return Err(CompareError {
            missing_in_a,
            missing_in_b,
        });
    }
    Ok(ia
        .iter()
        .map(|(k, ca)| {
            let cb = &ib[k];
            let delta = cb.p90_ms as i64 - ca.p90_ms as i64;
            ComparisonRow {
                concurrency: ca.concurrency,
                bucket_lo_s: ca.bucket_lo_s,
                bucket_hi_s: ca.bucket_hi_s,
                a_p90_ms: ca.p90_ms,
                b_p90_ms: cb.p90_ms,
                delta_ms: delta,
                relative: if ca.p90_ms == 0 { 0.0 } else { delta as f64 / ca.p90_ms as f64 },
            }
        })
        .collect())
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:>4} {:>11} {:>10} {:>10} {:>10} {:>8}\n",
        "C", "bucket_s", "a_p90_ms", "b_p90_ms", "delta_ms", "rel"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>4} {:>11} {:>10} {:>10} {:>10} {:>7.1}%",
            r.concurrency,
            format!("{}-{}", r.bucket_lo_s, r.bucket_hi_s),
            r.a_p90_ms,
            r.b_p90_ms,
            r.delta_ms,
            r.relative * 100.0
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mode: ServerMode, c: usize, p90: Millis) -> CellStats {
        CellStats {
            mode,
            concurrency: c,
            bucket_lo_s: 105.0,
            bucket_hi_s: 120.0,
            n: 12,
            p50_ms: p90 / 2,
            p90_ms: p90,
            max_ms: p90 + 1,
            mean_batch_size: 2.5,
        }
    }

    fn report(cells: Vec<CellStats>) -> LatencyReport {
        LatencyReport {
            seed: 1,
            config_hash: "ab".repeat(32),
            clock: ClockMode::Virtual,
            cells,
        }
    }

    #[test]
    fn paper_deltas() {
        let seq = report(vec![cell(ServerMode::Sequential, 10, 7_200), cell(ServerMode::Sequential, 20, 13_500)]);
        let mux = report(vec![cell(ServerMode::Multiplexed, 10, 6_200), cell(ServerMode::Multiplexed, 20, 10_000)]);
        let rows = compare_modes(&seq, &mux).unwrap();
        assert_eq!(rows[0].delta_ms, -1_000);
        assert!((rows[0].relative - (-1.0 / 7.2)).abs() < 1e-12);
        assert!((rows[0].relative * 100.0 + 14.0).abs() < 0.2);
        assert!((rows[1].relative * 100.0 + 26.0).abs() < 0.1);
        assert!(render_comparison(&rows).contains("-13.9%"));
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let r = report(vec![cell(ServerMode::Sequential, 5, 900)]);
        let rows = compare_modes(&r, &r).unwrap();
        assert_eq!((rows[0].delta_ms, rows[0].relative), (0, 0.0));
    }

    #[test]
    fn mismatched_cells_are_listed() {
        let a = report(vec![cell(ServerMode::Sequential, 5, 900)]);
        let b = report(vec![cell(ServerMode::Multiplexed, 10, 900)]);
        let err = compare_modes(&a, &b).unwrap_err();
        assert_eq!(err.missing_in_a, vec!["C=10 [105, 120]".to_owned()]);
        assert_eq!(err.missing_in_b, vec!["C=5 [105, 120]".to_owned()]);
    }

    #[test]
    fn one_cell_csv() {
        let csv = render(&report(vec![cell(ServerMode::Multiplexed, 5, 900)]), Format::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec![CSV_HEADER, "multiplexed,5,105,120,12,450,900,901,2.500,1"]);
    }

    #[test]
    fn json_round_trip() {
        let r = report(vec![cell(ServerMode::Multiplexed, 5, 900), cell(ServerMode::Sequential, 5, 1900)]);
        let back: LatencyReport = serde_json::from_str(&render(&r, Format::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn invariants_enforced() {
        let mut c = cell(ServerMode::Multiplexed, 5, 900);
        c.n = 0;
        assert!(matches!(report(vec![c]).validate(), Err(ReportError::EmptyCell { .. })));
        let mut c = cell(ServerMode::Multiplexed, 5, 900);
        c.max_ms = 10;
        assert!(report(vec![c]).validate().is_err());
        let cfg = ScenarioConfig {
            duration_buckets_s: vec![(15.0, 30.0), (30.0, 60.0)],
            ..ScenarioConfig::default()
        };
        assert!(cells_from_samples(&cfg, &[(0, 10, 1)]).is_err());
        let cells = cells_from_samples(&cfg, &[(0, 10, 1), (1, 30, 2), (1, 20, 4)]).unwrap();
        assert_eq!((cells[1].n, cells[1].p50_ms, cells[1].p90_ms, cells[1].mean_batch_size), (2, 20, 30, 3.0));
    }

    #[test]
    fn unwritable_destination_names_path() {
        let r = report(vec![cell(ServerMode::Multiplexed, 5, 900)]);
        let err = emit_report(&r, Format::Csv, Some(Path::new("/nonexistent/dir/out.csv"))).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/out.csv"));
    }
}
