//! CSV files and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError, Experiment};
use crate::experiment::{burst_experiment, knee, sweep, BurstRow, ExperimentError, SchemeBurst, Scheme, SweepRow};

pub const SWEEP_HEADER: [&str; 4] = ["packet_bits", "scheme", "avg_finish_time_s", "stable"];
pub const BURST_HEADER: [&str; 3] = ["period", "scheme", "total_backlog_bits"];

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl RunError {
    /// 1 for anything wrong with the input, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Experiment(ExperimentError::UnstableBase { .. }) => 1,
            _ => 2,
        }
    }
}

/// Shortest decimal that reads back to the same value; never exponent notation.
pub fn num(x: f64) -> String {
    format!("{x}")
}

fn write_csv<R>(path: &Path, header: &[&str], rows: &[R], fields: impl Fn(&R) -> Vec<String>) -> Result<(), RunError> {
    let err = |source| RunError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(fields(r)).map_err(err)?;
    }
    w.flush().map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), RunError> {
    write_csv(path, &SWEEP_HEADER, rows, |r| {
        vec![num(r.packet_bits), r.scheme.name().to_string(), num(r.avg_finish_time_s), r.stable.to_string()]
    })
}

pub fn write_burst_csv(path: &Path, rows: &[BurstRow]) -> Result<(), RunError> {
    write_csv(path, &BURST_HEADER, rows, |r| vec![num(r.period), r.scheme.name().to_string(), num(r.total_backlog_bits)])
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub scheme: Scheme,
    /// Smallest unstable packet size.
    pub knee_bits: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Summary {
    Sweep(Vec<SweepSummary>),
    Burst(Vec<SchemeBurst>),
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub experiment: String,
    pub outputs: Vec<String>,
    pub config: Config,
    pub schemes: Summary,
}

/// Run the configured experiment and write `<name>.csv` and `manifest.json`
/// into `out`.
pub fn run(config: &Config, seed: u64, out: &Path) -> Result<Manifest, RunError> {
    let sc = config.resolve()?;
    std::fs::create_dir_all(out).map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;
    let csv_name = format!("{}.csv", sc.experiment.name());
    let csv_path = out.join(&csv_name);
    let schemes = match &sc.experiment {
        Experiment::Sweep { sizes, schemes } => {
            let rows = sweep(&sc.topology, &sc.workload, sizes, schemes, &sc.sim)?;
            write_sweep_csv(&csv_path, &rows)?;
            let mut uniq = schemes.clone();
            uniq.sort();
            uniq.dedup();
            let knees = uniq
                .iter()
                .map(|&scheme| Ok(SweepSummary { scheme, knee_bits: knee(&sc.topology, &sc.workload, scheme, &sc.sim)? }))
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            Summary::Sweep(knees)
        }
        Experiment::Burst { schemes } => {
            let outcome = burst_experiment(&sc.topology, &sc.workload, schemes, &sc.sim)?;
            write_burst_csv(&csv_path, &outcome.rows)?;
            Summary::Burst(outcome.schemes)
        }
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        experiment: sc.experiment.name().to_string(),
        outputs: vec![csv_name, "manifest.json".to_string()],
        config: config.clone(),
        schemes,
    };
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;
    Ok(manifest)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_stay_plain() {
        assert_eq!(num(200000.0), "200000");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(1e-7), "0.0000001");
        assert_eq!(num(f64::INFINITY), "inf");
    }
}
