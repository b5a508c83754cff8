use std::path::{Path, PathBuf};

use edgeflow_core::model::{build_topology, Burst, Topology, TopologyError, TopologySpec, Workload, WorkloadError};
use edgeflow_core::sim::{SimConfig, SimError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::Scheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub topology: TopologySpec,
    pub workload: WorkloadSection,
    pub mapping: Mapping,
    pub sim: SimConfig,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub packet_bits: f64,
    pub period_s: f64,
    /// Packets per period per ED.
    pub rate_pps: f64,
    pub compression_ratio: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapping {
    pub cycles_per_bit: f64,
    /// Used for every AP that does not state its own.
    pub spectral_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Average finish time per packet size and scheme.
    Sweep { sizes: Vec<f64>, schemes: Vec<Scheme> },
    /// Backlog over time with `workload.bursts` at `workload.packet_bits`.
    Burst { schemes: Vec<Scheme> },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Sweep { .. } => "sweep",
            Experiment::Burst { .. } => "burst",
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}, field `{field}`: {message}")]
    Schema { path: String, line: usize, column: usize, field: String, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("mapping: {0}")]
    Mapping(String),
    #[error("experiment: {0}")]
    Experiment(String),
}

/// A validated configuration, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub workload: Workload,
    pub sim: SimConfig,
    pub experiment: Experiment,
}

impl Config {
    /// Parse JSON text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Config, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            ConfigError::Schema {
                path: origin.to_string(),
                line: inner.line(),
                column: inner.column(),
                field,
                message: strip_position(&inner.to_string()),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Check every section and build the model objects.
    pub fn resolve(&self) -> Result<Scenario, ConfigError> {
        let m = self.mapping;
        if !(m.cycles_per_bit.is_finite() && m.cycles_per_bit > 0.0) {
            return Err(ConfigError::Mapping(format!("cycles_per_bit must be positive, got {}", m.cycles_per_bit)));
        }
        if !(m.spectral_efficiency.is_finite() && m.spectral_efficiency > 0.0) {
            return Err(ConfigError::Mapping(format!(
                "spectral_efficiency must be positive, got {}",
                m.spectral_efficiency
            )));
        }
        let topology = build_topology(&self.topology, m.spectral_efficiency)?;
        let w = &self.workload;
        let workload = Workload {
            bursts: w.bursts.clone(),
            rate_pps: w.rate_pps,
            ..Workload::new(w.packet_bits, w.period_s, w.compression_ratio, m.cycles_per_bit)
        };
        workload.validate()?;
        self.sim.validate()?;
        match &self.experiment {
            Experiment::Sweep { sizes, schemes } => {
                if let Some(bad) = sizes.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return Err(ConfigError::Experiment(format!("sweep sizes must be positive, got {bad}")));
                }
                if schemes.is_empty() {
                    return Err(ConfigError::Experiment(format!("no schemes given; valid: {}", Scheme::valid_names())));
                }
            }
            Experiment::Burst { schemes } => {
                if schemes.is_empty() {
                    return Err(ConfigError::Experiment(format!("no schemes given; valid: {}", Scheme::valid_names())));
                }
            }
        }
        Ok(Scenario { topology, workload, sim: self.sim, experiment: self.experiment.clone() })
    }
}

/// serde_json appends " at line L column C"; the position is reported separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preset;

    #[test]
    fn preset_round_trips() {
        let cfg = preset::paper_sweep();
        let back = Config::parse(&cfg.to_json(), "preset").unwrap();
        assert_eq!(back, cfg);
        let sc = back.resolve().unwrap();
        assert_eq!(sc.topology.eds().len(), 4);
        assert_eq!(sc.topology.aps()[0].wireless.rate_bps(), 1e7);
    }

    #[test]
    fn unknown_field_is_located() {
        let mut v: serde_json::Value = serde_json::from_str(&preset::paper_sweep().to_json()).unwrap();
        v["workload"]["packet_size"] = 3.into();
        let text = serde_json::to_string_pretty(&v).unwrap();
        let err = Config::parse(&text, "x.json").unwrap_err();
        let ConfigError::Schema { field, line, message, .. } = &err else { panic!("{err}") };
        assert_eq!(field, "workload.packet_size");
        assert!(*line > 1);
        assert!(message.contains("packet_size"));
    }

    #[test]
    fn unknown_scheme_lists_valid_ones() {
        let text = preset::paper_sweep().to_json().replace("\"pure_edge\"", "\"fog\"");
        let err = Config::parse(&text, "x.json").unwrap_err().to_string();
        assert!(err.contains("fog"));
        for s in ["tato", "pure_cloud", "pure_edge", "cloudlet"] {
            assert!(err.contains(s), "{err}");
        }
    }

    #[test]
    fn compression_above_one_rejected() {
        let mut cfg = preset::paper_sweep();
        cfg.workload.compression_ratio = 1.5;
        let err = cfg.resolve().unwrap_err().to_string();
        assert!(err.contains("compress"), "{err}");
    }

    #[test]
    fn wireless_efficiency_override() {
        let mut cfg = preset::paper_sweep();
        cfg.topology.aps[1].wireless.spectral_efficiency = Some(4.0);
        let sc = cfg.resolve().unwrap();
        assert_eq!(sc.topology.aps()[1].wireless.rate_bps(), 2e7);
    }
}
