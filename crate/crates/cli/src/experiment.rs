//! The two experiments: finish time against packet size, and backlog under bursts.

use std::fmt;

use edgeflow_core::model::{Burst, Instance, ModelError, OffloadPlan, Topology, Workload};
use edgeflow_core::sim::{metrics, simulate_instance, Recovery, SimConfig, SimError};
use edgeflow_core::tato::{baseline_plan, solve, Baseline, TatoError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Tato,
    PureCloud,
    PureEdge,
    Cloudlet,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Tato, Scheme::PureCloud, Scheme::PureEdge, Scheme::Cloudlet];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Tato => "tato",
            Scheme::PureCloud => "pure_cloud",
            Scheme::PureEdge => "pure_edge",
            Scheme::Cloudlet => "cloudlet",
        }
    }

    pub fn valid_names() -> String {
        Scheme::ALL.map(Scheme::name).join(", ")
    }

    pub fn plan_for(self, inst: &Instance) -> Result<OffloadPlan, TatoError> {
        Ok(match self {
            Scheme::Tato => solve(inst)?.plan,
            Scheme::PureCloud => baseline_plan(Baseline::PureCloud, inst),
            Scheme::PureEdge => baseline_plan(Baseline::PureEdge, inst),
            Scheme::Cloudlet => baseline_plan(Baseline::Cloudlet, inst),
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("burst base is not stable for {scheme}: T_max/period = {ratio}")]
    UnstableBase { scheme: Scheme, ratio: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] TatoError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub packet_bits: f64,
    pub scheme: Scheme,
    pub avg_finish_time_s: f64,
    pub stable: bool,
    /// Bottleneck stage time of the scheme's plan.
    pub t_max_s: f64,
}

/// Plan and simulate one scheme at the given workload.
fn run_cell(topology: &Topology, workload: &Workload, scheme: Scheme, sim: &SimConfig) -> Result<(f64, edgeflow_core::sim::Metrics), ExperimentError> {
    let inst = Instance::new(topology, workload)?;
    let plan = scheme.plan_for(&inst)?;
    let t_max = inst.stage_times(&plan)?.t_max;
    let trace = simulate_instance(&inst, workload, &plan, sim)?;
    Ok((t_max, metrics(&trace, workload)))
}

pub fn sweep(
    topology: &Topology,
    workload: &Workload,
    sizes: &[f64],
    schemes: &[Scheme],
    sim: &SimConfig,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let cells: Vec<(f64, Scheme)> = sizes.iter().flat_map(|&s| schemes.iter().map(move |&k| (s, k))).collect();
    let mut rows = cells
        .par_iter()
        .map(|&(packet_bits, scheme)| {
            let wl = Workload { packet_bits, bursts: Vec::new(), ..workload.clone() };
            let (t_max_s, m) = run_cell(topology, &wl, scheme, sim)?;
            Ok(SweepRow { packet_bits, scheme, avg_finish_time_s: m.avg_finish_time_s, stable: m.stable, t_max_s })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    rows.sort_by(|a, b| a.packet_bits.total_cmp(&b.packet_bits).then(a.scheme.cmp(&b.scheme)));
    rows.dedup_by(|a, b| a.packet_bits == b.packet_bits && a.scheme == b.scheme);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstRow {
    /// Time in periods at the end of the tick.
    pub period: f64,
    pub scheme: Scheme,
    pub total_backlog_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeBurst {
    pub scheme: Scheme,
    pub t_max_over_period: f64,
    pub peak_backlog_bits: f64,
    pub recoveries: Vec<Recovery>,
    /// Smallest single-period multiplier that leaves data over at the end of
    /// the burst period.
    pub destabilizing_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstOutcome {
    pub rows: Vec<BurstRow>,
    pub schemes: Vec<SchemeBurst>,
}

/// Ratio of the scheme's bottleneck time to the period at the base workload.
pub fn load_ratio(topology: &Topology, workload: &Workload, scheme: Scheme) -> Result<f64, ExperimentError> {
    let inst = Instance::new(topology, workload)?;
    Ok(inst.stage_times(&scheme.plan_for(&inst)?)?.t_max / workload.period_s)
}

pub fn burst_experiment(
    topology: &Topology,
    workload: &Workload,
    schemes: &[Scheme],
    sim: &SimConfig,
) -> Result<BurstOutcome, ExperimentError> {
    let mut schemes = schemes.to_vec();
    schemes.sort();
    schemes.dedup();
    for &scheme in &schemes {
        let ratio = load_ratio(topology, workload, scheme)?;
        if ratio >= 1.0 {
            return Err(ExperimentError::UnstableBase { scheme, ratio });
        }
    }
    let probe = workload.bursts.iter().map(|b| b.period).min().unwrap_or(sim.periods / 2).min(sim.periods - 1);
    let per_scheme = schemes
        .par_iter()
        .map(|&scheme| {
            let inst = Instance::new(topology, workload)?;
            let plan = scheme.plan_for(&inst)?;
            let trace = simulate_instance(&inst, workload, &plan, sim)?;
            let m = metrics(&trace, workload);
            let tpp = trace.ticks_per_period as f64;
            let rows: Vec<BurstRow> = trace.total_backlog[..trace.injection_ticks]
                .iter()
                .enumerate()
                .map(|(tick, &b)| BurstRow { period: (tick + 1) as f64 / tpp, scheme, total_backlog_bits: b })
                .collect();
            let summary = SchemeBurst {
                scheme,
                t_max_over_period: inst.stage_times(&plan)?.t_max / workload.period_s,
                peak_backlog_bits: m.peak_backlog_bits,
                recoveries: m.recoveries,
                destabilizing_multiplier: destabilizing_multiplier(topology, workload, scheme, sim, probe)?,
            };
            Ok((rows, summary))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (r, s) in per_scheme {
        rows.extend(r);
        summaries.push(s);
    }
    rows.sort_by(|a, b| a.period.total_cmp(&b.period).then(a.scheme.cmp(&b.scheme)));
    Ok(BurstOutcome { rows, schemes: summaries })
}

const BISECT_REL: f64 = 1e-3;

/// Does a single burst of `multiplier` at `period` leave data in the pipeline
/// when that period ends?
fn carries_over(inst: &Instance, workload: &Workload, plan: &OffloadPlan, sim: &SimConfig, period: u32, multiplier: f64) -> Result<bool, ExperimentError> {
    let wl = Workload { bursts: vec![Burst { period, multiplier }], ..workload.clone() };
    let cfg = SimConfig { periods: period + 2, warmup_periods: 0, ..*sim };
    let trace = simulate_instance(inst, &wl, plan, &cfg)?;
    Ok(trace.period_end_backlog[period as usize] > 1e-6 * trace.nominal_volume)
}

/// Smallest burst multiplier that a scheme cannot absorb within the burst
/// period, found by bisection in the simulator.
pub fn destabilizing_multiplier(
    topology: &Topology,
    workload: &Workload,
    scheme: Scheme,
    sim: &SimConfig,
    period: u32,
) -> Result<f64, ExperimentError> {
    let base = Workload { bursts: Vec::new(), ..workload.clone() };
    let inst = Instance::new(topology, &base)?;
    let plan = scheme.plan_for(&inst)?;
    if carries_over(&inst, &base, &plan, sim, period, 1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while !carries_over(&inst, &base, &plan, sim, period, hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e9 {
            return Ok(f64::INFINITY);
        }
    }
    while hi / lo > 1.0 + BISECT_REL {
        let mid = (lo * hi).sqrt();
        if carries_over(&inst, &base, &plan, sim, period, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest packet size at which the scheme's backlog grows without bound,
/// found by log-bisection in the simulator.
pub fn knee(topology: &Topology, workload: &Workload, scheme: Scheme, sim: &SimConfig) -> Result<f64, ExperimentError> {
    let stable_at = |packet_bits: f64| -> Result<bool, ExperimentError> {
        let wl = Workload { packet_bits, bursts: Vec::new(), ..workload.clone() };
        Ok(run_cell(topology, &wl, scheme, sim)?.1.stable)
    };
    let mut lo = workload.packet_bits;
    while !stable_at(lo)? {
        lo /= 2.0;
        if lo < workload.packet_bits * 1e-9 {
            return Ok(0.0);
        }
    }
    let mut hi = lo * 2.0;
    while stable_at(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > workload.packet_bits * 1e12 {
            return Ok(f64::INFINITY);
        }
    }
    while hi / lo > 1.0 + BISECT_REL {
        let mid = (lo * hi).sqrt();
        if stable_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preset;

    fn paper() -> (Topology, Workload, SimConfig) {
        let sc = preset::paper_sweep().resolve().unwrap();
        (sc.topology, sc.workload, SimConfig { ticks_per_period: 50, periods: 24, warmup_periods: 3 })
    }

    #[test]
    fn names_parse_back() {
        for s in Scheme::ALL {
            let v: Scheme = serde_json::from_str(&format!("\"{}\"", s.name())).unwrap();
            assert_eq!(v, s);
        }
    }

    #[test]
    fn small_size_all_stable_tato_fastest() {
        let (t, w, sim) = paper();
        let rows = sweep(&t, &w, &[2e5], &Scheme::ALL, &sim).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.stable));
        let tato = rows.iter().find(|r| r.scheme == Scheme::Tato).unwrap().avg_finish_time_s;
        assert!(rows.iter().all(|r| tato <= r.avg_finish_time_s + 1e-12));
    }

    #[test]
    fn pure_edge_saturates_first() {
        let (t, w, sim) = paper();
        let rows = sweep(&t, &w, &[1.5e6], &[Scheme::PureEdge, Scheme::Tato], &sim).unwrap();
        assert_eq!(rows[0].scheme, Scheme::Tato);
        assert!(rows[0].stable && !rows[1].stable);
    }

    #[test]
    fn knee_matches_the_analytic_capacity() {
        let (t, w, sim) = paper();
        for (scheme, cap) in [(Scheme::PureEdge, 1e6), (Scheme::Cloudlet, 1.8e6), (Scheme::PureCloud, 4e6)] {
            let k = knee(&t, &w, scheme, &sim).unwrap();
            assert!((k / cap - 1.0).abs() < 5e-3, "{scheme}: {k}");
        }
    }

    #[test]
    fn unstable_base_is_refused() {
        let (t, w, sim) = paper();
        let wl = Workload { packet_bits: 1.2e6, ..w };
        match burst_experiment(&t, &wl, &Scheme::ALL, &sim) {
            Err(ExperimentError::UnstableBase { scheme, ratio }) => {
                assert_eq!(scheme, Scheme::PureEdge);
                assert!((ratio - 1.2).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multiplier_of_one_leaves_the_trace_unchanged() {
        let (t, w, sim) = paper();
        let wl = Workload { packet_bits: 6e5, ..w };
        let plain = burst_experiment(&t, &wl, &[Scheme::Cloudlet], &sim).unwrap();
        let unit = Workload { bursts: vec![Burst { period: 8, multiplier: 1.0 }], ..wl };
        let same = burst_experiment(&t, &unit, &[Scheme::Cloudlet], &sim).unwrap();
        assert_eq!(plain.rows, same.rows);
        let tpp = sim.ticks_per_period as usize;
        let warm = sim.warmup_periods as usize * tpp;
        let settled = &plain.rows[warm..];
        for r in settled.chunks(tpp) {
            assert_eq!(r.iter().map(|x| x.total_backlog_bits).collect::<Vec<_>>(), settled[..tpp].iter().map(|x| x.total_backlog_bits).collect::<Vec<_>>());
        }
    }

    #[test]
    fn destabilizing_multiplier_is_the_slack() {
        let (t, w, sim) = paper();
        let wl = Workload { packet_bits: 6e5, ..w };
        let m = destabilizing_multiplier(&t, &wl, Scheme::PureEdge, &sim, 6).unwrap();
        assert!((m - 1.0 / 0.6).abs() < 0.01, "{m}");
    }
}
