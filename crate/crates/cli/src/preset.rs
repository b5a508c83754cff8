//! The reference deployment: four cameras, two access points, one cloud.

use edgeflow_core::model::{Burst, RawAccessPoint, RawEdgeDevice, RawNode, RawWired, RawWireless, TopologySpec};
use edgeflow_core::sim::SimConfig;

use crate::config::{Config, Experiment, Mapping, WorkloadSection};
use crate::experiment::Scheme;

pub const ED_CPU_HZ: f64 = 1e9;
pub const AP_CPU_HZ: f64 = 3.6e9;
pub const CC_CPU_HZ: f64 = 3.6e10;
pub const WIRED_BPS: f64 = 8e6;
pub const WIRELESS_HZ: f64 = 5e6;
pub const TX_POWER_DBM: f64 = 20.0;
pub const RHO: f64 = 0.1;
pub const CYCLES_PER_BIT: f64 = 1000.0;
pub const SPECTRAL_EFFICIENCY: f64 = 2.0;

/// Packet sizes of the sweep, spanning every scheme's saturation point.
pub const SWEEP_SIZES: [f64; 12] = [2e5, 4e5, 6e5, 8e5, 1.2e6, 1.6e6, 2.4e6, 3.2e6, 4.4e6, 5.2e6, 6.4e6, 8e6];

/// Base size of the burst run: every scheme is below capacity here.
pub const BURST_BASE_BITS: f64 = 6e5;

/// A small burst that only overwhelms pure edge processing, then a large one.
pub const BURSTS: [Burst; 2] = [Burst { period: 10, multiplier: 2.0 }, Burst { period: 30, multiplier: 5.0 }];

pub fn topology() -> TopologySpec {
    let ap = |id: &str| RawAccessPoint {
        id: id.into(),
        cpu_hz: AP_CPU_HZ,
        wireless: RawWireless { bandwidth_hz: WIRELESS_HZ, spectral_efficiency: None, tx_power_dbm: Some(TX_POWER_DBM) },
        wired: RawWired { capacity_bps: WIRED_BPS },
    };
    let ed = |id: &str, ap: &str| RawEdgeDevice { id: id.into(), cpu_hz: ED_CPU_HZ, ap: ap.into() };
    TopologySpec {
        cc: RawNode { id: "cc".into(), cpu_hz: CC_CPU_HZ },
        aps: vec![ap("ap0"), ap("ap1")],
        eds: vec![ed("ed0", "ap0"), ed("ed1", "ap0"), ed("ed2", "ap1"), ed("ed3", "ap1")],
    }
}

fn base(packet_bits: f64, bursts: Vec<Burst>, experiment: Experiment, periods: u32) -> Config {
    Config {
        topology: topology(),
        workload: WorkloadSection { packet_bits, period_s: 1.0, rate_pps: 1.0, compression_ratio: RHO, bursts },
        mapping: Mapping { cycles_per_bit: CYCLES_PER_BIT, spectral_efficiency: SPECTRAL_EFFICIENCY },
        sim: SimConfig { ticks_per_period: 100, periods, warmup_periods: 5 },
        experiment,
    }
}

pub fn paper_sweep() -> Config {
    let experiment = Experiment::Sweep { sizes: SWEEP_SIZES.to_vec(), schemes: Scheme::ALL.to_vec() };
    base(SWEEP_SIZES[0], Vec::new(), experiment, 40)
}

pub fn paper_burst() -> Config {
    base(BURST_BASE_BITS, BURSTS.to_vec(), Experiment::Burst { schemes: Scheme::ALL.to_vec() }, 60)
}
