//! Domain types for the three-layer network and the closed-form stage-time
//! model of the five-stage processing pipeline.
//!
//! Units are fixed throughout the crate: volumes in bits, times in seconds,
//! rates in bits per second. A rate of zero means the device or link cannot
//! serve anything; dividing zero work by a zero rate yields zero, any positive
//! work over a zero rate yields `+inf`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that shares and fractions form a simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Ed,
    Ap,
    Cc,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Ed => "ED",
            Layer::Ap => "AP",
            Layer::Cc => "CC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub layer: Layer,
    pub cpu_hz: f64,
    /// The AP for an ED, the CC for an AP, nothing for the CC.
    pub parent: Option<String>,
}

impl DeviceSpec {
    pub fn ed(id: impl Into<String>, cpu_hz: f64, ap: impl Into<String>) -> Self {
        DeviceSpec { id: id.into(), layer: Layer::Ed, cpu_hz, parent: Some(ap.into()) }
    }

    pub fn ap(id: impl Into<String>, cpu_hz: f64, cc: impl Into<String>) -> Self {
        DeviceSpec { id: id.into(), layer: Layer::Ap, cpu_hz, parent: Some(cc.into()) }
    }

    pub fn cc(id: impl Into<String>, cpu_hz: f64) -> Self {
        DeviceSpec { id: id.into(), layer: Layer::Cc, cpu_hz, parent: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkSpec {
    /// ED→AP radio shared by every ED attached to the AP.
    WirelessShared {
        bandwidth_hz: f64,
        spectral_efficiency: f64,
        /// Recorded for completeness; the rate model does not use it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tx_power_dbm: Option<f64>,
    },
    /// AP→CC backhaul owned by a single AP.
    WiredDedicated { capacity_bps: f64 },
}

impl LinkSpec {
    pub fn wireless(bandwidth_hz: f64, spectral_efficiency: f64) -> Self {
        LinkSpec::WirelessShared { bandwidth_hz, spectral_efficiency, tx_power_dbm: None }
    }

    pub fn wired(capacity_bps: f64) -> Self {
        LinkSpec::WiredDedicated { capacity_bps }
    }

    /// Aggregate bit rate of the link.
    pub fn rate_bps(&self) -> f64 {
        match *self {
            LinkSpec::WirelessShared { bandwidth_hz, spectral_efficiency, .. } => {
                bandwidth_hz * spectral_efficiency
            }
            LinkSpec::WiredDedicated { capacity_bps } => capacity_bps,
        }
    }

    fn problems(&self, owner: &str, expect_wireless: bool, out: &mut Vec<TopologyProblem>) {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            LinkSpec::WirelessShared { bandwidth_hz, spectral_efficiency, .. } => {
                if !expect_wireless {
                    out.push(TopologyProblem::WrongLinkKind { ap: owner.to_string(), expected: "wired_dedicated" });
                }
                if !positive(bandwidth_hz) {
                    out.push(TopologyProblem::NonPositiveCapacity {
                        owner: owner.to_string(),
                        field: "bandwidth_hz",
                        value: bandwidth_hz,
                    });
                }
                if !positive(spectral_efficiency) {
                    out.push(TopologyProblem::NonPositiveCapacity {
                        owner: owner.to_string(),
                        field: "spectral_efficiency",
                        value: spectral_efficiency,
                    });
                }
            }
            LinkSpec::WiredDedicated { capacity_bps } => {
                if expect_wireless {
                    out.push(TopologyProblem::WrongLinkKind { ap: owner.to_string(), expected: "wireless_shared" });
                }
                if !positive(capacity_bps) {
                    out.push(TopologyProblem::NonPositiveCapacity {
                        owner: owner.to_string(),
                        field: "capacity_bps",
                        value: capacity_bps,
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub device: DeviceSpec,
    pub wireless: LinkSpec,
    pub wired: LinkSpec,
}

/// Raw, unvalidated description of a topology as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub cc: RawNode,
    pub aps: Vec<RawAccessPoint>,
    pub eds: Vec<RawEdgeDevice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNode {
    pub id: String,
    pub cpu_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAccessPoint {
    pub id: String,
    pub cpu_hz: f64,
    pub wireless: RawWireless,
    pub wired: RawWired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawWireless {
    pub bandwidth_hz: f64,
    /// Falls back to the default passed to [`build_topology`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_power_dbm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawWired {
    pub capacity_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEdgeDevice {
    pub id: String,
    pub cpu_hz: f64,
    pub ap: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyProblem {
    #[error("duplicate device id `{0}`")]
    DuplicateId(String),
    #[error("ED `{ed}` references unknown AP `{ap}`")]
    OrphanEd { ed: String, ap: String },
    #[error("ED `{0}` has no AP")]
    MissingParent(String),
    #[error("AP `{ap}` must hang off CC `{cc}`")]
    ApParent { ap: String, cc: String },
    #[error("CC `{0}` must not have a parent")]
    CcParent(String),
    #[error("device `{id}` is declared as {found} but used as {expected}")]
    WrongLayer { id: String, expected: Layer, found: Layer },
    #[error("device `{id}` has invalid cpu_hz {value} (must be finite and >= 0)")]
    InvalidCpu { id: String, value: f64 },
    #[error("`{owner}`: {field} must be positive and finite, got {value}")]
    NonPositiveCapacity { owner: String, field: &'static str, value: f64 },
    #[error("AP `{ap}`: link must be {expected}")]
    WrongLinkKind { ap: String, expected: &'static str },
    #[error("topology needs at least one ED")]
    NoEds,
    #[error("topology needs at least one AP")]
    NoAps,
}

/// Every invariant violated by a topology description.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid topology: {}", list(.problems))]
pub struct TopologyError {
    pub problems: Vec<TopologyProblem>,
}

fn list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Validated three-layer tree. EDs and APs are kept sorted by id so that
/// device indices follow id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    eds: Vec<DeviceSpec>,
    aps: Vec<AccessPoint>,
    cc: DeviceSpec,
    #[serde(skip)]
    ed_ap: Vec<usize>,
}

impl Topology {
    pub fn new(mut eds: Vec<DeviceSpec>, mut aps: Vec<AccessPoint>, cc: DeviceSpec) -> Result<Self, TopologyError> {
        let mut problems = Vec::new();
        if eds.is_empty() {
            problems.push(TopologyProblem::NoEds);
        }
        if aps.is_empty() {
            problems.push(TopologyProblem::NoAps);
        }
        Self::check_common(&eds, &aps, &cc, &mut problems);
        if !problems.is_empty() {
            return Err(TopologyError { problems });
        }
        eds.sort_by(|a, b| a.id.cmp(&b.id));
        aps.sort_by(|a, b| a.device.id.cmp(&b.device.id));
        let ed_ap = eds
            .iter()
            .map(|e| {
                let parent = e.parent.as_deref().unwrap_or_default();
                aps.iter().position(|a| a.device.id == parent).expect("checked above")
            })
            .collect();
        Ok(Topology { eds, aps, cc, ed_ap })
    }

    /// A CC with no APs or EDs. Only the coordination protocol accepts this
    /// degenerate shape; every ED-indexed quantity is empty.
    pub fn cloud_only(cc: DeviceSpec) -> Result<Self, TopologyError> {
        let mut problems = Vec::new();
        Self::check_common(&[], &[], &cc, &mut problems);
        if !problems.is_empty() {
            return Err(TopologyError { problems });
        }
        Ok(Topology { eds: Vec::new(), aps: Vec::new(), cc, ed_ap: Vec::new() })
    }

    fn check_common(eds: &[DeviceSpec], aps: &[AccessPoint], cc: &DeviceSpec, problems: &mut Vec<TopologyProblem>) {
        let mut seen = BTreeSet::new();
        let mut dup = BTreeSet::new();
        for id in std::iter::once(&cc.id).chain(aps.iter().map(|a| &a.device.id)).chain(eds.iter().map(|e| &e.id)) {
            if !seen.insert(id.clone()) && dup.insert(id.clone()) {
                problems.push(TopologyProblem::DuplicateId(id.clone()));
            }
        }
        let mut check_device = |d: &DeviceSpec, expected: Layer| {
            if d.layer != expected {
                problems.push(TopologyProblem::WrongLayer { id: d.id.clone(), expected, found: d.layer });
            }
            if !(d.cpu_hz.is_finite() && d.cpu_hz >= 0.0) {
                problems.push(TopologyProblem::InvalidCpu { id: d.id.clone(), value: d.cpu_hz });
            }
        };
        check_device(cc, Layer::Cc);
        for ap in aps {
            check_device(&ap.device, Layer::Ap);
        }
        for ed in eds {
            check_device(ed, Layer::Ed);
        }
        if cc.parent.is_some() {
            problems.push(TopologyProblem::CcParent(cc.id.clone()));
        }
        for ap in aps {
            if ap.device.parent.as_deref() != Some(cc.id.as_str()) {
                problems.push(TopologyProblem::ApParent { ap: ap.device.id.clone(), cc: cc.id.clone() });
            }
            ap.wireless.problems(&ap.device.id, true, problems);
            ap.wired.problems(&ap.device.id, false, problems);
        }
        for ed in eds {
            match ed.parent.as_deref() {
                None => problems.push(TopologyProblem::MissingParent(ed.id.clone())),
                Some(p) if !aps.iter().any(|a| a.device.id == p) => {
                    problems.push(TopologyProblem::OrphanEd { ed: ed.id.clone(), ap: p.to_string() })
                }
                Some(_) => {}
            }
        }
    }

    pub fn eds(&self) -> &[DeviceSpec] {
        &self.eds
    }

    pub fn aps(&self) -> &[AccessPoint] {
        &self.aps
    }

    pub fn cc(&self) -> &DeviceSpec {
        &self.cc
    }

    /// Index of the AP serving ED `ed`.
    pub fn ap_of(&self, ed: usize) -> usize {
        self.ed_ap[ed]
    }

    pub fn ed_ap(&self) -> &[usize] {
        &self.ed_ap
    }

    /// Indices of the EDs attached to AP `ap`, in id order.
    pub fn eds_of(&self, ap: usize) -> impl Iterator<Item = usize> + '_ {
        self.ed_ap.iter().enumerate().filter(move |(_, &m)| m == ap).map(|(e, _)| e)
    }

    pub fn ed_index(&self, id: &str) -> Option<usize> {
        self.eds.iter().position(|e| e.id == id)
    }

    pub fn ap_index(&self, id: &str) -> Option<usize> {
        self.aps.iter().position(|a| a.device.id == id)
    }

    pub fn node_count(&self) -> usize {
        1 + self.aps.len() + self.eds.len()
    }

    /// Copy of the topology with one device's CPU frequency replaced.
    pub fn with_cpu(&self, id: &str, cpu_hz: f64) -> Option<Topology> {
        let mut t = self.clone();
        if t.cc.id == id {
            t.cc.cpu_hz = cpu_hz;
        } else if let Some(i) = t.ap_index(id) {
            t.aps[i].device.cpu_hz = cpu_hz;
        } else if let Some(i) = t.ed_index(id) {
            t.eds[i].cpu_hz = cpu_hz;
        } else {
            return None;
        }
        Some(t)
    }

    /// Copy of the topology with AP `id`'s link rates replaced. The wireless
    /// rate is re-expressed through the bandwidth at the existing efficiency.
    pub fn with_ap_links(&self, id: &str, wireless_bps: Option<f64>, wired_bps: Option<f64>) -> Option<Topology> {
        let mut t = self.clone();
        let ap = &mut t.aps[self.ap_index(id)?];
        if let Some(rate) = wireless_bps {
            if let LinkSpec::WirelessShared { bandwidth_hz, spectral_efficiency, .. } = &mut ap.wireless {
                *bandwidth_hz = rate / *spectral_efficiency;
            }
        }
        if let Some(rate) = wired_bps {
            ap.wired = LinkSpec::wired(rate);
        }
        Some(t)
    }
}

/// Validate a raw description into a [`Topology`], reporting every problem.
/// APs without their own spectral efficiency use `spectral_efficiency`.
pub fn build_topology(raw: &TopologySpec, spectral_efficiency: f64) -> Result<Topology, TopologyError> {
    let cc = DeviceSpec::cc(raw.cc.id.clone(), raw.cc.cpu_hz);
    let aps = raw
        .aps
        .iter()
        .map(|a| AccessPoint {
            device: DeviceSpec::ap(a.id.clone(), a.cpu_hz, raw.cc.id.clone()),
            wireless: LinkSpec::WirelessShared {
                bandwidth_hz: a.wireless.bandwidth_hz,
                spectral_efficiency: a.wireless.spectral_efficiency.unwrap_or(spectral_efficiency),
                tx_power_dbm: a.wireless.tx_power_dbm,
            },
            wired: LinkSpec::wired(a.wired.capacity_bps),
        })
        .collect();
    let eds = raw.eds.iter().map(|e| DeviceSpec::ed(e.id.clone(), e.cpu_hz, e.ap.clone())).collect();
    Topology::new(eds, aps, cc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub period: u32,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub packet_bits: f64,
    pub period_s: f64,
    /// Packets generated per period by each ED.
    pub rate_pps: f64,
    pub compression_ratio: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    /// CPU cycles needed per processed bit; maps `cpu_hz` to bits/s.
    pub cycles_per_bit: f64,
    /// Per-ED volume per period, overriding `packet_bits * rate_pps`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub volume_overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadProblem {
    #[error("packet_bits must be positive and finite, got {0}")]
    PacketBits(f64),
    #[error("period_s must be positive and finite, got {0}")]
    Period(f64),
    #[error("rate_pps must be positive and finite, got {0}")]
    Rate(f64),
    #[error("compression_ratio must lie in (0, 1]: processing has to compress its input, got {0}")]
    Compression(f64),
    #[error("cycles_per_bit must be positive and finite, got {0}")]
    CyclesPerBit(f64),
    #[error("burst at period {period}: multiplier must be finite and >= 1, got {multiplier}")]
    BurstMultiplier { period: u32, multiplier: f64 },
    #[error("volume override for `{id}` must be finite and >= 0, got {value}")]
    Override { id: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid workload: {}", list(.problems))]
pub struct WorkloadError {
    pub problems: Vec<WorkloadProblem>,
}

impl Workload {
    /// One packet per period, no bursts, no per-ED overrides.
    pub fn new(packet_bits: f64, period_s: f64, compression_ratio: f64, cycles_per_bit: f64) -> Self {
        Workload {
            packet_bits,
            period_s,
            rate_pps: 1.0,
            compression_ratio,
            bursts: Vec::new(),
            cycles_per_bit,
            volume_overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let mut problems = Vec::new();
        if !pos(self.packet_bits) {
            problems.push(WorkloadProblem::PacketBits(self.packet_bits));
        }
        if !pos(self.period_s) {
            problems.push(WorkloadProblem::Period(self.period_s));
        }
        if !pos(self.rate_pps) {
            problems.push(WorkloadProblem::Rate(self.rate_pps));
        }
        if !(pos(self.compression_ratio) && self.compression_ratio <= 1.0) {
            problems.push(WorkloadProblem::Compression(self.compression_ratio));
        }
        if !pos(self.cycles_per_bit) {
            problems.push(WorkloadProblem::CyclesPerBit(self.cycles_per_bit));
        }
        for b in &self.bursts {
            if !(b.multiplier.is_finite() && b.multiplier >= 1.0) {
                problems.push(WorkloadProblem::BurstMultiplier { period: b.period, multiplier: b.multiplier });
            }
        }
        for (id, &value) in &self.volume_overrides {
            if !(value.is_finite() && value >= 0.0) {
                problems.push(WorkloadProblem::Override { id: id.clone(), value });
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(WorkloadError { problems })
        }
    }

    /// Nominal per-period volume of one ED.
    pub fn volume_bits(&self) -> f64 {
        self.packet_bits * self.rate_pps
    }

    pub fn ed_volume(&self, ed_id: &str) -> f64 {
        self.volume_overrides.get(ed_id).copied().unwrap_or_else(|| self.volume_bits())
    }

    /// Injection multiplier of a period; repeated entries compound.
    pub fn burst_multiplier(&self, period: u32) -> f64 {
        self.bursts.iter().filter(|b| b.period == period).map(|b| b.multiplier).product()
    }

    /// Copy with every per-ED volume multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Workload {
        let mut w = self.clone();
        w.packet_bits *= factor;
        for v in w.volume_overrides.values_mut() {
            *v *= factor;
        }
        w
    }
}

/// Effective service rates in bits per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub ed_compute: Vec<f64>,
    pub ap_compute: Vec<f64>,
    /// Aggregate wireless rate of each AP, shared by its EDs.
    pub ap_wireless: Vec<f64>,
    pub ap_wired: Vec<f64>,
    pub cc_compute: f64,
}

impl RateTable {
    pub fn scaled(&self, c: f64) -> RateTable {
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect();
        RateTable {
            ed_compute: s(&self.ed_compute),
            ap_compute: s(&self.ap_compute),
            ap_wireless: s(&self.ap_wireless),
            ap_wired: s(&self.ap_wired),
            cc_compute: self.cc_compute * c,
        }
    }
}

/// Compute throughput is `cpu_hz / cycles_per_bit`; link rates come straight
/// from the link specs.
pub fn effective_rates(topology: &Topology, workload: &Workload) -> RateTable {
    let cycles = workload.cycles_per_bit;
    RateTable {
        ed_compute: topology.eds.iter().map(|e| e.cpu_hz / cycles).collect(),
        ap_compute: topology.aps.iter().map(|a| a.device.cpu_hz / cycles).collect(),
        ap_wireless: topology.aps.iter().map(|a| a.wireless.rate_bps()).collect(),
        ap_wired: topology.aps.iter().map(|a| a.wired.rate_bps()).collect(),
        cc_compute: topology.cc.cpu_hz / cycles,
    }
}

/// Fraction of one ED's flow handled at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Shares {
    pub ed: f64,
    pub ap: f64,
    pub cc: f64,
}

impl Shares {
    pub const PURE_EDGE: Shares = Shares { ed: 1.0, ap: 0.0, cc: 0.0 };
    pub const CLOUDLET: Shares = Shares { ed: 0.0, ap: 1.0, cc: 0.0 };
    pub const PURE_CLOUD: Shares = Shares { ed: 0.0, ap: 0.0, cc: 1.0 };

    pub fn new(ed: f64, ap: f64, cc: f64) -> Self {
        Shares { ed, ap, cc }
    }

    /// Raw-equivalent fraction crossing the wireless hop.
    pub fn wireless_coeff(&self, compression: f64) -> f64 {
        compression * self.ed + self.ap + self.cc
    }

    /// Fraction crossing the wired hop.
    pub fn wired_coeff(&self, compression: f64) -> f64 {
        compression * self.ed + compression * self.ap + self.cc
    }

    fn is_simplex(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= -SIMPLEX_TOL;
        ok(self.ed) && ok(self.ap) && ok(self.cc) && ((self.ed + self.ap + self.cc) - 1.0).abs() <= SIMPLEX_TOL
    }
}

/// Split of every ED's flow plus the wireless fraction each ED gets from its AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadPlan {
    pub shares: Vec<Shares>,
    pub uplink_share: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("plan covers {found} EDs, topology has {expected}")]
    Coverage { expected: usize, found: usize },
    #[error("ED #{0}: shares are not a point of the simplex")]
    Shares(usize),
    #[error("ED #{0}: wireless fraction must be finite and >= 0")]
    Alpha(usize),
    #[error("AP #{0}: wireless fractions sum above 1")]
    AlphaSum(usize),
}

impl OffloadPlan {
    pub fn uniform(n: usize, shares: Shares, uplink_share: Vec<f64>) -> Self {
        OffloadPlan { shares: vec![shares; n], uplink_share }
    }

    pub fn validate(&self, ed_ap: &[usize], num_aps: usize) -> Result<(), PlanError> {
        if self.shares.len() != ed_ap.len() || self.uplink_share.len() != ed_ap.len() {
            return Err(PlanError::Coverage { expected: ed_ap.len(), found: self.shares.len().min(self.uplink_share.len()) });
        }
        let mut sums = vec![0.0; num_aps];
        for (e, (s, &a)) in self.shares.iter().zip(&self.uplink_share).enumerate() {
            if !s.is_simplex() {
                return Err(PlanError::Shares(e));
            }
            if !(a.is_finite() && a >= 0.0) {
                return Err(PlanError::Alpha(e));
            }
            sums[ed_ap[e]] += a;
        }
        match sums.iter().position(|&s| s > 1.0 + SIMPLEX_TOL) {
            Some(m) => Err(PlanError::AlphaSum(m)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    EdCompute,
    EdLink,
    ApCompute,
    ApLink,
    CcCompute,
}

/// One pipeline stage: its kind and the index of the ED or AP it belongs to
/// (always 0 for the CC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    pub device: usize,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StageKind::EdCompute => write!(f, "ED[{}] compute", self.device),
            StageKind::EdLink => write!(f, "ED[{}] wireless link", self.device),
            StageKind::ApCompute => write!(f, "AP[{}] compute", self.device),
            StageKind::ApLink => write!(f, "AP[{}] wired link", self.device),
            StageKind::CcCompute => f.write_str("CC compute"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub ed_compute: Vec<f64>,
    pub ed_link: Vec<f64>,
    pub ap_compute: Vec<f64>,
    pub ap_link: Vec<f64>,
    pub cc_compute: f64,
    pub t_max: f64,
    pub bottleneck: Stage,
}

impl StageTimes {
    /// Every stage in tie-break order: kind first, then device index.
    pub fn stages(&self) -> impl Iterator<Item = (Stage, f64)> + '_ {
        let tag = |kind: StageKind| move |(device, &t): (usize, &f64)| (Stage { kind, device }, t);
        self.ed_compute
            .iter()
            .enumerate()
            .map(tag(StageKind::EdCompute))
            .chain(self.ed_link.iter().enumerate().map(tag(StageKind::EdLink)))
            .chain(self.ap_compute.iter().enumerate().map(tag(StageKind::ApCompute)))
            .chain(self.ap_link.iter().enumerate().map(tag(StageKind::ApLink)))
            .chain(std::iter::once((Stage { kind: StageKind::CcCompute, device: 0 }, self.cc_compute)))
    }

    pub fn time_of(&self, stage: Stage) -> f64 {
        match stage.kind {
            StageKind::EdCompute => self.ed_compute[stage.device],
            StageKind::EdLink => self.ed_link[stage.device],
            StageKind::ApCompute => self.ap_compute[stage.device],
            StageKind::ApLink => self.ap_link[stage.device],
            StageKind::CcCompute => self.cc_compute,
        }
    }
}

/// First maximal stage in the fixed order (ED compute, ED link, AP compute,
/// AP link, CC compute), then by device index.
pub fn bottleneck(st: &StageTimes) -> Stage {
    let mut best: Option<(Stage, f64)> = None;
    for (stage, t) in st.stages() {
        match best {
            Some((_, b)) if !(t > b) => {}
            _ => best = Some((stage, t)),
        }
    }
    best.map(|(s, _)| s).unwrap_or(Stage { kind: StageKind::CcCompute, device: 0 })
}

/// `work / rate` with 0/0 = 0 and x/0 = +inf.
pub fn duration(work: f64, rate: f64) -> f64 {
    if work == 0.0 {
        0.0
    } else if rate == 0.0 {
        f64::INFINITY
    } else {
        work / rate
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("instance shape mismatch: {0}")]
    Shape(String),
}

/// Everything the optimizer, oracle and simulator need: rates, the ED→AP
/// map, per-ED volumes and the compression ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub rates: RateTable,
    pub ed_ap: Vec<usize>,
    pub volumes: Vec<f64>,
    pub compression: f64,
}

impl Instance {
    pub fn new(topology: &Topology, workload: &Workload) -> Result<Self, ModelError> {
        workload.validate()?;
        Ok(Instance {
            rates: effective_rates(topology, workload),
            ed_ap: topology.ed_ap.clone(),
            volumes: topology.eds.iter().map(|e| workload.ed_volume(&e.id)).collect(),
            compression: workload.compression_ratio,
        })
    }

    pub fn from_parts(rates: RateTable, ed_ap: Vec<usize>, volumes: Vec<f64>, compression: f64) -> Result<Self, ModelError> {
        let n_ap = rates.ap_compute.len();
        if rates.ed_compute.len() != ed_ap.len() || volumes.len() != ed_ap.len() {
            return Err(ModelError::Shape("ED-indexed vectors differ in length".into()));
        }
        if rates.ap_wireless.len() != n_ap || rates.ap_wired.len() != n_ap || ed_ap.iter().any(|&m| m >= n_ap) {
            return Err(ModelError::Shape("AP-indexed vectors inconsistent".into()));
        }
        let rate_ok = |r: f64| !r.is_nan() && r >= 0.0;
        let all_rates = rates
            .ed_compute
            .iter()
            .chain(&rates.ap_compute)
            .chain(&rates.ap_wireless)
            .chain(&rates.ap_wired)
            .chain(std::iter::once(&rates.cc_compute));
        if !all_rates.copied().all(rate_ok) {
            return Err(ModelError::Shape("rates must be >= 0".into()));
        }
        if !volumes.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(ModelError::Shape("volumes must be finite and >= 0".into()));
        }
        if !(compression > 0.0 && compression <= 1.0) {
            return Err(WorkloadError { problems: vec![WorkloadProblem::Compression(compression)] }.into());
        }
        Ok(Instance { rates, ed_ap, volumes, compression })
    }

    pub fn num_eds(&self) -> usize {
        self.ed_ap.len()
    }

    pub fn num_aps(&self) -> usize {
        self.rates.ap_compute.len()
    }

    pub fn eds_of(&self, ap: usize) -> impl Iterator<Item = usize> + '_ {
        self.ed_ap.iter().enumerate().filter(move |(_, &m)| m == ap).map(|(e, _)| e)
    }

    pub fn scaled_volumes(&self, c: f64) -> Instance {
        Instance { volumes: self.volumes.iter().map(|v| v * c).collect(), ..self.clone() }
    }

    pub fn scaled_rates(&self, c: f64) -> Instance {
        Instance { rates: self.rates.scaled(c), ..self.clone() }
    }

    pub fn stage_times(&self, plan: &OffloadPlan) -> Result<StageTimes, ModelError> {
        plan.validate(&self.ed_ap, self.num_aps())?;
        Ok(self.stage_times_unchecked(plan))
    }

    pub(crate) fn stage_times_unchecked(&self, plan: &OffloadPlan) -> StageTimes {
        let compression = self.compression;
        let r = &self.rates;
        let n_ap = self.num_aps();
        let mut ap_work = vec![0.0; n_ap];
        let mut wired_work = vec![0.0; n_ap];
        let mut cc_work = 0.0;
        let mut ed_compute = Vec::with_capacity(self.num_eds());
        let mut ed_link = Vec::with_capacity(self.num_eds());
        for (e, s) in plan.shares.iter().enumerate() {
            let v = self.volumes[e];
            let m = self.ed_ap[e];
            ed_compute.push(duration(s.ed * v, r.ed_compute[e]));
            ed_link.push(duration(s.wireless_coeff(compression) * v, plan.uplink_share[e] * r.ap_wireless[m]));
            ap_work[m] += s.ap * v;
            wired_work[m] += s.wired_coeff(compression) * v;
            cc_work += s.cc * v;
        }
        let ap_compute = (0..n_ap).map(|m| duration(ap_work[m], r.ap_compute[m])).collect();
        let ap_link = (0..n_ap).map(|m| duration(wired_work[m], r.ap_wired[m])).collect();
        let mut st = StageTimes {
            ed_compute,
            ed_link,
            ap_compute,
            ap_link,
            cc_compute: duration(cc_work, r.cc_compute),
            t_max: 0.0,
            bottleneck: Stage { kind: StageKind::CcCompute, device: 0 },
        };
        st.bottleneck = bottleneck(&st);
        st.t_max = st.time_of(st.bottleneck);
        st
    }
}

/// Stage durations of `plan` on the given network and workload.
pub fn stage_times(topology: &Topology, workload: &Workload, plan: &OffloadPlan) -> Result<StageTimes, ModelError> {
    Instance::new(topology, workload)?.stage_times(plan)
}
