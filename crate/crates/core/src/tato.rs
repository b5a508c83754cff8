//! Time-aligned task offloading.
//!
//! The optimum is the smallest `T` at which every stage fits in `T` when each
//! layer takes as much work as it can finish in `T`: EDs first, then their AP,
//! then the CC. Processing lower never hurts a downstream hop because the
//! compression ratio is at most one, so for a fixed `T` that greedy fill is
//! the best possible, and each remaining constraint is a nonincreasing
//! piecewise-linear load against a linear capacity `rate * T`. Solving those
//! crossings one layer at a time reproduces the three steps: balance each ED
//! against its radio, align the AP with the result, hand the rest to the CC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{duration, Instance, ModelError, OffloadPlan, RateTable, Shares, Stage, StageKind, StageTimes, Topology, Workload};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TatoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no finite schedule exists: some flow can neither be processed nor delivered")]
    Infeasible,
}

/// Step-1 result for a single ED.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdBalance {
    pub share: f64,
    pub time: f64,
}

/// Balance one ED's compute time against its own uplink.
///
/// At the interior crossing `s * V / ed_compute = (1 - (1 - compression) s) V / ed_link`. When
/// the uplink is too slow for any crossing in (0, 1) the ED keeps everything.
pub fn balance_ed(volume: f64, compression: f64, ed_compute: f64, ed_link: f64) -> EdBalance {
    if volume == 0.0 {
        return EdBalance { share: if ed_compute > 0.0 { 1.0 } else { 0.0 }, time: 0.0 };
    }
    if ed_compute == 0.0 {
        return EdBalance { share: 0.0, time: duration(volume, ed_link) };
    }
    if ed_compute.is_infinite() {
        return EdBalance { share: 1.0, time: duration(compression * volume, ed_link) };
    }
    if ed_link.is_infinite() {
        return EdBalance { share: 0.0, time: 0.0 };
    }
    let share = ed_compute / (ed_link + (1.0 - compression) * ed_compute);
    if share >= 1.0 {
        EdBalance { share: 1.0, time: (volume / ed_compute).max(duration(compression * volume, ed_link)) }
    } else {
        EdBalance { share, time: share * volume / ed_compute }
    }
}

/// Rates and volume of a one-ED, one-AP network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleParams {
    pub volume: f64,
    pub compression: f64,
    pub ed_compute: f64,
    pub ed_link: f64,
    pub ap_compute: f64,
    pub ap_link: f64,
    pub cc_compute: f64,
}

impl SingleParams {
    pub fn instance(&self) -> Result<Instance, ModelError> {
        Instance::from_parts(
            RateTable {
                ed_compute: vec![self.ed_compute],
                ap_compute: vec![self.ap_compute],
                ap_wireless: vec![self.ed_link],
                ap_wired: vec![self.ap_link],
                cc_compute: self.cc_compute,
            },
            vec![0],
            vec![self.volume],
            self.compression,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: OffloadPlan,
    pub times: StageTimes,
}

impl Solution {
    pub fn t_max(&self) -> f64 {
        self.times.t_max
    }

    /// The plan for a tree with no EDs: nothing to place, every stage idle.
    pub fn empty() -> Solution {
        Solution {
            plan: OffloadPlan { shares: Vec::new(), uplink_share: Vec::new() },
            times: StageTimes {
                ed_compute: Vec::new(),
                ed_link: Vec::new(),
                ap_compute: Vec::new(),
                ap_link: Vec::new(),
                cc_compute: 0.0,
                t_max: 0.0,
                bottleneck: Stage { kind: StageKind::CcCompute, device: 0 },
            },
        }
    }
}

/// Optimal plan for one ED under one AP.
pub fn tato_single(p: &SingleParams) -> Result<Solution, TatoError> {
    let inst = p.instance()?;
    let fill = Fill::new(&inst);
    // Step 1: ED compute against its uplink.
    let step1 = balance_ed(p.volume, p.compression, p.ed_compute, p.ed_link).time;
    // Step 2: the AP absorbs what it can; if the backhaul is still too slow,
    // more work is pushed down, which here means raising the common time.
    let step2 = fill.wired_fit(0);
    // Step 3: the CC takes the remainder under the same rule.
    let step3 = fill.cc_fit();
    finish(&inst, &fill, step1.max(step2).max(step3))
}

/// Optimal plan for an arbitrary tree.
pub fn tato_multi(topology: &Topology, workload: &Workload) -> Result<Solution, TatoError> {
    solve(&Instance::new(topology, workload)?)
}

/// Optimal plan for a prepared instance.
pub fn solve(inst: &Instance) -> Result<Solution, TatoError> {
    let fill = Fill::new(inst);
    let t = (0..inst.num_aps())
        .map(|m| fill.wireless_fit(m).max(fill.wired_fit(m)))
        .fold(fill.cc_fit(), f64::max);
    finish(inst, &fill, t)
}

fn finish(inst: &Instance, fill: &Fill, t: f64) -> Result<Solution, TatoError> {
    if !t.is_finite() {
        return Err(TatoError::Infeasible);
    }
    let plan = fill.plan_at(t);
    let times = inst.stage_times(&plan)?;
    Ok(Solution { plan, times })
}

/// Wireless fractions that equalize every ED's uplink time at `sum(L) / R`.
pub fn allocate_wireless(loads: &[f64]) -> Vec<f64> {
    let total: f64 = loads.iter().sum();
    if total > 0.0 {
        loads.iter().map(|l| l / total).collect()
    } else {
        vec![1.0 / loads.len().max(1) as f64; loads.len()]
    }
}

/// Wireless fractions for every ED of a plan, per AP, proportional to load.
pub fn wireless_fractions(inst: &Instance, shares: &[Shares]) -> Vec<f64> {
    let mut uplink_share = vec![0.0; inst.num_eds()];
    for m in 0..inst.num_aps() {
        let eds: Vec<usize> = inst.eds_of(m).collect();
        let loads: Vec<f64> = eds.iter().map(|&e| shares[e].wireless_coeff(inst.compression) * inst.volumes[e]).collect();
        for (e, a) in eds.into_iter().zip(allocate_wireless(&loads)) {
            uplink_share[e] = a;
        }
    }
    uplink_share
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    PureCloud,
    PureEdge,
    Cloudlet,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::PureCloud, Baseline::PureEdge, Baseline::Cloudlet];

    pub fn shares(self) -> Shares {
        match self {
            Baseline::PureCloud => Shares::PURE_CLOUD,
            Baseline::PureEdge => Shares::PURE_EDGE,
            Baseline::Cloudlet => Shares::CLOUDLET,
        }
    }
}

/// Corner plan of a baseline scheme. Cloudlet results travel on to the CC in
/// compressed form.
pub fn baseline_plan(kind: Baseline, inst: &Instance) -> OffloadPlan {
    let shares = vec![kind.shares(); inst.num_eds()];
    let uplink_share = wireless_fractions(inst, &shares);
    OffloadPlan { shares, uplink_share }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverloadPlan {
    pub plan: OffloadPlan,
    /// Stage times at the burst volume.
    pub times: StageTimes,
    /// `T_max - period` at the burst volume; positive for heavy data.
    pub excess: f64,
    pub heavy: bool,
}

/// Plan for a period carrying `burst_bits` per ED instead of the nominal volume.
///
/// When the burst is heavy the min-max plan spreads the overload evenly: every
/// saturated stage ends the period with the same excess `T_max - period`.
/// Stage times are linear in volume, so the optimal shares do not depend on
/// the burst size and a light burst keeps the nominal plan.
pub fn overload_equalize(topology: &Topology, workload: &Workload, burst_bits: f64) -> Result<OverloadPlan, TatoError> {
    let nominal = Instance::new(topology, workload)?;
    let factor = burst_bits / workload.volume_bits();
    let burst = nominal.scaled_volumes(factor);
    let heavy_sol = solve(&burst)?;
    let heavy = heavy_sol.t_max() > workload.period_s;
    let plan = if heavy { heavy_sol.plan } else { solve(&nominal)?.plan };
    let times = burst.stage_times(&plan)?;
    Ok(OverloadPlan { excess: times.t_max - workload.period_s, plan, times, heavy })
}

/// Greedy layer-by-layer fill of an instance at a candidate time.
struct Fill<'a> {
    inst: &'a Instance,
    /// Time at which each ED can process its whole flow.
    ed_kinks: Vec<f64>,
}

impl<'a> Fill<'a> {
    fn new(inst: &'a Instance) -> Self {
        let ed_kinks = (0..inst.num_eds())
            .map(|e| inst.volumes[e] / inst.rates.ed_compute[e])
            .filter(|k| k.is_finite() && *k > 0.0)
            .collect();
        Fill { inst, ed_kinks }
    }

    fn ed_share(&self, e: usize, t: f64) -> f64 {
        let ed_rate = self.inst.rates.ed_compute[e];
        let v = self.inst.volumes[e];
        if ed_rate == 0.0 {
            0.0
        } else if v == 0.0 || ed_rate.is_infinite() {
            1.0
        } else {
            (t * ed_rate / v).min(1.0)
        }
    }

    fn wireless_load(&self, m: usize, t: f64) -> f64 {
        let compression = self.inst.compression;
        self.inst.eds_of(m).map(|e| (1.0 - (1.0 - compression) * self.ed_share(e, t)) * self.inst.volumes[e]).sum()
    }

    fn raw_to_ap(&self, m: usize, t: f64) -> f64 {
        self.inst.eds_of(m).map(|e| (1.0 - self.ed_share(e, t)) * self.inst.volumes[e]).sum()
    }

    /// Raw bits AP `m` cannot process by `t` and forwards to the CC.
    fn overflow(&self, m: usize, t: f64) -> f64 {
        let cap = capacity(t, self.inst.rates.ap_compute[m]);
        (self.raw_to_ap(m, t) - cap).max(0.0)
    }

    fn wired_load(&self, m: usize, t: f64) -> f64 {
        let own: f64 = self.inst.eds_of(m).map(|e| self.inst.volumes[e]).sum();
        self.inst.compression * own + (1.0 - self.inst.compression) * self.overflow(m, t)
    }

    fn ap_kink(&self, m: usize) -> f64 {
        earliest_fit(|t| self.raw_to_ap(m, t), self.inst.rates.ap_compute[m], &self.ed_kinks)
    }

    fn wireless_fit(&self, m: usize) -> f64 {
        earliest_fit(|t| self.wireless_load(m, t), self.inst.rates.ap_wireless[m], &self.ed_kinks)
    }

    fn wired_fit(&self, m: usize) -> f64 {
        let mut kinks = self.ed_kinks.clone();
        kinks.push(self.ap_kink(m));
        earliest_fit(|t| self.wired_load(m, t), self.inst.rates.ap_wired[m], &kinks)
    }

    fn cc_fit(&self) -> f64 {
        let mut kinks = self.ed_kinks.clone();
        kinks.extend((0..self.inst.num_aps()).map(|m| self.ap_kink(m)));
        let load = |t: f64| (0..self.inst.num_aps()).map(|m| self.overflow(m, t)).sum::<f64>();
        earliest_fit(load, self.inst.rates.cc_compute, &kinks)
    }

    fn plan_at(&self, t: f64) -> OffloadPlan {
        let inst = self.inst;
        let mut shares = vec![Shares::default(); inst.num_eds()];
        for m in 0..inst.num_aps() {
            let raw = self.raw_to_ap(m, t);
            let processed = capacity(t, inst.rates.ap_compute[m]).min(raw);
            let frac = if raw > 0.0 { processed / raw } else { 0.0 };
            for e in inst.eds_of(m) {
                let ed = self.ed_share(e, t);
                let rest = 1.0 - ed;
                let ap = rest * frac;
                shares[e] = Shares::new(ed, ap, (rest - ap).max(0.0));
            }
        }
        let uplink_share = wireless_fractions(inst, &shares);
        OffloadPlan { shares, uplink_share }
    }
}

/// `rate * t`, treating an infinite rate at `t = 0` as no capacity.
fn capacity(t: f64, rate: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * rate
    }
}

/// Smallest `t >= 0` with `load(t) <= rate * t`, for a nonincreasing load that
/// is linear between consecutive `kinks`. Returns `+inf` when no such `t` exists.
fn earliest_fit(load: impl Fn(f64) -> f64, rate: f64, kinks: &[f64]) -> f64 {
    let gap = |t: f64| load(t) - capacity(t, rate);
    let g0 = load(0.0);
    if g0 <= 0.0 || rate.is_infinite() {
        return 0.0;
    }
    let mut pts: Vec<f64> = kinks.iter().copied().filter(|k| k.is_finite() && *k > 0.0).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let (mut prev, mut g_prev) = (0.0, g0);
    let cross = |a: f64, ga: f64, b: f64, gb: f64| a + ga * (b - a) / (ga - gb);
    for &k in &pts {
        let g = gap(k);
        if g <= 0.0 {
            return cross(prev, g_prev, k, g);
        }
        prev = k;
        g_prev = g;
    }
    // Past the last kink the load is linear.
    if rate > 0.0 {
        let probe = prev + g_prev / rate;
        let g = gap(probe);
        if g <= 0.0 {
            return cross(prev, g_prev, probe, g);
        }
        // Rounding left the probe a hair short; the probe itself fits to within an ulp.
        return probe;
    }
    let probe = prev + prev.max(1.0);
    let g = gap(probe);
    if g < g_prev {
        let slope = (g - g_prev) / (probe - prev);
        prev - g_prev / slope
    } else {
        f64::INFINITY
    }
}
