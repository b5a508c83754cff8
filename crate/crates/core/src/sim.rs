//! Discrete-time fluid simulation of the five-stage pipeline.
//!
//! Each period every ED injects its volume, already split by the plan into
//! three sub-flows tagged with the layer that will process them. Every stage
//! drains `rate * dt` bits per tick, split across the sub-flows it holds in
//! proportion to their planned work, each sub-flow in FIFO order. Stages are
//! served from the EDs upward within a tick, so bits can cross several
//! stages in one tick.
//! Compute stages only see the sub-flow assigned to them and emit `compression` times
//! what they consume; raw sub-flows bypass lower compute stages at no cost.
//!
//! Backlog totals are reported in raw-equivalent bits: a processed bit counts
//! as `1 / compression` raw bits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, ModelError, OffloadPlan, Stage, StageKind, Topology, Workload};

/// A chunk finishes when no more than this fraction of it is left.
const SERVE_SLACK: f64 = 1e-9;
/// A period counts as delivered once its outstanding raw-equivalent volume
/// falls below this fraction of what was injected.
const DONE_FRACTION: f64 = 1e-9;
/// Extra periods allowed after the last injection for queues to drain.
const DRAIN_FACTOR: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub ticks_per_period: u32,
    pub periods: u32,
    pub warmup_periods: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { ticks_per_period: 100, periods: 60, warmup_periods: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("ticks_per_period must be >= 10, got {0}")]
    Ticks(u32),
    #[error("periods must be positive")]
    Periods,
    #[error("warmup_periods ({warmup}) must be below periods ({periods})")]
    Warmup { warmup: u32, periods: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.ticks_per_period < 10 {
            return Err(SimError::Ticks(self.ticks_per_period));
        }
        if self.periods == 0 {
            return Err(SimError::Periods);
        }
        if self.warmup_periods >= self.periods {
            return Err(SimError::Warmup { warmup: self.warmup_periods, periods: self.periods });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Flow {
    Ed,
    Ap,
    Cc,
}

/// A sub-flow as seen by one stage: whose data, which layer processes it,
/// and whether that has happened yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Class {
    ed: usize,
    flow: Flow,
    processed: bool,
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    period: u32,
    class: Class,
    bits: f64,
}

impl Chunk {
    fn with_bits(self, bits: f64) -> Chunk {
        Chunk { bits, ..self }
    }

    fn processed(self, compression: f64) -> Chunk {
        Chunk { class: Class { processed: true, ..self.class }, bits: self.bits * compression, ..self }
    }
}

/// One stage's buffer: a FIFO queue per sub-flow. Capacity is shared among
/// the non-empty queues in proportion to each sub-flow's planned work at the
/// stage, and whatever a queue cannot use goes to the others.
#[derive(Debug, Default)]
struct Buffer {
    queues: Vec<(Class, f64, VecDeque<Chunk>)>,
}

impl Buffer {
    fn push(&mut self, c: Chunk, weight: f64) {
        let q = match self.queues.iter().position(|(k, _, _)| *k == c.class) {
            Some(i) => &mut self.queues[i].2,
            None => {
                let at = self.queues.partition_point(|(k, _, _)| *k < c.class);
                self.queues.insert(at, (c.class, weight, VecDeque::new()));
                &mut self.queues[at].2
            }
        };
        match q.back_mut() {
            Some(last) if last.period == c.period => last.bits += c.bits,
            _ => q.push_back(c),
        }
    }

    fn bits(&self) -> f64 {
        self.queues.iter().flat_map(|(_, _, q)| q).map(|c| c.bits).sum()
    }

    fn raw_equivalent(&self, compression: f64) -> f64 {
        self.queues
            .iter()
            .flat_map(|(_, _, q)| q)
            .map(|c| if c.class.processed { c.bits / compression } else { c.bits })
            .sum()
    }

    fn serve(&mut self, mut cap: f64, mut sink: impl FnMut(Chunk)) {
        let backlog = |q: &VecDeque<Chunk>| q.iter().map(|c| c.bits).sum::<f64>();
        while cap > 0.0 {
            let active: Vec<usize> = (0..self.queues.len()).filter(|&i| !self.queues[i].2.is_empty()).collect();
            if active.is_empty() {
                break;
            }
            let total_w: f64 = active.iter().map(|&i| self.queues[i].1).sum();
            let allot = |i: usize| cap * self.queues[i].1 / total_w;
            let emptied: Vec<usize> =
                active.iter().copied().filter(|&i| backlog(&self.queues[i].2) <= allot(i) * (1.0 + SERVE_SLACK)).collect();
            if emptied.is_empty() {
                let shares: Vec<f64> = active.iter().map(|&i| allot(i)).collect();
                for (&i, share) in active.iter().zip(shares) {
                    drain(&mut self.queues[i].2, share, &mut sink);
                }
                break;
            }
            for i in emptied {
                cap -= backlog(&self.queues[i].2);
                drain(&mut self.queues[i].2, f64::INFINITY, &mut sink);
            }
        }
    }
}

/// Take up to `cap` bits from the front of `queue`.
fn drain(queue: &mut VecDeque<Chunk>, mut cap: f64, sink: &mut impl FnMut(Chunk)) {
    while cap > 0.0 {
        let Some(front) = queue.front_mut() else { break };
        if front.bits <= cap * (1.0 + SERVE_SLACK) {
            cap -= front.bits;
            let whole = *front;
            queue.pop_front();
            sink(whole);
        } else {
            front.bits -= cap;
            sink(front.with_bits(cap));
            cap = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub dt: f64,
    pub period_s: f64,
    pub ticks_per_period: u32,
    pub periods: u32,
    pub warmup_periods: u32,
    /// Ticks belonging to the injection phase; later ticks only drain.
    pub injection_ticks: usize,
    /// Stage order of each row of `occupancy`.
    pub stages: Vec<Stage>,
    /// Buffer occupancy in bits, one row of `stages.len()` values per tick.
    pub occupancy: Vec<f64>,
    /// Raw-equivalent bits held anywhere in the pipeline after each tick.
    pub total_backlog: Vec<f64>,
    /// `total_backlog` after the last tick of each injection period.
    pub period_end_backlog: Vec<f64>,
    /// Raw bits injected per period (bursts included).
    pub injected: Vec<f64>,
    /// Nominal raw bits per period across all EDs.
    pub nominal_volume: f64,
    /// Seconds from injection to delivery of a period's last bit at the CC.
    pub finish_times: Vec<Option<f64>>,
    /// `|injected - (buffered + delivered)| / injected` after each tick.
    pub conservation_error: Vec<f64>,
}

impl SimTrace {
    pub fn occupancy_at(&self, tick: usize) -> &[f64] {
        let w = self.stages.len();
        &self.occupancy[tick * w..(tick + 1) * w]
    }

    pub fn max_conservation_error(&self) -> f64 {
        self.conservation_error.iter().copied().fold(0.0, f64::max)
    }
}

struct Pipeline<'a> {
    inst: &'a Instance,
    plan: &'a OffloadPlan,
    dt: f64,
    ed_compute: Vec<Buffer>,
    ed_link: Vec<Buffer>,
    ap_compute: Vec<Buffer>,
    ap_link: Vec<Buffer>,
    cc_compute: Buffer,
    outstanding: Vec<f64>,
    injected_total: f64,
    delivered_bits: f64,
}

/// Planned per-period bits of a sub-flow at any stage it crosses.
fn weight(inst: &Instance, plan: &OffloadPlan, c: Class) -> f64 {
    let s = plan.shares[c.ed];
    let share = match c.flow {
        Flow::Ed => s.ed,
        Flow::Ap => s.ap,
        Flow::Cc => s.cc,
    };
    (share * inst.volumes[c.ed] * if c.processed { inst.compression } else { 1.0 }).max(f64::MIN_POSITIVE)
}

impl Pipeline<'_> {
    fn inject(&mut self, period: u32, multiplier: f64) -> f64 {
        let mut total = 0.0;
        for e in 0..self.inst.num_eds() {
            let v = self.inst.volumes[e] * multiplier;
            let s = self.plan.shares[e];
            for (flow, share) in [(Flow::Ed, s.ed), (Flow::Ap, s.ap), (Flow::Cc, s.cc)] {
                if share * v > 0.0 {
                    let c = Chunk { period, class: Class { ed: e, flow, processed: false }, bits: share * v };
                    let w = weight(self.inst, self.plan, c.class);
                    let buf = if flow == Flow::Ed { &mut self.ed_compute[e] } else { &mut self.ed_link[e] };
                    buf.push(c, w);
                }
            }
            total += v;
        }
        self.outstanding.push(total);
        self.injected_total += total;
        total
    }

    /// Advance one tick; returns periods whose last bit was delivered.
    fn tick(&mut self) -> Vec<u32> {
        let (inst, plan) = (self.inst, self.plan);
        let compression = inst.compression;
        let r = &inst.rates;
        let dt = self.dt;
        let w = |c: &Chunk| weight(inst, plan, c.class);
        let mut delivered: Vec<Chunk> = Vec::new();
        for e in 0..inst.num_eds() {
            let m = inst.ed_ap[e];
            let link = &mut self.ed_link[e];
            self.ed_compute[e].serve(r.ed_compute[e] * dt, |c| {
                let out = c.processed(compression);
                link.push(out, w(&out))
            });
            let (ap_compute, ap_link) = (&mut self.ap_compute[m], &mut self.ap_link[m]);
            link.serve(plan.uplink_share[e] * r.ap_wireless[m] * dt, |c| {
                if !c.class.processed && c.class.flow == Flow::Ap {
                    ap_compute.push(c, w(&c))
                } else {
                    ap_link.push(c, w(&c))
                }
            });
        }
        for m in 0..inst.num_aps() {
            let link = &mut self.ap_link[m];
            self.ap_compute[m].serve(r.ap_compute[m] * dt, |c| {
                let out = c.processed(compression);
                link.push(out, w(&out))
            });
            let cc = &mut self.cc_compute;
            link.serve(r.ap_wired[m] * dt, |c| if c.class.processed { delivered.push(c) } else { cc.push(c, w(&c)) });
        }
        self.cc_compute.serve(r.cc_compute * dt, |c| delivered.push(c.processed(compression)));
        let mut done = Vec::new();
        for c in delivered {
            self.delivered_bits += c.bits;
            let left = &mut self.outstanding[c.period as usize];
            let before = *left;
            *left -= c.bits / compression;
            if before > 0.0 && *left <= 0.0 {
                done.push(c.period);
            }
        }
        done
    }

    fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.ed_compute
            .iter()
            .chain(&self.ed_link)
            .chain(&self.ap_compute)
            .chain(&self.ap_link)
            .chain(std::iter::once(&self.cc_compute))
    }
}

fn stage_order(inst: &Instance) -> Vec<Stage> {
    let n = inst.num_eds();
    let a = inst.num_aps();
    let mk = |kind, count| (0..count).map(move |device| Stage { kind, device });
    mk(StageKind::EdCompute, n)
        .chain(mk(StageKind::EdLink, n))
        .chain(mk(StageKind::ApCompute, a))
        .chain(mk(StageKind::ApLink, a))
        .chain(mk(StageKind::CcCompute, 1))
        .collect()
}

/// Run the fluid pipeline for `cfg.periods` periods, then let it drain.
pub fn simulate(topology: &Topology, workload: &Workload, plan: &OffloadPlan, cfg: &SimConfig) -> Result<SimTrace, SimError> {
    let inst = Instance::new(topology, workload)?;
    simulate_instance(&inst, workload, plan, cfg)
}

/// [`simulate`] on a prepared instance; `workload` supplies the period and bursts.
pub fn simulate_instance(inst: &Instance, workload: &Workload, plan: &OffloadPlan, cfg: &SimConfig) -> Result<SimTrace, SimError> {
    cfg.validate()?;
    plan.validate(&inst.ed_ap, inst.num_aps()).map_err(ModelError::from)?;
    let tpp = cfg.ticks_per_period as usize;
    let dt = workload.period_s / cfg.ticks_per_period as f64;
    let n_ed = inst.num_eds();
    let n_ap = inst.num_aps();
    let mut p = Pipeline {
        inst,
        plan,
        dt,
        ed_compute: (0..n_ed).map(|_| Buffer::default()).collect(),
        ed_link: (0..n_ed).map(|_| Buffer::default()).collect(),
        ap_compute: (0..n_ap).map(|_| Buffer::default()).collect(),
        ap_link: (0..n_ap).map(|_| Buffer::default()).collect(),
        cc_compute: Buffer::default(),
        outstanding: Vec::new(),
        injected_total: 0.0,
        delivered_bits: 0.0,
    };
    let stages = stage_order(inst);
    let injection_ticks = tpp * cfg.periods as usize;
    let max_ticks = injection_ticks * (1 + DRAIN_FACTOR as usize);
    let mut trace = SimTrace {
        dt,
        period_s: workload.period_s,
        ticks_per_period: cfg.ticks_per_period,
        periods: cfg.periods,
        warmup_periods: cfg.warmup_periods,
        injection_ticks,
        stages,
        occupancy: Vec::new(),
        total_backlog: Vec::new(),
        period_end_backlog: Vec::new(),
        injected: Vec::new(),
        nominal_volume: inst.volumes.iter().sum(),
        finish_times: vec![None; cfg.periods as usize],
        conservation_error: Vec::new(),
    };
    let mut pending = 0usize;
    let mut tick = 0usize;
    while tick < injection_ticks || (pending > 0 && tick < max_ticks) {
        if tick < injection_ticks && tick % tpp == 0 {
            let period = (tick / tpp) as u32;
            let v = p.inject(period, workload.burst_multiplier(period));
            trace.injected.push(v);
            if v > 0.0 {
                pending += 1;
            } else {
                trace.finish_times[period as usize] = Some(0.0);
            }
        }
        for period in p.tick() {
            let k = period as usize;
            if p.outstanding[k] <= DONE_FRACTION * trace.injected[k] || p.outstanding[k] <= 0.0 {
                trace.finish_times[k] = Some((tick + 1 - k * tpp) as f64 * dt);
                pending -= 1;
            }
        }
        // Periods that cross the done threshold without reaching exactly zero.
        for k in 0..p.outstanding.len() {
            if trace.finish_times[k].is_none() && trace.injected[k] > 0.0 && p.outstanding[k] <= DONE_FRACTION * trace.injected[k] {
                trace.finish_times[k] = Some((tick + 1 - k * tpp) as f64 * dt);
                pending -= 1;
            }
        }
        let mut raw_eq = 0.0;
        for q in p.buffers() {
            trace.occupancy.push(q.bits());
            raw_eq += q.raw_equivalent(inst.compression);
        }
        let accounted = raw_eq + p.delivered_bits / inst.compression;
        let err = if p.injected_total > 0.0 { (p.injected_total - accounted).abs() / p.injected_total } else { accounted.abs() };
        trace.conservation_error.push(err);
        trace.total_backlog.push(raw_eq);
        if tick < injection_ticks && (tick + 1) % tpp == 0 {
            trace.period_end_backlog.push(raw_eq);
        }
        tick += 1;
    }
    Ok(trace)
}

/// Long-run backlog growth per period, in raw-equivalent bits, of `plan`
/// under periodic injection.
///
/// A saturated stage serves its backed-up sub-flows at the same fraction of
/// their planned volume and hands capacity the others cannot use to them.
/// Stages are visited upstream first; each one caps the fraction of every
/// sub-flow it carries at its fill level, and whatever is capped piles up.
pub fn fluid_growth(inst: &Instance, plan: &OffloadPlan, period_s: f64) -> Result<f64, ModelError> {
    plan.validate(&inst.ed_ap, inst.num_aps())?;
    let (n, a) = (inst.num_eds(), inst.num_aps());
    let r = &inst.rates;
    let compression = inst.compression;
    let mut cap = Vec::with_capacity(2 * n + 2 * a + 1);
    cap.extend(r.ed_compute.iter().copied());
    cap.extend((0..n).map(|e| if plan.uplink_share[e] == 0.0 { 0.0 } else { plan.uplink_share[e] * r.ap_wireless[inst.ed_ap[e]] }));
    cap.extend(r.ap_compute.iter().copied());
    cap.extend(r.ap_wired.iter().copied());
    cap.push(r.cc_compute);
    let cap: Vec<f64> = cap.into_iter().map(|c| c * period_s).collect();

    // (planned raw bits, [(stage, work per raw bit)]); stage indices grow downstream.
    let mut flows: Vec<(f64, [(usize, f64); 3])> = Vec::new();
    for e in 0..n {
        let m = inst.ed_ap[e];
        let s = plan.shares[e];
        let (link, ap, wired, cc) = (n + e, 2 * n + m, 2 * n + a + m, 2 * n + 2 * a);
        for (share, path) in [
            (s.ed, [(e, 1.0), (link, compression), (wired, compression)]),
            (s.ap, [(link, 1.0), (ap, 1.0), (wired, compression)]),
            (s.cc, [(link, 1.0), (wired, 1.0), (cc, 1.0)]),
        ] {
            let d = share * inst.volumes[e];
            if d > 0.0 {
                flows.push((d, path));
            }
        }
    }

    let mut through = vec![1.0; flows.len()];
    for (st, &c) in cap.iter().enumerate() {
        if c.is_infinite() {
            continue;
        }
        // (fraction arriving, work at this stage per unit of fraction, flow)
        let mut here: Vec<(f64, f64, usize)> = flows
            .iter()
            .enumerate()
            .filter_map(|(f, (d, path))| path.iter().find(|p| p.0 == st).map(|&(_, coef)| (through[f], d * coef, f)))
            .collect();
        if here.iter().map(|(y, w, _)| y * w).sum::<f64>() <= c {
            continue;
        }
        here.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut left, mut rest) = (c, here.iter().map(|h| h.1).sum::<f64>());
        let mut fill = 0.0;
        for &(y, w, _) in &here {
            if y * rest > left {
                fill = left / rest;
                break;
            }
            left -= y * w;
            rest -= w;
        }
        for &(_, _, f) in &here {
            through[f] = f64::min(through[f], fill);
        }
    }
    Ok(flows.iter().zip(&through).map(|((d, _), y)| d * (1.0 - y)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub burst_period: u32,
    pub multiplier: f64,
    /// Seconds from the burst injection until the period-end backlog is back
    /// at its pre-burst level; `None` when it never returns within the run.
    pub recovery_s: Option<f64>,
    /// Whole periods between the end of the burst period and recovery.
    pub drain_periods: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_finish_time_s: f64,
    pub unfinished_periods: usize,
    pub peak_backlog_bits: f64,
    pub recoveries: Vec<Recovery>,
    pub stable: bool,
    /// Least-squares slope of post-warmup period-end backlog, bits per period.
    pub backlog_slope_bits_per_period: f64,
    /// Mean of `max(0, period - finish time)` over post-warmup periods.
    pub idle_slack_s: f64,
}

/// Summaries used by the experiments. Backlog levels are compared at period
/// boundaries; the pre-burst level is the mean of the three boundaries before
/// a burst, and "back at level" means within 1% of it (or within a millionth
/// of the nominal per-period volume when the level is zero).
pub fn metrics(trace: &SimTrace, workload: &Workload) -> Metrics {
    let warm = trace.warmup_periods as usize;
    let post: Vec<f64> = trace.finish_times[warm..].iter().flatten().copied().collect();
    let unfinished = trace.finish_times[warm..].len() - post.len();
    let avg = if post.is_empty() { f64::INFINITY } else { post.iter().sum::<f64>() / post.len() as f64 };
    let idle = if post.is_empty() {
        0.0
    } else {
        post.iter().map(|f| (trace.period_s - f).max(0.0)).sum::<f64>() / post.len() as f64
    };
    let main = &trace.total_backlog[..trace.injection_ticks.min(trace.total_backlog.len())];
    let peak = main.iter().copied().fold(0.0, f64::max);
    let ends = &trace.period_end_backlog;
    let floor = 1e-6 * trace.nominal_volume;

    let mut bursts: Vec<_> = workload.bursts.iter().filter(|b| b.multiplier > 1.0 && b.period < trace.periods).collect();
    bursts.sort_by_key(|b| b.period);
    let recoveries: Vec<Recovery> = bursts
        .iter()
        .map(|b| {
            let k = b.period as usize;
            let before = &ends[k.saturating_sub(3)..k];
            let level = if before.is_empty() { 0.0 } else { before.iter().sum::<f64>() / before.len() as f64 };
            let tol = (0.01 * level).max(floor);
            let back = (k..ends.len()).find(|&j| (ends[j] - level).abs() <= tol);
            Recovery {
                burst_period: b.period,
                multiplier: b.multiplier,
                recovery_s: back.map(|j| (j - k + 1) as f64 * trace.period_s),
                drain_periods: back.map(|j| (j - k) as u32),
            }
        })
        .collect();

    let half = ends[ends.len() / 2];
    let last = ends[ends.len() - 1];
    let stable = last <= half + floor && recoveries.iter().all(|r| r.recovery_s.is_some());

    Metrics {
        avg_finish_time_s: avg,
        unfinished_periods: unfinished,
        peak_backlog_bits: peak,
        recoveries,
        stable,
        backlog_slope_bits_per_period: slope(&ends[warm.min(ends.len() - 1)..]),
        idle_slack_s: idle,
    }
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
