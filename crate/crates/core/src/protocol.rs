//! Task coordination between the CC, APs and EDs: notification, registration,
//! plan distribution and the processing hand-off, plus periodic resource
//! re-estimation with threshold-triggered replanning.
//!
//! Nodes are pure state machines driven by [`step_node`]. The [`Scheduler`]
//! owns one FIFO queue per directed link and delivers messages in any order
//! that keeps each link FIFO.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layer, OffloadPlan, Shares, Topology, Workload};
use crate::tato::{tato_multi, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Notified,
    Registered,
    Planned,
    Processing,
}

impl Phase {
    /// The only phase a node of `role` may move to from `self`.
    pub fn next(self, role: Layer) -> Option<Phase> {
        match (self, role) {
            (Phase::Idle, _) => Some(Phase::Notified),
            (Phase::Notified, Layer::Cc) => Some(Phase::Planned),
            (Phase::Notified, _) => Some(Phase::Registered),
            (Phase::Registered, _) => Some(Phase::Planned),
            (Phase::Planned, _) => Some(Phase::Processing),
            (Phase::Processing, _) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    TaskNotification,
    Registration,
    PlanAssignment,
    StartProcessing,
    ResultReport,
    ResourceUpdate,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Resources a device estimates for itself. Link rates are only present for APs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub device: String,
    pub cpu_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wireless_bps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wired_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEntry {
    pub participating: bool,
    pub resources: ResourceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub ed: String,
    pub shares: Shares,
    pub uplink_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub version: u32,
    pub entries: Vec<PlanEntry>,
    /// Backhaul rate the AP may use for this task.
    pub wired_allowance_bps: f64,
    /// Execution environment; only sent with the first assignment of a task.
    pub env_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum Payload {
    TaskNotification { task: u64 },
    Registration { entries: Vec<RegistrationEntry> },
    PlanAssignment(Assignment),
    StartProcessing { version: u32 },
    ResultReport { period: u32, delivered_bits: f64 },
    ResourceUpdate { reports: Vec<ResourceReport> },
}

impl Payload {
    pub fn variant(&self) -> Variant {
        match self {
            Payload::TaskNotification { .. } => Variant::TaskNotification,
            Payload::Registration { .. } => Variant::Registration,
            Payload::PlanAssignment(_) => Variant::PlanAssignment,
            Payload::StartProcessing { .. } => Variant::StartProcessing,
            Payload::ResultReport { .. } => Variant::ResultReport,
            Payload::ResourceUpdate { .. } => Variant::ResourceUpdate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: String,
    pub receiver: String,
    pub payload: Payload,
}

impl Message {
    fn new(sender: &str, receiver: &str, payload: Payload) -> Message {
        Message { sender: sender.to_string(), receiver: receiver.to_string(), payload }
    }
}

/// Everything that can drive a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Deliver(Message),
    /// The link layer accepted a message this node sent.
    Transmitted(Variant),
    /// The network went quiet while this node was still waiting on children.
    Timeout,
    /// CC only: begin the task by notifying the APs.
    Notify,
    /// CC only: hand off to data processing.
    Start,
    /// Fresh local resource estimate.
    Reestimate(ResourceReport),
    /// AP only: a period's results have been forwarded.
    PeriodDone { period: u32, delivered_bits: f64 },
}

/// CC-side planning state.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    pub base: Topology,
    pub workload: Workload,
    pub task: u64,
    pub threshold: f64,
    /// Registration per device; absent devices count as non-participants.
    pub registry: BTreeMap<String, RegistrationEntry>,
    /// Graph of participating resources the current plan was computed on.
    pub logical: Option<Topology>,
    pub solution: Option<Solution>,
    pub version: u32,
    pub results: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: String,
    pub role: Layer,
    pub phase: Phase,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub participating: bool,
    pub resources: ResourceReport,
    pub plan: Option<Assignment>,
    pub env_token: Option<String>,
    /// Plan assignments accepted so far, replans included.
    pub assignments: u32,
    awaiting: BTreeSet<String>,
    collected: BTreeMap<String, RegistrationEntry>,
    reports: BTreeMap<String, ResourceReport>,
    registration_sent: bool,
    pub planner: Option<Box<Planner>>,
}

impl NodeState {
    /// True while the node waits for children that might never answer.
    pub fn waiting(&self) -> bool {
        match (self.role, self.phase) {
            (Layer::Ap, Phase::Notified) | (Layer::Cc, Phase::Notified) => !self.registration_sent,
            (Layer::Ap, Phase::Processing) => !self.reports.is_empty(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{node} rejected {input} in phase {phase:?}: {reason}")]
pub struct Rejection {
    pub node: String,
    pub phase: Phase,
    pub input: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: NodeState,
    pub outbound: Vec<Message>,
    /// Phases passed through, in order.
    pub transitions: Vec<(Phase, Phase)>,
    pub failure: Option<String>,
    pub replanned: Option<f64>,
}

impl Step {
    fn of(state: NodeState) -> Step {
        Step { state, outbound: Vec::new(), transitions: Vec::new(), failure: None, replanned: None }
    }

    fn advance(&mut self) {
        let from = self.state.phase;
        let to = from.next(self.state.role).expect("advance past Processing");
        self.state.phase = to;
        self.transitions.push((from, to));
    }

    fn send(&mut self, to: &str, payload: Payload) {
        self.outbound.push(Message::new(&self.state.id, to, payload));
    }
}

fn own_report(topology: &Topology, id: &str) -> ResourceReport {
    if topology.cc().id == id {
        return ResourceReport { device: id.to_string(), cpu_hz: topology.cc().cpu_hz, wireless_bps: None, wired_bps: None };
    }
    if let Some(m) = topology.ap_index(id) {
        let ap = &topology.aps()[m];
        return ResourceReport {
            device: id.to_string(),
            cpu_hz: ap.device.cpu_hz,
            wireless_bps: Some(ap.wireless.rate_bps()),
            wired_bps: Some(ap.wired.rate_bps()),
        };
    }
    let e = topology.ed_index(id).expect("device belongs to the topology");
    ResourceReport { device: id.to_string(), cpu_hz: topology.eds()[e].cpu_hz, wireless_bps: None, wired_bps: None }
}

/// The resources a device reports right now according to `topology`.
pub fn report_of(topology: &Topology, id: &str) -> ResourceReport {
    own_report(topology, id)
}

/// Copy of `topology` where every AP and ED that does not participate has no
/// compute. Their links stay, so their flows are still carried upward.
pub fn participant_topology(topology: &Topology, participating: impl Fn(&str) -> bool) -> Topology {
    let mut t = topology.clone();
    let ids: Vec<String> =
        topology.aps().iter().map(|a| a.device.id.clone()).chain(topology.eds().iter().map(|e| e.id.clone())).collect();
    for id in ids {
        if !participating(&id) {
            t = t.with_cpu(&id, 0.0).expect("id from topology");
        }
    }
    t
}

/// Fresh per-node states for a task over `topology`.
pub fn initial_states(
    topology: &Topology,
    workload: &Workload,
    participation: &BTreeMap<String, bool>,
    opts: &ScheduleOptions,
) -> BTreeMap<String, NodeState> {
    let part = |id: &str| participation.get(id).copied().unwrap_or(true);
    let mk = |id: &str, role, parent: Option<&str>, children: Vec<String>| NodeState {
        id: id.to_string(),
        role,
        phase: Phase::Idle,
        parent: parent.map(str::to_string),
        children,
        participating: role == Layer::Cc || part(id),
        resources: own_report(topology, id),
        plan: None,
        env_token: None,
        assignments: 0,
        awaiting: BTreeSet::new(),
        collected: BTreeMap::new(),
        reports: BTreeMap::new(),
        registration_sent: false,
        planner: None,
    };
    let cc_id = topology.cc().id.clone();
    let mut nodes = BTreeMap::new();
    let mut cc = mk(&cc_id, Layer::Cc, None, topology.aps().iter().map(|a| a.device.id.clone()).collect());
    cc.planner = Some(Box::new(Planner {
        base: topology.clone(),
        workload: workload.clone(),
        task: opts.task_id,
        threshold: opts.replan_threshold,
        registry: BTreeMap::new(),
        logical: None,
        solution: None,
        version: 0,
        results: BTreeMap::new(),
    }));
    nodes.insert(cc_id.clone(), cc);
    for (m, ap) in topology.aps().iter().enumerate() {
        let kids = topology.eds_of(m).map(|e| topology.eds()[e].id.clone()).collect();
        nodes.insert(ap.device.id.clone(), mk(&ap.device.id, Layer::Ap, Some(&cc_id), kids));
    }
    for (e, ed) in topology.eds().iter().enumerate() {
        let ap = &topology.aps()[topology.ap_of(e)].device.id;
        nodes.insert(ed.id.clone(), mk(&ed.id, Layer::Ed, Some(ap), Vec::new()));
    }
    nodes
}

fn describe(input: &Input) -> String {
    match input {
        Input::Deliver(m) => format!("{} from {}", m.payload.variant(), m.sender),
        other => format!("{other:?}").split(['(', ' ', '{']).next().unwrap_or_default().to_string(),
    }
}

/// Advance one node. Messages that do not fit the node's phase are rejected
/// and leave the state untouched.
pub fn step_node(state: &NodeState, input: &Input) -> Result<Step, Rejection> {
    let reject = |reason: &str| Rejection {
        node: state.id.clone(),
        phase: state.phase,
        input: describe(input),
        reason: reason.to_string(),
    };
    if let Input::Deliver(m) = input {
        if m.receiver != state.id {
            return Err(reject("message addressed to another node"));
        }
        let from_parent = state.parent.as_deref() == Some(m.sender.as_str());
        let from_child = state.children.contains(&m.sender);
        if !from_parent && !from_child {
            return Err(reject("sender is not a neighbour"));
        }
    }
    let mut step = Step::of(state.clone());
    match state.role {
        Layer::Cc => cc_step(&mut step, input).map_err(|r| reject(&r))?,
        Layer::Ap => ap_step(&mut step, input).map_err(|r| reject(&r))?,
        Layer::Ed => ed_step(&mut step, input).map_err(|r| reject(&r))?,
    }
    Ok(step)
}

fn registration_entry(s: &NodeState) -> RegistrationEntry {
    RegistrationEntry { participating: s.participating, resources: s.resources.clone() }
}

/// Accept an assignment if it is the first one or a newer version during processing.
fn accept_plan(step: &mut Step, a: &Assignment) -> Result<(), String> {
    let s = &step.state;
    match (s.phase, &s.plan) {
        (Phase::Registered, None) => {}
        (Phase::Processing, Some(cur)) if a.version > cur.version => {}
        (Phase::Planned, _) | (Phase::Processing, _) => return Err("duplicate or stale plan assignment".into()),
        _ => return Err("plan assignment before registration".into()),
    }
    let first = step.state.plan.is_none();
    step.state.plan = Some(a.clone());
    step.state.assignments += 1;
    if let Some(tok) = &a.env_token {
        step.state.env_token = Some(tok.clone());
    }
    if first {
        step.advance();
    }
    Ok(())
}

fn ed_step(step: &mut Step, input: &Input) -> Result<(), String> {
    let parent = step.state.parent.clone().expect("ED has a parent");
    match input {
        Input::Deliver(m) => match &m.payload {
            Payload::TaskNotification { .. } if step.state.phase == Phase::Idle => {
                step.advance();
                let entry = registration_entry(&step.state);
                step.send(&parent, Payload::Registration { entries: vec![entry] });
                step.state.registration_sent = true;
            }
            Payload::PlanAssignment(a) => accept_plan(step, a)?,
            Payload::StartProcessing { .. } if step.state.phase == Phase::Planned => step.advance(),
            _ => return Err("unexpected message".into()),
        },
        Input::Transmitted(Variant::Registration) if step.state.phase == Phase::Notified => step.advance(),
        Input::Transmitted(_) => {}
        Input::Reestimate(r) if step.state.phase == Phase::Processing => {
            step.state.resources = r.clone();
            step.send(&parent, Payload::ResourceUpdate { reports: vec![r.clone()] });
        }
        _ => return Err("unexpected input".into()),
    }
    Ok(())
}

fn ap_forward_registration(step: &mut Step) {
    let parent = step.state.parent.clone().expect("AP has a parent");
    let mut entries = vec![registration_entry(&step.state)];
    entries.extend(std::mem::take(&mut step.state.collected).into_values());
    step.state.awaiting.clear();
    step.state.registration_sent = true;
    step.send(&parent, Payload::Registration { entries });
}

fn ap_forward_reports(step: &mut Step) {
    let parent = step.state.parent.clone().expect("AP has a parent");
    let reports = std::mem::take(&mut step.state.reports).into_values().collect();
    step.state.awaiting.clear();
    step.send(&parent, Payload::ResourceUpdate { reports });
}

fn ap_step(step: &mut Step, input: &Input) -> Result<(), String> {
    let phase = step.state.phase;
    let children = step.state.children.clone();
    match input {
        Input::Deliver(m) => match &m.payload {
            Payload::TaskNotification { task } if phase == Phase::Idle => {
                step.advance();
                for c in &children {
                    step.send(c, Payload::TaskNotification { task: *task });
                }
                step.state.awaiting = children.iter().cloned().collect();
                if children.is_empty() {
                    ap_forward_registration(step);
                }
            }
            Payload::Registration { entries } if phase == Phase::Notified && step.state.awaiting.contains(&m.sender) => {
                step.state.awaiting.remove(&m.sender);
                for e in entries {
                    step.state.collected.insert(e.resources.device.clone(), e.clone());
                }
                if step.state.awaiting.is_empty() {
                    ap_forward_registration(step);
                }
            }
            Payload::PlanAssignment(a) if m.sender != step.state.id && step.state.parent.as_deref() == Some(&m.sender) => {
                accept_plan(step, a)?;
                for c in &children {
                    let entries = a.entries.iter().filter(|e| &e.ed == c).cloned().collect();
                    let sub = Assignment {
                        version: a.version,
                        entries,
                        wired_allowance_bps: a.wired_allowance_bps,
                        env_token: a.env_token.clone(),
                    };
                    step.send(c, Payload::PlanAssignment(sub));
                }
            }
            Payload::StartProcessing { version } if phase == Phase::Planned => {
                step.advance();
                for c in &children {
                    step.send(c, Payload::StartProcessing { version: *version });
                }
            }
            Payload::ResourceUpdate { reports }
                if phase == Phase::Processing && step.state.awaiting.contains(&m.sender) =>
            {
                step.state.awaiting.remove(&m.sender);
                for r in reports {
                    step.state.reports.insert(r.device.clone(), r.clone());
                }
                if step.state.awaiting.is_empty() {
                    ap_forward_reports(step);
                }
            }
            _ => return Err("unexpected message".into()),
        },
        Input::Transmitted(Variant::Registration) if phase == Phase::Notified && step.state.registration_sent => {
            step.advance()
        }
        Input::Transmitted(_) => {}
        Input::Timeout if phase == Phase::Notified && !step.state.registration_sent => ap_forward_registration(step),
        Input::Timeout if phase == Phase::Processing && !step.state.reports.is_empty() => ap_forward_reports(step),
        Input::Reestimate(r) if phase == Phase::Processing => {
            step.state.resources = r.clone();
            step.state.reports = BTreeMap::from([(r.device.clone(), r.clone())]);
            step.state.awaiting = children.iter().cloned().collect();
            if children.is_empty() {
                ap_forward_reports(step);
            }
        }
        Input::PeriodDone { period, delivered_bits } if phase == Phase::Processing => {
            let parent = step.state.parent.clone().expect("AP has a parent");
            step.send(&parent, Payload::ResultReport { period: *period, delivered_bits: *delivered_bits });
        }
        _ => return Err("unexpected input".into()),
    }
    Ok(())
}

/// Messages that push `sol` down to every AP.
fn assignments(cc: &NodeState, logical: &Topology, sol: &Solution, version: u32, token: Option<String>) -> Vec<Message> {
    logical
        .aps()
        .iter()
        .enumerate()
        .map(|(m, ap)| {
            let entries = logical
                .eds_of(m)
                .map(|e| PlanEntry { ed: logical.eds()[e].id.clone(), shares: sol.plan.shares[e], uplink_share: sol.plan.uplink_share[e] })
                .collect();
            let a = Assignment { version, entries, wired_allowance_bps: ap.wired.rate_bps(), env_token: token.clone() };
            Message::new(&cc.id, &ap.device.id, Payload::PlanAssignment(a))
        })
        .collect()
}

fn cc_plan(step: &mut Step) {
    let planner = step.state.planner.as_mut().expect("CC owns the planner");
    let registry = &planner.registry;
    let logical = participant_topology(&planner.base, |id| registry.get(id).is_some_and(|r| r.participating));
    let logical = registry.values().filter(|r| r.participating).fold(logical, |t, r| {
        t.with_cpu(&r.resources.device, r.resources.cpu_hz).expect("registered device exists")
    });
    let sol = if logical.eds().is_empty() {
        // Nothing but the CC: an empty plan, trivially pure cloud.
        Ok(Solution::empty())
    } else {
        tato_multi(&logical, &planner.workload)
    };
    match sol {
        Ok(sol) => {
            planner.version = 1;
            let token = Some(format!("env-{:016x}", planner.task));
            let msgs = assignments(&step.state, &logical, &sol, 1, token);
            let planner = step.state.planner.as_mut().expect("CC owns the planner");
            planner.logical = Some(logical);
            planner.solution = Some(sol);
            step.outbound.extend(msgs);
            step.state.registration_sent = true;
            step.advance();
        }
        Err(e) => {
            step.state.registration_sent = true;
            step.failure = Some(format!("planning aborted: {e}"));
        }
    }
}

fn cc_step(step: &mut Step, input: &Input) -> Result<(), String> {
    let phase = step.state.phase;
    match input {
        Input::Notify if phase == Phase::Idle => {
            step.advance();
            let task = step.state.planner.as_ref().expect("CC owns the planner").task;
            let aps = step.state.children.clone();
            for ap in &aps {
                step.send(ap, Payload::TaskNotification { task });
            }
            step.state.awaiting = aps.into_iter().collect();
            if step.state.awaiting.is_empty() {
                cc_plan(step);
            }
        }
        Input::Deliver(m) => match &m.payload {
            Payload::Registration { entries } if phase == Phase::Notified && step.state.awaiting.contains(&m.sender) => {
                step.state.awaiting.remove(&m.sender);
                let planner = step.state.planner.as_mut().expect("CC owns the planner");
                for e in entries {
                    planner.registry.insert(e.resources.device.clone(), e.clone());
                }
                if step.state.awaiting.is_empty() {
                    cc_plan(step);
                }
            }
            Payload::ResultReport { period, delivered_bits } if phase == Phase::Processing => {
                let planner = step.state.planner.as_mut().expect("CC owns the planner");
                *planner.results.entry(*period).or_default() += delivered_bits;
            }
            Payload::ResourceUpdate { reports } if phase == Phase::Processing => apply_update(step, reports)?,
            _ => return Err("unexpected message".into()),
        },
        Input::Timeout if phase == Phase::Notified && !step.state.registration_sent => {
            step.state.awaiting.clear();
            cc_plan(step);
        }
        Input::Start if phase == Phase::Planned => {
            step.advance();
            let version = step.state.planner.as_ref().expect("CC owns the planner").version;
            for ap in step.state.children.clone() {
                step.send(&ap, Payload::StartProcessing { version });
            }
        }
        Input::Reestimate(r) if phase == Phase::Processing => {
            step.state.resources = r.clone();
            apply_update(step, std::slice::from_ref(r))?;
        }
        Input::Transmitted(_) => {}
        _ => return Err("unexpected input".into()),
    }
    Ok(())
}

fn apply_update(step: &mut Step, reports: &[ResourceReport]) -> Result<(), String> {
    let (state, decision) = resource_update(&step.state, reports).map_err(|r| r.reason)?;
    step.state = state;
    if let ReplanDecision::Replan { messages, solution, .. } = decision {
        step.replanned = Some(solution.t_max());
        step.outbound.extend(messages);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplanDecision {
    /// Largest relative change seen stayed within the threshold.
    Keep { max_change: f64 },
    Replan { max_change: f64, version: u32, solution: Solution, messages: Vec<Message> },
}

fn relative_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else if old == 0.0 {
        f64::INFINITY
    } else {
        (new - old).abs() / old
    }
}

/// Compare fresh estimates with the rates the current plan was built on and
/// replan when any of them moved by more than the CC's threshold.
/// Non-participants' CPU figures are ignored since they never compute.
pub fn resource_update(cc: &NodeState, reports: &[ResourceReport]) -> Result<(NodeState, ReplanDecision), Rejection> {
    let reject = |reason: &str| Rejection {
        node: cc.id.clone(),
        phase: cc.phase,
        input: "ResourceUpdate".into(),
        reason: reason.into(),
    };
    if cc.role != Layer::Cc || cc.phase != Phase::Processing {
        return Err(reject("resource updates are only handled by a processing CC"));
    }
    let planner = cc.planner.as_ref().expect("CC owns the planner");
    let logical = planner.logical.as_ref().expect("processing implies a plan");
    let cc_id = &planner.base.cc().id;
    let mut next = logical.clone();
    let mut max_change: f64 = 0.0;
    for r in reports {
        let counts = |id: &str| id == cc_id || planner.registry.get(id).is_some_and(|e| e.participating);
        if next.ed_index(&r.device).is_none() && next.ap_index(&r.device).is_none() && &r.device != cc_id {
            return Err(reject("report for an unknown device"));
        }
        let cur = own_report(logical, &r.device);
        if counts(&r.device) {
            max_change = max_change.max(relative_change(cur.cpu_hz, r.cpu_hz));
            next = next.with_cpu(&r.device, r.cpu_hz).expect("known device");
        }
        let wl = r.wireless_bps.filter(|&w| Some(w) != cur.wireless_bps);
        let wd = r.wired_bps.filter(|&w| Some(w) != cur.wired_bps);
        if let (Some(old), Some(new)) = (cur.wireless_bps, wl) {
            max_change = max_change.max(relative_change(old, new));
        }
        if let (Some(old), Some(new)) = (cur.wired_bps, wd) {
            max_change = max_change.max(relative_change(old, new));
        }
        if wl.is_some() || wd.is_some() {
            next = next.with_ap_links(&r.device, wl, wd).expect("known AP");
        }
    }
    if max_change <= planner.threshold {
        return Ok((cc.clone(), ReplanDecision::Keep { max_change }));
    }
    let solution = tato_multi(&next, &planner.workload).map_err(|e| reject(&format!("replanning failed: {e}")))?;
    let version = planner.version + 1;
    let messages = assignments(cc, &next, &solution, version, None);
    let mut state = cc.clone();
    let p = state.planner.as_mut().expect("CC owns the planner");
    p.version = version;
    p.logical = Some(next);
    p.solution = Some(solution.clone());
    Ok((state, ReplanDecision::Replan { max_change, version, solution, messages }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Delivered { sender: String, receiver: String, variant: Variant },
    Transition { node: String, role: Layer, from: Phase, to: Phase },
    Rejected { node: String, input: String, reason: String },
    Timeout { node: String },
    Failure { node: String, reason: String },
    Replan { version: u32, t_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One JSON object per line; message deliveries carry `seq`, `sender`,
/// `receiver` and `variant`.
pub fn to_jsonl(log: &[Event]) -> String {
    log.iter().map(|e| serde_json::to_string(e).expect("events serialize") + "\n").collect()
}

/// Every node's phase changes must form one unbroken walk from `Idle` along
/// [`Phase::next`].
pub fn check_phase_safety(log: &[Event]) -> Result<(), String> {
    let mut at: BTreeMap<&str, Phase> = BTreeMap::new();
    for ev in log {
        if let EventKind::Transition { node, role, from, to } = &ev.kind {
            let cur = at.get(node.as_str()).copied().unwrap_or(Phase::Idle);
            if cur != *from {
                return Err(format!("seq {}: {node} moved from {from:?} but was {cur:?}", ev.seq));
            }
            if from.next(*role) != Some(*to) {
                return Err(format!("seq {}: {node} ({role}) jumped {from:?} -> {to:?}", ev.seq));
            }
            at.insert(node, *to);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOptions {
    pub task_id: u64,
    /// Relative rate change that triggers a replan.
    pub replan_threshold: f64,
    /// Periods between resource re-estimations.
    pub reestimate_every: u32,
    /// `None` delivers links in id order; otherwise a seeded random link is
    /// picked at each delivery.
    pub delivery_seed: Option<u64>,
    /// Devices that never answer.
    pub silent: BTreeSet<String>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            task_id: 1,
            replan_threshold: 0.1,
            reestimate_every: 5,
            delivery_seed: None,
            silent: BTreeSet::new(),
        }
    }
}

pub struct Scheduler {
    pub nodes: BTreeMap<String, NodeState>,
    links: BTreeMap<(String, String), VecDeque<Message>>,
    rng: Option<ChaCha8Rng>,
    silent: BTreeSet<String>,
    reestimate_every: u32,
    cc: String,
    pub log: Vec<Event>,
}

impl Scheduler {
    pub fn new(
        topology: &Topology,
        workload: &Workload,
        participation: &BTreeMap<String, bool>,
        opts: &ScheduleOptions,
    ) -> Scheduler {
        Scheduler {
            nodes: initial_states(topology, workload, participation, opts),
            links: BTreeMap::new(),
            rng: opts.delivery_seed.map(ChaCha8Rng::seed_from_u64),
            silent: opts.silent.clone(),
            reestimate_every: opts.reestimate_every.max(1),
            cc: topology.cc().id.clone(),
            log: Vec::new(),
        }
    }

    fn record(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(Event { seq, kind });
    }

    /// Feed one input to a node, log the outcome and queue its messages.
    pub fn input(&mut self, node: &str, input: Input) {
        if self.silent.contains(node) {
            return;
        }
        let state = &self.nodes[node];
        match step_node(state, &input) {
            Err(r) => self.record(EventKind::Rejected { node: r.node, input: r.input, reason: r.reason }),
            Ok(step) => {
                let role = step.state.role;
                for (from, to) in &step.transitions {
                    self.record(EventKind::Transition { node: node.to_string(), role, from: *from, to: *to });
                }
                if let Some(reason) = step.failure {
                    self.record(EventKind::Failure { node: node.to_string(), reason });
                }
                if let Some(t_max) = step.replanned {
                    let version = step.state.planner.as_ref().map_or(0, |p| p.version);
                    self.record(EventKind::Replan { version, t_max });
                }
                self.nodes.insert(node.to_string(), step.state);
                let mut sent = Vec::new();
                for m in step.outbound {
                    sent.push(m.payload.variant());
                    self.links.entry((m.sender.clone(), m.receiver.clone())).or_default().push_back(m);
                }
                sent.dedup();
                for v in sent {
                    self.input(node, Input::Transmitted(v));
                }
            }
        }
    }

    fn next_link(&mut self) -> Option<(String, String)> {
        let busy: Vec<&(String, String)> = self.links.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| k).collect();
        if busy.is_empty() {
            return None;
        }
        let i = match &mut self.rng {
            Some(rng) => rng.gen_range(0..busy.len()),
            None => 0,
        };
        Some(busy[i].clone())
    }

    /// Deliver until every link is empty; nodes still waiting on silent
    /// children then time out, APs before the CC.
    pub fn run_until_quiescent(&mut self) {
        loop {
            while let Some(link) = self.next_link() {
                let m = self.links.get_mut(&link).and_then(VecDeque::pop_front).expect("busy link");
                self.record(EventKind::Delivered {
                    sender: m.sender.clone(),
                    receiver: m.receiver.clone(),
                    variant: m.payload.variant(),
                });
                let to = m.receiver.clone();
                self.input(&to, Input::Deliver(m));
            }
            let mut waiting: Vec<(bool, String)> = self
                .nodes
                .values()
                .filter(|n| n.waiting() && !self.silent.contains(&n.id))
                .map(|n| (n.role == Layer::Cc, n.id.clone()))
                .collect();
            if waiting.is_empty() {
                return;
            }
            waiting.sort();
            let (_, id) = waiting.swap_remove(0);
            self.record(EventKind::Timeout { node: id.clone() });
            self.input(&id, Input::Timeout);
        }
    }

    /// Notification, registration and planning, then the processing hand-off.
    pub fn establish(&mut self) {
        let cc = self.cc.clone();
        self.input(&cc, Input::Notify);
        self.run_until_quiescent();
        if self.nodes[&cc].phase == Phase::Planned {
            self.input(&cc, Input::Start);
            self.run_until_quiescent();
        }
    }

    /// One processing period: each AP reports results, and every
    /// `reestimate_every` periods all devices re-estimate against `actual`.
    pub fn period(&mut self, period: u32, actual: &Topology, workload: &Workload) {
        let aps: Vec<usize> = (0..actual.aps().len()).collect();
        for m in aps {
            let bits = actual.eds_of(m).map(|e| workload.ed_volume(&actual.eds()[e].id)).sum();
            let id = actual.aps()[m].device.id.clone();
            self.input(&id, Input::PeriodDone { period, delivered_bits: bits });
        }
        self.run_until_quiescent();
        if (period + 1) % self.reestimate_every == 0 {
            let ids: Vec<String> = std::iter::once(self.cc.clone())
                .chain(actual.aps().iter().map(|a| a.device.id.clone()))
                .chain(actual.eds().iter().map(|e| e.id.clone()))
                .collect();
            for id in ids {
                self.input(&id, Input::Reestimate(own_report(actual, &id)));
            }
            self.run_until_quiescent();
        }
    }

    pub fn cc_state(&self) -> &NodeState {
        &self.nodes[&self.cc]
    }

    /// The plan the CC computed, if planning succeeded.
    pub fn plan(&self) -> Option<&Solution> {
        self.cc_state().planner.as_ref().and_then(|p| p.solution.as_ref())
    }

    /// Plan reassembled from the entries the EDs hold, in ED index order.
    pub fn assembled_plan(&self, topology: &Topology) -> Option<OffloadPlan> {
        let mut shares = Vec::new();
        let mut uplink_share = Vec::new();
        for ed in topology.eds() {
            let a = self.nodes[&ed.id].plan.as_ref()?;
            let entry = a.entries.iter().find(|e| e.ed == ed.id)?;
            shares.push(entry.shares);
            uplink_share.push(entry.uplink_share);
        }
        Some(OffloadPlan { shares, uplink_share })
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub log: Vec<Event>,
    /// `None` when planning was aborted.
    pub plan: Option<OffloadPlan>,
    pub states: BTreeMap<String, NodeState>,
}

/// Run the task set-up with default options. Devices missing from
/// `participation` participate.
pub fn run_schedule(topology: &Topology, workload: &Workload, participation: &BTreeMap<String, bool>) -> ScheduleOutcome {
    run_schedule_with(topology, workload, participation, &ScheduleOptions::default())
}

pub fn run_schedule_with(
    topology: &Topology,
    workload: &Workload,
    participation: &BTreeMap<String, bool>,
    opts: &ScheduleOptions,
) -> ScheduleOutcome {
    let mut s = Scheduler::new(topology, workload, participation, opts);
    s.establish();
    let plan = s.plan().map(|sol| sol.plan.clone());
    ScheduleOutcome { log: s.log, plan, states: s.nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AccessPoint, DeviceSpec, LinkSpec};

    fn topo() -> Topology {
        let ap = |id: &str| AccessPoint {
            device: DeviceSpec::ap(id, 3.6e9, "cc"),
            wireless: LinkSpec::wireless(5e6, 2.0),
            wired: LinkSpec::wired(8e6),
        };
        let eds = vec![
            DeviceSpec::ed("ed0", 1e9, "ap0"),
            DeviceSpec::ed("ed1", 1e9, "ap0"),
            DeviceSpec::ed("ed2", 1e9, "ap1"),
            DeviceSpec::ed("ed3", 1e9, "ap1"),
        ];
        Topology::new(eds, vec![ap("ap0"), ap("ap1")], DeviceSpec::cc("cc", 3.6e10)).unwrap()
    }

    fn wl() -> Workload {
        Workload::new(2e6, 1.0, 0.1, 1000.0)
    }

    fn count(log: &[Event], v: Variant) -> usize {
        log.iter().filter(|e| matches!(&e.kind, EventKind::Delivered { variant, .. } if *variant == v)).count()
    }

    #[test]
    fn full_participation_message_counts() {
        let out = run_schedule(&topo(), &wl(), &BTreeMap::new());
        assert_eq!(count(&out.log, Variant::TaskNotification), 6);
        assert_eq!(count(&out.log, Variant::Registration), 6);
        assert_eq!(count(&out.log, Variant::PlanAssignment), 6);
        assert_eq!(out.plan.unwrap(), tato_multi(&topo(), &wl()).unwrap().plan);
        check_phase_safety(&out.log).unwrap();
        assert!(out.states.values().all(|n| n.phase == Phase::Processing));
    }

    #[test]
    fn ed_answers_notification_with_registration() {
        let states = initial_states(&topo(), &wl(), &BTreeMap::new(), &ScheduleOptions::default());
        let ed = &states["ed0"];
        let msg = Message::new("ap0", "ed0", Payload::TaskNotification { task: 1 });
        let step = step_node(ed, &Input::Deliver(msg)).unwrap();
        assert_eq!(step.state.phase, Phase::Notified);
        assert_eq!(step.outbound.len(), 1);
        assert_eq!(step.outbound[0].receiver, "ap0");
        assert_eq!(step.outbound[0].payload.variant(), Variant::Registration);
    }

    #[test]
    fn duplicate_assignment_rejected() {
        let mut s = Scheduler::new(&topo(), &wl(), &BTreeMap::new(), &ScheduleOptions::default());
        s.input("cc", Input::Notify);
        s.run_until_quiescent();
        let ed = s.nodes["ed1"].clone();
        assert_eq!(ed.phase, Phase::Planned);
        let again = Message::new("ap0", "ed1", Payload::PlanAssignment(ed.plan.clone().unwrap()));
        let err = step_node(&ed, &Input::Deliver(again)).unwrap_err();
        assert_eq!(err.phase, Phase::Planned);
    }

    #[test]
    fn ap_aggregates_children() {
        let mut s = Scheduler::new(&topo(), &wl(), &BTreeMap::new(), &ScheduleOptions::default());
        s.input("cc", Input::Notify);
        s.run_until_quiescent();
        let regs: Vec<_> = s
            .log
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Delivered { sender, receiver, variant: Variant::Registration } => Some((sender.clone(), receiver.clone())),
                _ => None,
            })
            .filter(|(_, r)| r == "cc")
            .collect();
        assert_eq!(regs, vec![("ap0".to_string(), "cc".to_string()), ("ap1".to_string(), "cc".to_string())]);
        assert_eq!(s.cc_state().planner.as_ref().unwrap().registry.len(), 6);
    }

    #[test]
    fn declining_ed_gets_no_ed_share() {
        let part = BTreeMap::from([("ed2".to_string(), false)]);
        let out = run_schedule(&topo(), &wl(), &part);
        let plan = out.plan.unwrap();
        assert_eq!(plan.shares[2].ed, 0.0);
        let sub = participant_topology(&topo(), |id| id != "ed2");
        assert_eq!(plan, tato_multi(&sub, &wl()).unwrap().plan);
    }

    #[test]
    fn cloud_only_plans_nothing() {
        let t = Topology::cloud_only(DeviceSpec::cc("cc", 1e9)).unwrap();
        let out = run_schedule(&t, &wl(), &BTreeMap::new());
        assert_eq!(count(&out.log, Variant::TaskNotification), 0);
        let plan = out.plan.unwrap();
        assert!(plan.shares.is_empty());
        assert_eq!(out.states["cc"].phase, Phase::Processing);
        check_phase_safety(&out.log).unwrap();
    }

    #[test]
    fn nothing_can_compute_aborts() {
        let t = topo().with_cpu("cc", 0.0).unwrap();
        let part: BTreeMap<_, _> = ["ap0", "ap1", "ed0", "ed1", "ed2", "ed3"].iter().map(|i| (i.to_string(), false)).collect();
        let out = run_schedule(&t, &wl(), &part);
        assert!(out.plan.is_none());
        assert!(out.log.iter().any(|e| matches!(e.kind, EventKind::Failure { .. })));
        check_phase_safety(&out.log).unwrap();
    }

    #[test]
    fn silent_ed_times_out() {
        let opts = ScheduleOptions { silent: BTreeSet::from(["ed3".to_string()]), ..Default::default() };
        let out = run_schedule_with(&topo(), &wl(), &BTreeMap::new(), &opts);
        assert!(out.log.iter().any(|e| matches!(&e.kind, EventKind::Timeout { node } if node == "ap1")));
        let sub = participant_topology(&topo(), |id| id != "ed3");
        assert_eq!(out.plan.unwrap(), tato_multi(&sub, &wl()).unwrap().plan);
        assert_eq!(out.states["ed3"].phase, Phase::Idle);
    }

    #[test]
    fn small_drift_is_ignored_large_drop_replans() {
        let mut s = Scheduler::new(&topo(), &wl(), &BTreeMap::new(), &ScheduleOptions::default());
        s.establish();
        let cc = s.cc_state().clone();
        let same = report_of(&topo(), "ap0");
        assert!(matches!(resource_update(&cc, &[same.clone()]).unwrap().1, ReplanDecision::Keep { max_change } if max_change == 0.0));
        let drift = ResourceReport { wired_bps: Some(8e6 * 0.99), ..same.clone() };
        assert!(matches!(resource_update(&cc, &[drift]).unwrap().1, ReplanDecision::Keep { .. }));
        let drop = ResourceReport { wired_bps: Some(4e6), ..same };
        let (next, d) = resource_update(&cc, &[drop]).unwrap();
        let ReplanDecision::Replan { version, solution, messages, .. } = d else { panic!("expected replan") };
        assert_eq!(version, 2);
        assert_eq!(messages.len(), 2);
        let updated = topo().with_ap_links("ap0", None, Some(4e6)).unwrap();
        assert_eq!(solution, tato_multi(&updated, &wl()).unwrap());
        assert_eq!(next.planner.unwrap().version, 2);
    }

    #[test]
    fn periodic_reestimation_replans_in_processing() {
        let mut s = Scheduler::new(&topo(), &wl(), &BTreeMap::new(), &ScheduleOptions::default());
        s.establish();
        let slower = topo().with_ap_links("ap1", None, Some(4e6)).unwrap();
        for p in 0..4 {
            s.period(p, &topo(), &wl());
        }
        assert!(!s.log.iter().any(|e| matches!(e.kind, EventKind::Replan { .. })));
        s.period(4, &slower, &wl());
        assert!(s.log.iter().any(|e| matches!(e.kind, EventKind::Replan { version: 2, .. })));
        for ed in ["ed0", "ed1", "ed2", "ed3"] {
            let n = &s.nodes[ed];
            assert_eq!(n.plan.as_ref().unwrap().version, 2);
            assert_eq!(n.assignments, 2);
            assert!(n.env_token.is_some());
        }
        assert_eq!(s.assembled_plan(&topo()).unwrap(), tato_multi(&slower, &wl()).unwrap().plan);
        assert_eq!(s.cc_state().planner.as_ref().unwrap().results.len(), 5);
        check_phase_safety(&s.log).unwrap();
    }

    #[test]
    fn jsonl_records() {
        let out = run_schedule(&topo(), &wl(), &BTreeMap::new());
        let text = to_jsonl(&out.log);
        let first_delivery = text.lines().find(|l| l.contains("delivered")).unwrap();
        let v: serde_json::Value = serde_json::from_str(first_delivery).unwrap();
        assert_eq!(v["sender"], "cc");
        assert_eq!(v["variant"], "TaskNotification");
        assert!(v["seq"].is_u64());
    }
}
