use std::collections::{BTreeMap, BTreeSet};

use edgeflow_core::model::{Layer, Topology, Workload};
use edgeflow_core::oracle::optimal_tmax_bisect;
use edgeflow_core::protocol::{
    check_phase_safety, participant_topology, report_of, resource_update, run_schedule_with, EventKind, ReplanDecision,
    ScheduleOptions, Scheduler,
};
use edgeflow_core::random::{scenario, ScenarioShape};
use edgeflow_core::tato::tato_multi;
use edgeflow_core::Instance;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn draw(seed: u64) -> (Topology, Workload, BTreeMap<String, bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, w) = scenario(&mut rng, &ScenarioShape::default());
    let ids = t.aps().iter().map(|a| a.device.id.clone()).chain(t.eds().iter().map(|e| e.id.clone()));
    let part = ids.map(|id| (id, rng.gen_bool(0.7))).collect();
    (t, w, part)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn schedule_invariants(seed in any::<u64>(), order in any::<u64>()) {
        let (t, w, part) = draw(seed);
        let opts = ScheduleOptions { delivery_seed: Some(order), ..Default::default() };
        let out = run_schedule_with(&t, &w, &part, &opts);
        check_phase_safety(&out.log).map_err(TestCaseError::fail)?;
        let rejected = out.log.iter().filter(|e| matches!(e.kind, EventKind::Rejected { .. })).count();
        prop_assert_eq!(rejected, 0);

        let sub = participant_topology(&t, |id| part.get(id).copied().unwrap_or(true));
        let expect = tato_multi(&sub, &w).unwrap().plan;
        prop_assert_eq!(out.plan.as_ref(), Some(&expect));

        for n in out.states.values().filter(|n| n.role != Layer::Cc) {
            prop_assert_eq!(n.assignments, 1, "{}", n.id);
            prop_assert!(n.plan.is_some() && n.env_token.is_some());
        }
        for (e, ed) in t.eds().iter().enumerate() {
            let entry = &out.states[&ed.id].plan.as_ref().unwrap().entries[0];
            prop_assert_eq!(entry.shares, expect.shares[e]);
            prop_assert_eq!(entry.uplink_share, expect.uplink_share[e]);
            if !part[&ed.id] {
                prop_assert_eq!(entry.shares.ed, 0.0);
            }
        }

        // Any FIFO-respecting order ends in the same place.
        let in_order = run_schedule_with(&t, &w, &part, &ScheduleOptions::default());
        prop_assert_eq!(&in_order.states, &out.states);
        prop_assert_eq!(in_order.plan, out.plan);
    }

    #[test]
    fn halved_rate_replans_to_the_oracle(seed in any::<u64>(), which in any::<prop::sample::Index>()) {
        let (t, w, _) = draw(seed);
        let mut s = Scheduler::new(&t, &w, &BTreeMap::new(), &ScheduleOptions::default());
        s.establish();
        let m = which.index(t.aps().len());
        let ap = t.aps()[m].device.id.clone();
        let before = report_of(&t, &ap);
        let halved = edgeflow_core::protocol::ResourceReport { wired_bps: before.wired_bps.map(|r| r * 0.5), ..before };
        let (_, decision) = resource_update(s.cc_state(), &[halved.clone()]).unwrap();
        let ReplanDecision::Replan { solution, version, .. } = decision else {
            return Err(TestCaseError::fail("50% change must replan"));
        };
        prop_assert_eq!(version, 2);
        let updated = t.with_ap_links(&ap, None, halved.wired_bps).unwrap();
        let star = optimal_tmax_bisect(&Instance::new(&updated, &w).unwrap(), 1e-12).unwrap().t_max;
        prop_assert!((solution.t_max() - star).abs() <= 1e-6 * star);
    }
}

#[test]
fn silent_devices_count_as_declined() {
    for seed in 0..40 {
        let (t, w, _) = draw(seed);
        let silent: BTreeSet<String> = t.eds().iter().step_by(2).map(|e| e.id.clone()).collect();
        let opts = ScheduleOptions { silent: silent.clone(), ..Default::default() };
        let out = run_schedule_with(&t, &w, &BTreeMap::new(), &opts);
        check_phase_safety(&out.log).unwrap();
        let sub = participant_topology(&t, |id| !silent.contains(id));
        assert_eq!(out.plan.unwrap(), tato_multi(&sub, &w).unwrap().plan);
    }
}

#[test]
fn event_log_lines_parse() {
    let (t, w, part) = draw(3);
    let out = run_schedule_with(&t, &w, &part, &ScheduleOptions::default());
    let text = edgeflow_core::protocol::to_jsonl(&out.log);
    assert_eq!(text.lines().count(), out.log.len());
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seq"], i as u64);
        if v["event"] == "delivered" {
            assert!(v["sender"].is_string() && v["receiver"].is_string() && v["variant"].is_string());
        }
    }
}
