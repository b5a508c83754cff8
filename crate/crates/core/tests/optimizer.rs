use edgeflow_core::model::{Instance, OffloadPlan, Shares};
use edgeflow_core::oracle::{feasible_at, grid_search, lattice_bound, optimal_tmax_bisect, witness};
use edgeflow_core::random::{scenario, ScenarioShape};
use edgeflow_core::tato::{allocate_wireless, balance_ed, baseline_plan, solve, tato_single, Baseline, SingleParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, shape: &ScenarioShape) -> Instance {
    let (t, w) = scenario(&mut ChaCha8Rng::seed_from_u64(seed), shape);
    Instance::new(&t, &w).unwrap()
}

fn single_shape() -> ScenarioShape {
    ScenarioShape { eds: 1..=1, aps: 1..=1, ..Default::default() }
}

fn params(inst: &Instance) -> SingleParams {
    let r = &inst.rates;
    SingleParams {
        volume: inst.volumes[0],
        compression: inst.compression,
        ed_compute: r.ed_compute[0],
        ed_link: r.ap_wireless[0],
        ap_compute: r.ap_compute[0],
        ap_link: r.ap_wired[0],
        cc_compute: r.cc_compute,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// A random point of the share simplex for each ED plus matching fractions.
fn random_plan(inst: &Instance, raw: &[(f64, f64)]) -> OffloadPlan {
    let shares: Vec<Shares> = raw
        .iter()
        .cycle()
        .take(inst.num_eds())
        .map(|&(a, b)| {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            Shares::new(lo, hi - lo, 1.0 - hi)
        })
        .collect();
    let mut uplink_share = vec![0.0; inst.num_eds()];
    for m in 0..inst.num_aps() {
        let members: Vec<usize> = inst.eds_of(m).collect();
        let loads: Vec<f64> = members.iter().map(|&e| shares[e].wireless_coeff(inst.compression) * inst.volumes[e]).collect();
        for (&e, a) in members.iter().zip(allocate_wireless(&loads)) {
            uplink_share[e] = a;
        }
    }
    OffloadPlan { shares, uplink_share }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tato_dominates_every_baseline(seed in any::<u64>()) {
        let inst = instance(seed, &ScenarioShape::default());
        let t = solve(&inst).unwrap().t_max();
        for kind in Baseline::ALL {
            let b = inst.stage_times(&baseline_plan(kind, &inst)).unwrap().t_max;
            prop_assert!(t <= b + 1e-9 * b, "{kind:?}: {t} > {b}");
        }
    }

    #[test]
    fn single_matches_bisection(seed in any::<u64>()) {
        let inst = instance(seed, &single_shape());
        let star = optimal_tmax_bisect(&inst, 1e-12).unwrap().t_max;
        let single = tato_single(&params(&inst)).unwrap();
        prop_assert!(rel(single.t_max(), star) <= 1e-6);
        prop_assert!(rel(solve(&inst).unwrap().t_max(), single.t_max()) <= 1e-12);
    }

    #[test]
    fn multi_matches_bisection(seed in any::<u64>()) {
        let inst = instance(seed, &ScenarioShape::default());
        let star = optimal_tmax_bisect(&inst, 1e-12).unwrap().t_max;
        let t = solve(&inst).unwrap().t_max();
        prop_assert!(star <= t * (1.0 + 1e-9));
        prop_assert!(rel(t, star) <= 1e-6, "tato {t} oracle {star}");
    }

    #[test]
    fn witness_is_valid_and_tight(seed in any::<u64>()) {
        let inst = instance(seed, &ScenarioShape::default());
        let opt = optimal_tmax_bisect(&inst, 1e-9).unwrap();
        opt.plan.validate(&inst.ed_ap, inst.num_aps()).unwrap();
        let t = inst.stage_times(&opt.plan).unwrap().t_max;
        prop_assert!(t <= opt.t_max * (1.0 + 1e-9) * (1.0 + 1e-12));
    }

    #[test]
    fn feasibility_is_monotone(seed in any::<u64>(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
        let inst = instance(seed, &ScenarioShape::default());
        let star = optimal_tmax_bisect(&inst, 1e-9).unwrap().t_max;
        let (lo, hi) = if a < b { (a * star, b * star) } else { (b * star, a * star) };
        prop_assert!(!feasible_at(&inst, lo) || feasible_at(&inst, hi));
        let w = witness(&inst, hi);
        if feasible_at(&inst, hi) {
            prop_assert!(inst.stage_times(&w).unwrap().t_max <= hi * (1.0 + 1e-9));
        }
    }

    #[test]
    fn rate_scaling_keeps_shares(seed in any::<u64>(), c in 0.01f64..100.0) {
        let inst = instance(seed, &ScenarioShape::default());
        let a = solve(&inst).unwrap();
        let b = solve(&inst.scaled_rates(c)).unwrap();
        prop_assert!(rel(b.t_max() * c, a.t_max()) <= 1e-9);
        for (x, y) in a.plan.shares.iter().zip(&b.plan.shares) {
            prop_assert!((x.ed - y.ed).abs() <= 1e-9 && (x.ap - y.ap).abs() <= 1e-9 && (x.cc - y.cc).abs() <= 1e-9);
        }
    }

    #[test]
    fn volume_scaling_keeps_shares(seed in any::<u64>(), c in 0.01f64..100.0) {
        let inst = instance(seed, &ScenarioShape::default());
        let a = solve(&inst).unwrap();
        let b = solve(&inst.scaled_volumes(c)).unwrap();
        prop_assert!(rel(b.t_max(), a.t_max() * c) <= 1e-9);
        for (x, y) in a.plan.shares.iter().zip(&b.plan.shares) {
            prop_assert!((x.ed - y.ed).abs() <= 1e-9 && (x.ap - y.ap).abs() <= 1e-9 && (x.cc - y.cc).abs() <= 1e-9);
        }
    }

    #[test]
    fn no_plan_beats_step_one(seed in any::<u64>(), raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1)) {
        let inst = instance(seed, &single_shape());
        let p = params(&inst);
        let bound = balance_ed(p.volume, p.compression, p.ed_compute, p.ed_link).time;
        let t = inst.stage_times(&random_plan(&inst, &raw)).unwrap().t_max;
        prop_assert!(t >= bound * (1.0 - 1e-12));
    }

    #[test]
    fn random_plans_never_beat_tato(seed in any::<u64>(), raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..8)) {
        let inst = instance(seed, &ScenarioShape::default());
        let t = solve(&inst).unwrap().t_max();
        let other = inst.stage_times(&random_plan(&inst, &raw)).unwrap().t_max;
        prop_assert!(t <= other * (1.0 + 1e-9));
    }

    #[test]
    fn wired_lower_bound(seed in any::<u64>()) {
        let inst = instance(seed, &ScenarioShape::default());
        let t = solve(&inst).unwrap().t_max();
        for m in 0..inst.num_aps() {
            let v: f64 = inst.eds_of(m).map(|e| inst.volumes[e]).sum();
            prop_assert!(t >= inst.compression * v / inst.rates.ap_wired[m] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn proportional_wireless_is_minimal(loads in prop::collection::vec(0.0f64..100.0, 2..=3)) {
        let uplink_share = allocate_wireless(&loads);
        let worst = |a: &[f64]| loads.iter().zip(a).map(|(l, x)| if *l == 0.0 { 0.0 } else if *x == 0.0 { f64::INFINITY } else { l / x }).fold(0.0, f64::max);
        let best = worst(&uplink_share);
        let n = 100;
        if loads.len() == 2 {
            for i in 0..=n {
                let a = [i as f64 / n as f64, (n - i) as f64 / n as f64];
                prop_assert!(worst(&a) >= best * (1.0 - 1e-12));
            }
        } else {
            for i in 0..=n {
                for j in 0..=n - i {
                    let a = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                    prop_assert!(worst(&a) >= best * (1.0 - 1e-12));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_brackets_from_above(seed in any::<u64>()) {
        let shape = ScenarioShape { eds: 1..=2, aps: 1..=2, ..Default::default() };
        let inst = instance(seed, &shape);
        let star = optimal_tmax_bisect(&inst, 1e-12).unwrap().t_max;
        let steps = 40;
        let g = grid_search(&inst, steps).unwrap();
        prop_assert!(g.t_max >= star * (1.0 - 1e-9));
        prop_assert!(g.t_max <= star + lattice_bound(&inst, steps));
        let finer = grid_search(&inst, 2 * steps).unwrap();
        prop_assert!(finer.t_max <= g.t_max * (1.0 + 1e-12));
    }
}
