use edgeflow_core::model::{Burst, Instance, Topology, Workload};
use edgeflow_core::random::{scenario, ScenarioShape};
use edgeflow_core::sim::{fluid_growth, metrics, simulate, SimConfig};
use edgeflow_core::tato::{baseline_plan, tato_multi, Baseline, Solution};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A random scenario whose period puts the TATO plan at `load` times the period.
fn loaded(seed: u64, load: f64) -> (Topology, Workload, Solution) {
    let (t, w) = scenario(&mut ChaCha8Rng::seed_from_u64(seed), &ScenarioShape::default());
    let sol = tato_multi(&t, &w).unwrap();
    let wl = Workload { period_s: sol.t_max() / load, ..w };
    (t, wl, sol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conservation_and_nonnegativity(seed in any::<u64>(), load in 0.2f64..2.5, burst in 1.0f64..6.0) {
        let (t, mut wl, sol) = loaded(seed, load);
        wl.bursts = vec![Burst { period: 4, multiplier: burst }];
        let cfg = SimConfig { ticks_per_period: 20, periods: 12, warmup_periods: 2 };
        let tr = simulate(&t, &wl, &sol.plan, &cfg).unwrap();
        prop_assert!(tr.max_conservation_error() <= 1e-6);
        prop_assert!(tr.occupancy.iter().all(|&b| b >= 0.0));
        prop_assert_eq!(tr.occupancy.len(), tr.total_backlog.len() * tr.stages.len());
    }

    #[test]
    fn below_capacity_is_stable_and_aligned(seed in any::<u64>(), load in 0.1f64..0.9) {
        let (t, wl, sol) = loaded(seed, load);
        let cfg = SimConfig { ticks_per_period: 50, periods: 20, warmup_periods: 3 };
        let tr = simulate(&t, &wl, &sol.plan, &cfg).unwrap();
        let m = metrics(&tr, &wl);
        prop_assert!(m.stable);
        prop_assert!(m.avg_finish_time_s >= sol.t_max() * (1.0 - 1e-9));
        prop_assert!(m.avg_finish_time_s <= sol.t_max() + 5.0 * tr.dt);
        prop_assert!((m.idle_slack_s - (wl.period_s - m.avg_finish_time_s)).abs() <= 1e-9 * wl.period_s);
    }

    #[test]
    fn above_capacity_grows_at_the_fluid_rate(seed in any::<u64>(), load in 1.1f64..3.0) {
        let (t, wl, sol) = loaded(seed, load);
        let cfg = SimConfig { ticks_per_period: 50, periods: 30, warmup_periods: 5 };
        let tr = simulate(&t, &wl, &sol.plan, &cfg).unwrap();
        let m = metrics(&tr, &wl);
        prop_assert!(!m.stable);
        let inst = Instance::new(&t, &wl).unwrap();
        let expect = fluid_growth(&inst, &sol.plan, wl.period_s).unwrap();
        prop_assert!((m.backlog_slope_bits_per_period - expect).abs() <= 0.05 * expect,
            "slope {} expected {}", m.backlog_slope_bits_per_period, expect);
    }

    #[test]
    fn baselines_follow_the_stability_rule(seed in any::<u64>(), pick in 0usize..3) {
        let (t, w) = scenario(&mut ChaCha8Rng::seed_from_u64(seed), &ScenarioShape::default());
        let inst = Instance::new(&t, &w).unwrap();
        let plan = baseline_plan(Baseline::ALL[pick], &inst);
        let tm = inst.stage_times(&plan).unwrap().t_max;
        prop_assume!(tm.is_finite() && tm > 0.0);
        for (load, stable) in [(0.7, true), (1.4, false)] {
            let wl = Workload { period_s: tm / load, ..w.clone() };
            let cfg = SimConfig { ticks_per_period: 40, periods: 24, warmup_periods: 3 };
            let m = metrics(&simulate(&t, &wl, &plan, &cfg).unwrap(), &wl);
            prop_assert_eq!(m.stable, stable);
        }
    }
}

#[test]
fn identical_inputs_identical_traces() {
    let (t, mut wl, sol) = loaded(11, 0.85);
    wl.bursts = vec![Burst { period: 3, multiplier: 2.0 }, Burst { period: 9, multiplier: 4.0 }];
    let cfg = SimConfig { ticks_per_period: 33, periods: 25, warmup_periods: 2 };
    let a = simulate(&t, &wl, &sol.plan, &cfg).unwrap();
    let b = simulate(&t, &wl, &sol.plan, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn doubling_ticks_converges() {
    for seed in 0..10 {
        let (t, wl, sol) = loaded(seed, 0.6);
        let avg = |ticks| {
            let cfg = SimConfig { ticks_per_period: ticks, periods: 10, warmup_periods: 2 };
            metrics(&simulate(&t, &wl, &sol.plan, &cfg).unwrap(), &wl).avg_finish_time_s
        };
        for ticks in [25, 50, 100, 200] {
            let (a, b) = (avg(ticks), avg(2 * ticks));
            assert!((a - b).abs() / b < 2.0 / ticks as f64, "seed {seed} ticks {ticks}: {a} vs {b}");
        }
    }
}

#[test]
fn one_entry_per_burst() {
    let (t, mut wl, sol) = loaded(5, 0.5);
    wl.bursts = vec![Burst { period: 8, multiplier: 2.0 }];
    let cfg = SimConfig { ticks_per_period: 50, periods: 30, warmup_periods: 3 };
    let m = metrics(&simulate(&t, &wl, &sol.plan, &cfg).unwrap(), &wl);
    assert_eq!(m.recoveries.len(), 1);
    assert!(m.stable);
}

#[test]
fn growth_tracks_the_fluid_rate_across_many_configs() {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let load = 1.05 + (seed % 20) as f64 * 0.1;
        let (t, wl, sol) = loaded(1_000 + seed, load);
        let cfg = SimConfig { ticks_per_period: 50, periods: 40, warmup_periods: 5 };
        let m = metrics(&simulate(&t, &wl, &sol.plan, &cfg).unwrap(), &wl);
        let expect = fluid_growth(&Instance::new(&t, &wl).unwrap(), &sol.plan, wl.period_s).unwrap();
        worst = worst.max((m.backlog_slope_bits_per_period - expect).abs() / expect);
    }
    assert!(worst <= 0.02, "worst relative gap {worst}");
}
