//! Independent solvers for the min-max offloading problem, used to check the
//! optimizer: a bisection on `T` over an exact feasibility test, and an
//! exhaustive lattice search for small instances.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, OffloadPlan, Shares};
use crate::tato::allocate_wireless;

/// Lattice points evaluated by [`grid_search`] before it refuses.
pub const GRID_LIMIT: f64 = 6e8;

const FIT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("every corner plan and every probe up to 1e300 s is infeasible")]
    Unsolvable,
    #[error("compression ratio {0} > 1: greedy feasibility needs processing to compress")]
    Uncompressing(f64),
    #[error("lattice has {points:.3e} points (limit {limit:.1e}); use fewer EDs or a coarser step than 1/{steps}")]
    TooLarge { points: f64, limit: f64, steps: u32 },
    #[error("grid resolution must be at least one step")]
    ZeroSteps,
}

/// Whether some plan keeps every stage within `t`.
///
/// Each ED processes as much as it can by `t`, each AP then takes as much of
/// the remaining raw data as it can, and the CC gets the rest. With a
/// compression ratio of at most one this ordering never increases any hop's
/// load, so it is feasible exactly when some plan is.
pub fn feasible_at(inst: &Instance, t: f64) -> bool {
    greedy(inst, t).feasible
}

struct Greedy {
    feasible: bool,
    shares: Vec<Shares>,
}

fn cap(t: f64, rate: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        t * rate
    }
}

fn fits(load: f64, capacity: f64) -> bool {
    load <= capacity + FIT_SLACK * capacity
}

fn greedy(inst: &Instance, t: f64) -> Greedy {
    let compression = inst.compression;
    let r = &inst.rates;
    let mut shares = vec![Shares::default(); inst.num_eds()];
    let mut feasible = true;
    let mut cc_raw = 0.0;
    for m in 0..inst.num_aps() {
        let mut uplink = 0.0;
        let mut raw = 0.0;
        let mut done_below = 0.0;
        let eds: Vec<usize> = inst.eds_of(m).collect();
        for &e in &eds {
            let v = inst.volumes[e];
            let ed = if v == 0.0 { 1.0 } else { (cap(t, r.ed_compute[e]) / v).min(1.0) };
            shares[e].ed = ed;
            uplink += (compression * ed + (1.0 - ed)) * v;
            raw += (1.0 - ed) * v;
            done_below += ed * v;
        }
        let at_ap = raw.min(cap(t, r.ap_compute[m]));
        let to_cc = raw - at_ap;
        let wired = compression * (done_below + at_ap) + to_cc;
        feasible &= fits(uplink, cap(t, r.ap_wireless[m])) && fits(wired, cap(t, r.ap_wired[m]));
        cc_raw += to_cc;
        let frac = if raw > 0.0 { at_ap / raw } else { 0.0 };
        for &e in &eds {
            let rest = 1.0 - shares[e].ed;
            shares[e].ap = rest * frac;
            shares[e].cc = (rest - shares[e].ap).max(0.0);
        }
    }
    feasible &= fits(cc_raw, cap(t, r.cc_compute));
    Greedy { feasible, shares }
}

fn with_uplink_shares(inst: &Instance, shares: Vec<Shares>) -> OffloadPlan {
    let mut uplink_share = vec![0.0; inst.num_eds()];
    for m in 0..inst.num_aps() {
        let eds: Vec<usize> = inst.eds_of(m).collect();
        let loads: Vec<f64> = eds.iter().map(|&e| shares[e].wireless_coeff(inst.compression) * inst.volumes[e]).collect();
        for (e, a) in eds.into_iter().zip(allocate_wireless(&loads)) {
            uplink_share[e] = a;
        }
    }
    OffloadPlan { shares, uplink_share }
}

/// The greedy plan at `t`; feasible iff [`feasible_at`] holds.
pub fn witness(inst: &Instance, t: f64) -> OffloadPlan {
    with_uplink_shares(inst, greedy(inst, t).shares)
}

/// `T_max` of the three corner plans (pure cloud, pure edge, cloudlet).
pub fn corner_times(inst: &Instance) -> [f64; 3] {
    [Shares::PURE_CLOUD, Shares::PURE_EDGE, Shares::CLOUDLET].map(|s| {
        let plan = with_uplink_shares(inst, vec![s; inst.num_eds()]);
        inst.stage_times_unchecked(&plan).t_max
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub t_max: f64,
    pub plan: OffloadPlan,
}

/// Smallest feasible `T` to within relative width `rel_tol`, with a witness.
pub fn optimal_tmax_bisect(inst: &Instance, rel_tol: f64) -> Result<Optimum, OracleError> {
    if inst.compression > 1.0 {
        return Err(OracleError::Uncompressing(inst.compression));
    }
    if feasible_at(inst, 0.0) {
        return Ok(Optimum { t_max: 0.0, plan: witness(inst, 0.0) });
    }
    let mut hi = corner_times(inst).into_iter().fold(f64::INFINITY, f64::min);
    if !hi.is_finite() {
        // Mixed plans can be finite even when every corner is not.
        hi = 1.0;
        while !feasible_at(inst, hi) {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(OracleError::Unsolvable);
            }
        }
    }
    let mut lo = 0.0;
    for _ in 0..4096 {
        if hi - lo <= rel_tol * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible_at(inst, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Optimum { t_max: hi, plan: witness(inst, hi) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub t_max: f64,
    pub plan: OffloadPlan,
    pub points: u64,
}

/// Lattice point `k` of the per-ED share simplex with `n` steps, in
/// lexicographic order of `(ed, ap)`.
fn lattice(n: u32) -> Vec<Shares> {
    let nf = n as f64;
    let mut pts = Vec::with_capacity(((n + 1) * (n + 2) / 2) as usize);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let k = n - i - j;
            pts.push(Shares::new(i as f64 / nf, j as f64 / nf, k as f64 / nf));
        }
    }
    pts
}

/// Per-ED, per-lattice-point contribution to the aggregate stage loads.
#[derive(Clone, Copy)]
struct Contribution {
    ed_time: f64,
    uplink: f64,
    ap_work: f64,
    wired: f64,
    cc_work: f64,
}

struct Grid<'a> {
    /// Best value found by any branch, as `f64` bits (monotone for `>= 0`).
    shared: AtomicU64,
    inst: &'a Instance,
    contrib: Vec<Vec<Contribution>>,
    width: usize,
}

// Accumulator layout: [max ED time, CC work, (uplink, AP work, wired) per AP].
impl Grid<'_> {
    fn push(&self, from: &[f64], to: &mut [f64], e: usize, k: usize) {
        to.copy_from_slice(from);
        let c = self.contrib[e][k];
        let m = self.inst.ed_ap[e];
        to[0] = to[0].max(c.ed_time);
        to[1] += c.cc_work;
        to[2 + 3 * m] += c.uplink;
        to[3 + 3 * m] += c.ap_work;
        to[4 + 3 * m] += c.wired;
    }

    fn t_max(&self, acc: &[f64]) -> f64 {
        let r = &self.inst.rates;
        let mut t = acc[0].max(crate::model::duration(acc[1], r.cc_compute));
        for m in 0..self.inst.num_aps() {
            t = t
                .max(crate::model::duration(acc[2 + 3 * m], r.ap_wireless[m]))
                .max(crate::model::duration(acc[3 + 3 * m], r.ap_compute[m]))
                .max(crate::model::duration(acc[4 + 3 * m], r.ap_wired[m]));
        }
        t
    }

    fn descend(&self, e: usize, levels: &mut [Vec<f64>], choice: &mut [usize], best: &mut (f64, Vec<usize>)) {
        let n = self.inst.num_eds();
        if e == n {
            let t = self.t_max(&levels[n]);
            if t < best.0 {
                *best = (t, choice.to_vec());
                self.shared.fetch_min(t.to_bits(), Ordering::Relaxed);
            }
            return;
        }
        // Loads only grow deeper down, so a partial bottleneck already at this
        // branch's best cannot improve it. Other branches only prune strictly
        // worse subtrees, which keeps tie-breaking independent of scheduling.
        if e > 0 {
            let t = self.t_max(&levels[e]);
            if t >= best.0 || t > f64::from_bits(self.shared.load(Ordering::Relaxed)) {
                return;
            }
        }
        for k in 0..self.width {
            let (head, tail) = levels.split_at_mut(e + 1);
            self.push(&head[e], &mut tail[0], e, k);
            choice[e] = k;
            self.descend(e + 1, levels, choice, best);
        }
    }
}

/// Exhaustive search over shares on the simplex lattice with step `1/steps`.
///
/// Wireless fractions follow [`allocate_wireless`], so every ED under an AP
/// sees the same uplink time. Ties go to the lexicographically first plan.
pub fn grid_search(inst: &Instance, steps: u32) -> Result<GridResult, OracleError> {
    if steps == 0 {
        return Err(OracleError::ZeroSteps);
    }
    let pts = lattice(steps);
    let n = inst.num_eds();
    let points = (pts.len() as f64).powi(n as i32);
    if points > GRID_LIMIT {
        return Err(OracleError::TooLarge { points, limit: GRID_LIMIT, steps });
    }
    let compression = inst.compression;
    let contrib = (0..n)
        .map(|e| {
            let v = inst.volumes[e];
            pts.iter()
                .map(|s| Contribution {
                    ed_time: crate::model::duration(s.ed * v, inst.rates.ed_compute[e]),
                    uplink: s.wireless_coeff(compression) * v,
                    ap_work: s.ap * v,
                    wired: s.wired_coeff(compression) * v,
                    cc_work: s.cc * v,
                })
                .collect()
        })
        .collect();
    let grid = Grid { shared: AtomicU64::new(f64::INFINITY.to_bits()), inst, contrib, width: pts.len() };
    let acc_len = 2 + 3 * inst.num_aps();
    let run_from = |first: Option<usize>| {
        let mut levels = vec![vec![0.0; acc_len]; n + 1];
        let mut choice = vec![0; n];
        let mut best = (f64::INFINITY, vec![0; n]);
        match first {
            Some(k) => {
                let (head, tail) = levels.split_at_mut(1);
                grid.push(&head[0], &mut tail[0], 0, k);
                choice[0] = k;
                grid.descend(1, &mut levels, &mut choice, &mut best);
            }
            None => grid.descend(0, &mut levels, &mut choice, &mut best),
        }
        best
    };
    let best = if n == 0 {
        run_from(None)
    } else {
        (0..pts.len())
            .into_par_iter()
            .map(|k| run_from(Some(k)))
            .reduce(
                || (f64::INFINITY, vec![usize::MAX; n]),
                |a, b| match a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)) {
                    std::cmp::Ordering::Greater => b,
                    _ => a,
                },
            )
    };
    let shares = best.1.iter().map(|&k| pts[k]).collect();
    Ok(GridResult { t_max: best.0, plan: with_uplink_shares(inst, shares), points: points as u64 })
}

/// Upper bound on `T_grid - T*` for step `1/steps`: rounding any share vector
/// onto the lattice (flooring the ED and AP shares) changes any stage's
/// coefficient by at most `4/steps`, and each stage load sums over at most
/// every ED's volume.
pub fn lattice_bound(inst: &Instance, steps: u32) -> f64 {
    let r = &inst.rates;
    let slowest = r
        .ed_compute
        .iter()
        .chain(&r.ap_compute)
        .chain(&r.ap_wireless)
        .chain(&r.ap_wired)
        .chain(std::iter::once(&r.cc_compute))
        .copied()
        .filter(|x| *x > 0.0)
        .fold(f64::INFINITY, f64::min);
    let total: f64 = inst.volumes.iter().sum();
    4.0 * total / slowest / steps as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RateTable;

    fn single(compute: [f64; 3], links: [f64; 2], v: f64, compression: f64) -> Instance {
        Instance::from_parts(
            RateTable {
                ed_compute: vec![compute[0]],
                ap_compute: vec![compute[1]],
                ap_wireless: vec![links[0]],
                ap_wired: vec![links[1]],
                cc_compute: compute[2],
            },
            vec![0],
            vec![v],
            compression,
        )
        .unwrap()
    }

    fn hand() -> Instance {
        single([10.0, 36.0, 360.0], [20.0, 8.0], 100.0, 0.1)
    }

    #[test]
    fn feasibility_brackets_hand_optimum() {
        let inst = hand();
        assert!(feasible_at(&inst, 3.4483));
        assert!(!feasible_at(&inst, 3.3));
        assert!(!feasible_at(&inst, 0.0));
        let cloud = corner_times(&inst)[0];
        assert!(feasible_at(&inst, cloud));
    }

    #[test]
    fn bisection_hits_hand_optimum() {
        let opt = optimal_tmax_bisect(&hand(), 1e-9).unwrap();
        assert!((opt.t_max - 50.0 / 14.5).abs() <= 1e-8 * opt.t_max);
        let st = hand().stage_times(&opt.plan).unwrap();
        assert!(st.t_max <= opt.t_max * (1.0 + 1e-9));
    }

    #[test]
    fn bisection_symmetric() {
        let inst = single([4.0, 4.0, 4.0], [f64::INFINITY, f64::INFINITY], 12.0, 0.5);
        let opt = optimal_tmax_bisect(&inst, 1e-10).unwrap();
        assert!((opt.t_max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_corners_infinite_but_mix_feasible() {
        // ED0 can only be helped by its AP, ED1 only computes itself; CC is dead.
        let inst = Instance::from_parts(
            RateTable {
                ed_compute: vec![0.0, 5.0],
                ap_compute: vec![5.0, 0.0],
                ap_wireless: vec![10.0, 10.0],
                ap_wired: vec![10.0, 10.0],
                cc_compute: 0.0,
            },
            vec![0, 1],
            vec![10.0, 10.0],
            0.5,
        )
        .unwrap();
        assert!(corner_times(&inst).iter().all(|t| t.is_infinite()));
        let opt = optimal_tmax_bisect(&inst, 1e-9).unwrap();
        assert!((opt.t_max - 2.0).abs() < 1e-8);
    }

    #[test]
    fn unsolvable_when_nothing_computes() {
        let inst = single([0.0, 0.0, 0.0], [1.0, 1.0], 1.0, 0.5);
        assert_eq!(optimal_tmax_bisect(&inst, 1e-9).unwrap_err(), OracleError::Unsolvable);
    }

    #[test]
    fn grid_single_fine() {
        let g = grid_search(&hand(), 1000).unwrap();
        let t_star = 50.0 / 14.5;
        assert!(g.t_max >= t_star * (1.0 - 1e-12));
        assert!((g.t_max - t_star) / t_star <= 1e-3);
    }

    #[test]
    fn grid_coarsest_is_corner_or_center() {
        let inst = hand();
        let g = grid_search(&inst, 1).unwrap();
        assert_eq!(g.points, 3);
        let best_corner = corner_times(&inst).into_iter().fold(f64::INFINITY, f64::min);
        assert_eq!(g.t_max, best_corner);
    }

    #[test]
    fn grid_refinement_nests() {
        let inst = single([3.0, 7.0, 40.0], [9.0, 4.0], 20.0, 0.2);
        let mut last = f64::INFINITY;
        for steps in [2, 4, 8, 16, 32, 64] {
            let g = grid_search(&inst, steps).unwrap();
            assert!(g.t_max <= last);
            last = g.t_max;
        }
    }

    #[test]
    fn grid_refuses_big_instances() {
        let inst = Instance::from_parts(
            RateTable {
                ed_compute: vec![1.0; 3],
                ap_compute: vec![1.0],
                ap_wireless: vec![1.0],
                ap_wired: vec![1.0],
                cc_compute: 1.0,
            },
            vec![0; 3],
            vec![1.0; 3],
            0.5,
        )
        .unwrap();
        let err = grid_search(&inst, 200).unwrap_err();
        assert!(matches!(err, OracleError::TooLarge { .. }));
        assert!(err.to_string().contains("coarser"));
    }

    #[test]
    fn feasibility_is_monotone() {
        let inst = single([3.0, 7.0, 40.0], [9.0, 4.0], 20.0, 0.2);
        let mut seen = false;
        for i in 0..2000 {
            let t = i as f64 * 0.005;
            let f = feasible_at(&inst, t);
            assert!(!seen || f, "lost feasibility at {t}");
            seen |= f;
        }
        assert!(seen);
    }
}
