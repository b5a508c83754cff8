//! Agreement between the closed-form optimizer and the bisection oracle on
//! random instances.

use edgeflow_core::model::Instance;
use edgeflow_core::oracle::optimal_tmax_bisect;
use edgeflow_core::random::{scenario, ScenarioShape};
use edgeflow_core::tato::solve;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const SINGLE_TOL: f64 = 1e-6;
pub const MULTI_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub cases: usize,
    pub worst_rel: f64,
    pub failures: usize,
}

impl Agreement {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compare on `cases` instances drawn from `shape`; instance `i` uses seed
/// `seed + i`.
pub fn agreement(seed: u64, cases: usize, shape: &ScenarioShape, tol: f64) -> Agreement {
    let rels: Vec<f64> = (0..cases as u64)
        .into_par_iter()
        .map(|i| {
            let (t, w) = scenario(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i)), shape);
            let inst = match Instance::new(&t, &w) {
                Ok(inst) => inst,
                Err(_) => return f64::INFINITY,
            };
            match (solve(&inst), optimal_tmax_bisect(&inst, 1e-12)) {
                (Ok(sol), Ok(opt)) => (sol.t_max() - opt.t_max).abs() / opt.t_max.max(f64::MIN_POSITIVE),
                _ => f64::INFINITY,
            }
        })
        .collect();
    Agreement {
        cases,
        worst_rel: rels.iter().copied().fold(0.0, f64::max),
        failures: rels.iter().filter(|r| !(**r <= tol)).count(),
    }
}

pub fn single_shape() -> ScenarioShape {
    ScenarioShape { eds: 1..=1, aps: 1..=1, ..Default::default() }
}
