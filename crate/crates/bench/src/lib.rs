//! Fixtures shared by the benchmarks.

use edgeflow_core::model::{Instance, Topology, Workload};
use edgeflow_core::random::{scenario, ScenarioShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fixed random tree with `eds` EDs spread over `aps` APs.
pub fn tree(seed: u64, eds: usize, aps: usize) -> (Topology, Workload) {
    let shape = ScenarioShape { eds: eds..=eds, aps: aps..=aps, ..Default::default() };
    scenario(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
}

pub fn instance(seed: u64, eds: usize, aps: usize) -> Instance {
    let (t, w) = tree(seed, eds, aps);
    Instance::new(&t, &w).expect("random trees are valid")
}
