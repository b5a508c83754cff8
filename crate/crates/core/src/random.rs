//! Random scenario generation for property and acceptance suites.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::Rng;

use crate::model::{AccessPoint, DeviceSpec, LinkSpec, Topology, Workload};

#[derive(Debug, Clone)]
pub struct ScenarioShape {
    pub eds: RangeInclusive<usize>,
    pub aps: RangeInclusive<usize>,
    /// Rates and volumes are drawn log-uniformly from `[1, 10^decades]`.
    pub decades: f64,
    pub compression: RangeInclusive<f64>,
}

impl Default for ScenarioShape {
    fn default() -> Self {
        ScenarioShape { eds: 1..=8, aps: 1..=4, decades: 4.0, compression: 0.05..=1.0 }
    }
}

fn log_uniform(rng: &mut impl Rng, decades: f64) -> f64 {
    10f64.powf(rng.gen_range(0.0..=decades))
}

/// Draw a topology and workload. Cycles per bit and spectral efficiency are
/// 1 so every drawn number is directly a bit rate. EDs pick an AP uniformly,
/// so some APs may be left without EDs.
pub fn scenario(rng: &mut impl Rng, shape: &ScenarioShape) -> (Topology, Workload) {
    let n_ed = rng.gen_range(shape.eds.clone());
    let n_ap = rng.gen_range(shape.aps.clone());
    let d = shape.decades;
    let aps: Vec<AccessPoint> = (0..n_ap)
        .map(|m| AccessPoint {
            device: DeviceSpec::ap(format!("ap{m}"), log_uniform(rng, d), "cc"),
            wireless: LinkSpec::wireless(log_uniform(rng, d), 1.0),
            wired: LinkSpec::wired(log_uniform(rng, d)),
        })
        .collect();
    let mut volumes = BTreeMap::new();
    let eds: Vec<DeviceSpec> = (0..n_ed)
        .map(|e| {
            let id = format!("ed{e}");
            volumes.insert(id.clone(), log_uniform(rng, d));
            DeviceSpec::ed(id, log_uniform(rng, d), format!("ap{}", rng.gen_range(0..n_ap)))
        })
        .collect();
    let cc = DeviceSpec::cc("cc", log_uniform(rng, d));
    let topo = Topology::new(eds, aps, cc).expect("generated topology is well formed");
    let compression = rng.gen_range(shape.compression.clone());
    let wl = Workload { volume_overrides: volumes, ..Workload::new(1.0, 1.0, compression, 1.0) };
    (topo, wl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_respect_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = ScenarioShape::default();
        for _ in 0..200 {
            let (t, w) = scenario(&mut rng, &shape);
            assert!((1..=8).contains(&t.eds().len()));
            assert!((1..=4).contains(&t.aps().len()));
            assert!(w.validate().is_ok());
            assert!((0.05..=1.0).contains(&w.compression_ratio));
            for e in t.eds() {
                let v = w.ed_volume(&e.id);
                assert!((1.0..=1e4).contains(&v) && (1.0..=1e4).contains(&e.cpu_hz));
            }
        }
    }
}
