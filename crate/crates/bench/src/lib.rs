//! Fixtures shared by the benchmarks.

use rimesa::data::{generate, Dataset, ScenarioConfig};
use rimesa::harness::{central_problem, MethodKind, MethodSpec};
use rimesa::solver::FactorGraph;
use rimesa::Values;

/// Three-robot planar dataset with `length` poses per robot.
pub fn desk(length: usize, outliers: f64, seed: u64) -> Dataset {
    generate(&ScenarioConfig {
        length,
        outlier_fraction: outliers,
        seed,
        ..ScenarioConfig::default().desk()
    })
    .expect("valid scenario")
}

/// Joint graph and dead-reckoned initialization as the centralized `kind` sees it.
pub fn central(ds: &Dataset, kind: MethodKind) -> (FactorGraph, Values) {
    central_problem(ds, &MethodSpec::new(kind)).expect("dataset builds")
}
