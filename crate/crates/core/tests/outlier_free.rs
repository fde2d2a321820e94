use std::collections::BTreeSet;

use rimesa::data::{generate, Dataset, ScenarioConfig};
use rimesa::harness::{run_on, MethodKind, MethodSpec, RunConfig};
use rimesa::netsim::NetworkConfig;
use rimesa::RobotId;

fn sharing_pairs(ds: &Dataset) -> BTreeSet<(RobotId, RobotId)> {
    ds.records
        .iter()
        .filter_map(|r| {
            let owners: BTreeSet<RobotId> = r.keys.iter().filter_map(|k| k.robot()).collect();
            let v: Vec<RobotId> = owners.into_iter().collect();
            (v.len() == 2).then(|| (v[0], v[1]))
        })
        .collect()
}

#[test]
fn rimesa_no_worse_than_independent_without_outliers() {
    for seed in 0..3 {
        let ds = generate(&ScenarioConfig {
            length: 60,
            outlier_fraction: 0.0,
            seed,
            ..ScenarioConfig::default().desk()
        })
        .unwrap();
        let cfg = RunConfig {
            network: NetworkConfig::default(),
            methods: vec![MethodSpec::new(MethodKind::Rimesa), MethodSpec::new(MethodKind::Independent)],
            seed,
            ..RunConfig::default()
        };
        let out = run_on(&ds, &cfg).unwrap();
        let (ri, ind) = (&out.outcomes[0], &out.outcomes[1]);
        let pairs = sharing_pairs(&ds);
        assert!(!pairs.is_empty());
        let connected: BTreeSet<(RobotId, RobotId)> = ri.connected_pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        assert!(pairs.is_subset(&connected), "seed {seed}: {pairs:?} vs {connected:?}");
        let (a, b) = (ri.report.as_ref().unwrap().final_ate, ind.report.as_ref().unwrap().final_ate);
        assert!(a <= b, "seed {seed}: riMESA {a} vs independent {b}");
    }
}
