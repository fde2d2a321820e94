use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rimesa::agent::exchange;
use rimesa::harness::{Fleet, MethodKind, MethodSpec};
use rimesa::solver::{optimize_batch, optimize_gnc, SolverConfig};
use rimesa::Pose;
use rimesa_bench::{central, desk};

fn manifold(c: &mut Criterion) {
    let a = Pose::se2(1.0, -2.0, 0.7);
    let b = Pose::se2(3.5, 0.5, -2.1);
    c.bench_function("se2_local", |bench| bench.iter(|| std::hint::black_box(&a).local(std::hint::black_box(&b))));
}

fn batch(c: &mut Criterion) {
    let ds = desk(50, 0.0, 1);
    let (graph, init) = central(&ds, MethodKind::CentralizedOracle);
    let cfg = SolverConfig::default();
    c.bench_function("optimize_batch_3x50", |bench| bench.iter(|| optimize_batch(&graph, &init, &cfg).unwrap()));
}

fn gnc(c: &mut Criterion) {
    let ds = desk(30, 0.15, 2);
    let (graph, init) = central(&ds, MethodKind::CentralizedGnc);
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("gnc");
    group.sample_size(10);
    group.bench_function("optimize_gnc_3x30", |bench| bench.iter(|| optimize_gnc(&graph, &init, &cfg).unwrap()));
    group.finish();
}

fn rimesa_run(c: &mut Criterion) {
    let ds = desk(30, 0.15, 3);
    let spec = MethodSpec::new(MethodKind::Rimesa);
    let pairs = [(0u32, 1u32), (1, 2), (0, 2)];
    let mut group = c.benchmark_group("rimesa");
    group.sample_size(10);
    group.bench_function("round_robin_3x30", |bench| {
        bench.iter_batched(
            || Fleet::new(&ds, &spec).unwrap(),
            |mut fleet| {
                for step in 0..ds.steps() {
                    fleet.feed(step, false).unwrap();
                    let (i, j) = pairs[step as usize % pairs.len()];
                    let (si, sj) = fleet.begin(i, j);
                    let (ri, rj) = exchange(&si, &sj).unwrap();
                    fleet.deliver(vec![ri, rj], false).unwrap();
                }
                fleet
            },
            BatchSize::LargeInput,
        )
    });
    let mut fleet = Fleet::new(&ds, &spec).unwrap();
    for step in 0..ds.steps() {
        fleet.feed(step, false).unwrap();
    }
    let (si, sj) = fleet.begin(0, 1);
    group.bench_function("exchange", |bench| bench.iter(|| exchange(&si, &sj).unwrap()));
    group.finish();
}

criterion_group!(benches, manifold, batch, gnc, rimesa_run);
criterion_main!(benches);
