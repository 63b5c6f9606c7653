use criterion::{criterion_group, criterion_main, Criterion};

use blurry_edges::aggregate::{BlockConfig, PairInputs};
use blurry_edges::fit::FitConfig;
use blurry_edges::optics::OpticsConfig;
use blurry_edges::par::Exec;
use blurry_edges::pipeline::estimate_depth;
use blurry_edges::synth::{generate_scene, DatasetSpec};

fn depth(c: &mut Criterion) {
    let spec = DatasetSpec {
        width: 64,
        height: 64,
        ..DatasetSpec::default()
    };
    let sample = generate_scene(&spec, 0).unwrap();
    let [plus, minus] = sample.noisy;
    let inputs = PairInputs {
        plus,
        minus,
        ustar: None,
        zstar: None,
    };
    let cfg = FitConfig {
        stride: 4,
        restarts: 2,
        outer_iterations: 1,
        ..FitConfig::default()
    };
    let optics = OpticsConfig::default();
    let mut group = c.benchmark_group("estimate_depth_64");
    group.sample_size(10);
    for (name, exec) in [("serial", Exec::Serial), ("parallel", Exec::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| estimate_depth(&inputs, &cfg, &BlockConfig::default(), &optics, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, depth);
criterion_main!(benches);
