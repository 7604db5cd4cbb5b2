use criterion::{criterion_group, criterion_main, Criterion};
use drmc_bench::patch_pair;
use drmc_core::train::{batch_loss_and_grad, infer_volume};
use drmc_core::{ModelConfig, Network};

fn network(c: &mut Criterion) {
    let drmc = Network::new(ModelConfig::default(), 1).unwrap();
    let baseline = Network::new(ModelConfig::default().baseline(), 1).unwrap();
    let (low, full) = patch_pair(12, 2);
    let mut g = c.benchmark_group("network");
    g.sample_size(20);
    for (name, net) in [("drmc", &drmc), ("baseline", &baseline)] {
        g.bench_function(format!("{name}/infer_12"), |b| b.iter(|| net.infer(&low).unwrap()));
        let pairs = vec![(low.clone(), full.clone())];
        g.bench_function(format!("{name}/loss_and_grad_12"), |b| {
            b.iter(|| batch_loss_and_grad(net, &pairs, 1e-3).unwrap())
        });
    }
    let (vol, _) = patch_pair(24, 3);
    g.bench_function("drmc/infer_volume_24", |b| b.iter(|| infer_volume(&drmc, &vol, 12, 12).unwrap()));
    g.finish();
}

criterion_group!(benches, network);
criterion_main!(benches);
