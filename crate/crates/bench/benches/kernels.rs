use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drmc_bench::random;
use drmc_core::model::{AttentionExpert, ParamStore};
use drmc_core::tensor::Conv3dSpec;
use drmc_core::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv3d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    for side in [8usize, 12, 16] {
        let x = random(&[16, side, side, side], 1);
        let dense = random(&[16, 16, 3, 3, 3], 2);
        let depth = random(&[16, 1, 3, 3, 3], 3);
        let point = random(&[16, 16, 1, 1, 1], 4);
        for (name, w, spec) in [
            ("dense3", &dense, Conv3dSpec::same(3)),
            ("depthwise3", &depth, Conv3dSpec::depthwise(3, 16)),
            ("pointwise", &point, Conv3dSpec::pointwise()),
        ] {
            g.bench_with_input(BenchmarkId::new(name, side), &side, |b, _| {
                b.iter(|| {
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let wv = t.constant(w.clone());
                    t.conv3d(xv, wv, None, spec).unwrap()
                })
            });
        }
    }
    g.finish();
}

fn attention_expert(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = AttentionExpert::declare(&mut store, "att", 16, &mut rng);
    let mut g = c.benchmark_group("attention_expert");
    for side in [8usize, 12, 16] {
        let x = random(&[16, side, side, side], 6);
        g.bench_with_input(BenchmarkId::new("forward", side), &side, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let p = store.bind(&mut t, false);
                let xv = t.constant(x.clone());
                e.forward(&mut t, &p, xv).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", side), &side, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let p = store.bind(&mut t, true);
                let xv = t.constant(x.clone());
                let y = e.forward(&mut t, &p, xv).unwrap();
                let l = t.mean(y).unwrap();
                t.backward(l).unwrap();
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv3d, attention_expert);
criterion_main!(benches);
