use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use csts_bench::{desk_batch, matrix, rng, tone};
use csts_core::audio::{spectrogram_stack, FrontendConfig};
use csts_core::model::Model;
use csts_core::nn::TransformerBlock;
use csts_core::{Graph, ParamStore, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // square, and the narrow shapes attention produces
    for &(m, k, n) in &[(64, 64, 64), (256, 256, 4), (256, 4, 256), (256, 32, 8)] {
        let (a, b) = (matrix(m, k, 1), matrix(k, n, 2));
        group.bench_with_input(BenchmarkId::new("fwd+bwd", format!("{m}x{k}x{n}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
                let y = g.matmul(va, vb).unwrap();
                let s = g.sum(y).unwrap();
                black_box(g.backward(s).unwrap().wrt(va));
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "b", 32, 2, 2.0, &mut rng(3)).unwrap();
    let x = Tensor::randn(&[4 * 17, 32], &mut rng(4));
    c.bench_function("attention block 68x32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::with_params(&store);
            let v = g.input(x.clone());
            let out = block.forward(&mut g, v, None).unwrap();
            let s = g.sum(out.out).unwrap();
            black_box(g.backward(s).unwrap().params(&g));
        })
    });
}

fn spectrogram(c: &mut Criterion) {
    let track = tone(5.0);
    let cfg = FrontendConfig::default();
    let times: Vec<f64> = (0..8).map(|i| 0.4 * i as f64).collect();
    c.bench_function("spectrogram stack 8x256x256", |bench| {
        bench.iter(|| black_box(spectrogram_stack(&track, &times, &cfg).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let (cfg, batch) = desk_batch(2);
    let cfg = cfg.with_experiment("csts").unwrap();
    let (model, store) = Model::new(&cfg, 0).unwrap();
    let refs: Vec<_> = batch.iter().collect();
    let mut group = c.benchmark_group("desk model");
    group.sample_size(10);
    group.bench_function("csts loss+backward, batch 2", |bench| {
        bench.iter(|| {
            let mut g = Graph::with_params(&store);
            let loss = model.batch_loss(&mut g, &refs).unwrap();
            black_box(g.backward(loss.total).unwrap().params(&g));
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, attention, spectrogram, train_step);
criterion_main!(benches);
