use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use genco_core::dataio::{ImageTile, AugmentConfig};
use genco_core::encoder::EncoderConfig;
use genco_core::genco::{genco_loss, GencoConfig, LossOptions, MemoryBank};
use genco_core::numcore::kernels::gemm;
use genco_core::numcore::{Graph, Precision, SeedKey, Tensor};
use genco_core::pretrain::{pretrain_step, PretrainConfig, TrainState};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedKey::root(seed).rng();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let t = random(&[n, d], seed);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = t.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new([n, d], data).unwrap()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64, 128, 256] {
        let a = random(&[n, n], 1);
        let b = random(&[n, n], 2);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, a.data(), false, b.data(), false, black_box(&mut out), false))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = random(&[8, 16, 32, 32], 3);
    let w = random(&[32, 16, 3, 3], 4);
    c.bench_function("conv2d_3x3_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(Precision::F32);
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let loss = g.mean_all(y).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn bench_loss(c: &mut Criterion) {
    let (batch, dim) = (32, 128);
    let mut bank = MemoryBank::new(512, dim).unwrap();
    bank.enqueue(&unit_rows(512, dim, 5)).unwrap();
    let q = unit_rows(batch, dim, 6);
    let qp = unit_rows(batch, dim, 7);
    let k = unit_rows(batch, dim, 8);
    c.bench_function("genco_loss_batch32_bank512", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(Precision::F32);
            let qv = g.leaf(q.clone(), true);
            let qpv = g.leaf(qp.clone(), true);
            let kv = g.constant(k.clone());
            let l = genco_loss(&mut g, qv, qpv, kv, &bank, LossOptions::new(0.2)).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
}

fn bench_pretrain_step(c: &mut Criterion) {
    let cfg = PretrainConfig {
        augment: AugmentConfig {
            output_size: 32,
            ..PretrainConfig::default().augment
        },
        ..PretrainConfig::default()
    };
    let mut state = TrainState::new(&EncoderConfig::default(), &GencoConfig::default(), &cfg, 0).unwrap();
    let mut rng = SeedKey::root(9).rng();
    let tiles: Vec<ImageTile> = (0..cfg.batch_size)
        .map(|_| ImageTile::new(4, 32, 32, (0..4 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let batch: Vec<(usize, &ImageTile)> = tiles.iter().enumerate().collect();
    let mut group = c.benchmark_group("pretrain");
    group.sample_size(10);
    group.bench_function("step_batch32", |bench| bench.iter(|| black_box(pretrain_step(&mut state, &batch, 1).unwrap())));
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_loss, bench_pretrain_step);
criterion_main!(benches);
