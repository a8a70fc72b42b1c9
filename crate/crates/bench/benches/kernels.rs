use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rscl_core::rscl::{rscl_loss, soft_dtw, soft_weights};
use rscl_core::synthenv::generate_dataset;
use rscl_core::trainer::Supervision;
use rscl_core::{Graph, Tensor, TrainConfig, Trainer};

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], d).unwrap()
}

fn bench_soft_dtw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = uniform(8, 3, &mut rng);
    let b = uniform(8, 3, &mut rng);
    c.bench_function("soft_dtw 8x8x3", |bch| bch.iter(|| soft_dtw(black_box(&a), black_box(&b), 10.0).unwrap()));
}

fn bench_rscl_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = uniform(32, 16, &mut rng);
    let za = uniform(32, 16, &mut rng);
    let w = soft_weights(&uniform(32, 3, &mut rng), 1.0).unwrap();
    c.bench_function("rscl_loss forward+backward B=32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let zv = g.leaf(z.clone()).unwrap();
            let zav = g.leaf(za.clone()).unwrap();
            let l = rscl_loss(&mut g, zv, zav, &w, 0.2).unwrap();
            g.backward(l).unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let ds = generate_dataset(20, &cfg.env_config(), 0).unwrap();
    for (label, supervision) in [("train_step fm", Supervision::None), ("train_step fm+rscl", Supervision::ProprioState)] {
        let t = Trainer::new(TrainConfig { supervision, ..cfg.clone() }, ds.clone()).unwrap();
        c.bench_function(label, |bch| {
            bch.iter_batched(|| t.clone(), |mut t| t.train_step().unwrap(), BatchSize::LargeInput)
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_soft_dtw, bench_rscl_loss, bench_train_step
}
criterion_main!(benches);
