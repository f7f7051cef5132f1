use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use wavekernel::acoustics::{render_rir, simulate, RoomScenario};
use wavekernel::experiment::{init_model, ExperimentConfig};
use wavekernel::gp::{sample_collocation, CollocationSet};
use wavekernel::kernels::GramBlocks;
use wavekernel::linalg::cholesky;
use wavekernel::DenseMatrix;

fn desk_config() -> ExperimentConfig {
    ExperimentConfig { mics: 12, batch_len: 32, batches: 2, realizations: 1, ..ExperimentConfig::default() }
}

fn linalg(c: &mut Criterion) {
    let n = 384;
    let b = DenseMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5);
    let a = &b * b.transpose() + DenseMatrix::identity(n, n) * n as f64;
    c.bench_function("cholesky_384", |bch| bch.iter(|| cholesky(black_box(&a), 0.0).unwrap()));
}

fn training(c: &mut Criterion) {
    let cfg = desk_config();
    let data = simulate(&cfg.scenario(0)).unwrap();
    let model = init_model(&cfg, &data, 0).unwrap();
    let batch = &data.train_batches()[0];
    let region = wavekernel::experiment::collocation_region(&cfg);
    let mut g = c.benchmark_group("desk_step");
    g.sample_size(10);
    for m in [0usize, 10, 20] {
        let colloc = if m == 0 { CollocationSet::default() } else { sample_collocation(&region, m, 1, 0) };
        g.bench_function(format!("forward_gram_m{m}"), |bch| {
            bch.iter(|| {
                let fb = model.net.forward_batch(&batch.x, &colloc.xz);
                GramBlocks::assemble(&fb, &model.hyper, &model.op)
            })
        });
        g.bench_function(format!("loss_and_grad_m{m}"), |bch| {
            bch.iter(|| model.loss_and_grad(black_box(batch), &colloc).unwrap())
        });
    }
    g.finish();
}

fn acoustics(c: &mut Criterion) {
    let s = RoomScenario::default();
    let mut g = c.benchmark_group("acoustics");
    g.sample_size(10);
    g.bench_function("render_rir_order26", |bch| bch.iter(|| render_rir(&s, black_box(&[4.0, 3.0, 1.5]))));
    g.finish();
}

criterion_group!(benches, linalg, training, acoustics);
criterion_main!(benches);
