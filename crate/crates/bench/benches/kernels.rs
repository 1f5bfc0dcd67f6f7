use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tristage::autodiff::{Conv1dSpec, Tape};
use tristage_bench::tensor;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    for n in [32usize, 64, 128] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let (x, w) = (tensor::<f32>(&[16, n, n], 0.1), tensor::<f32>(&[n, n], 0.2));
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
                let y = tape.matmul(xv, wv).unwrap();
                let s = tape.sum_all(y);
                tape.backward(s).unwrap();
                black_box(tape.grad(wv).map(|g| g[0]));
            });
        });
    }
    g.finish();
}

fn depthwise_conv(c: &mut Criterion) {
    let (x, w) = (tensor::<f32>(&[16, 12, 2500], 0.4), tensor::<f32>(&[96, 1, 15], 0.5));
    let spec = Conv1dSpec { stride: 3, padding: 0, groups: 12 };
    c.bench_function("grouped_conv1d_fwd_bwd_12x2500", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.param(w.clone()));
            let y = tape.grouped_conv1d(xv, wv, None, spec).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]));
        });
    });
}

fn softmax(c: &mut Criterion) {
    let x = tensor::<f64>(&[64, 4, 64, 64], 0.6);
    c.bench_function("softmax_lastdim_64x4x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            black_box(tape.softmax_lastdim(xv));
        });
    });
}

criterion_group!(benches, matmul, depthwise_conv, softmax);
criterion_main!(benches);
