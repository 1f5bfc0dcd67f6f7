use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tristage::metrics::{challenge_score, macro_auc, EvalReport, WeightMatrix};
use tristage::signal::{filtfilt, design_bandpass};
use tristage_bench::{labelled_scores, values};

fn scoring(c: &mut Criterion) {
    let (m, n) = (5000, 24);
    let (truth, scores) = labelled_scores(m, n);
    let names: Vec<String> = (0..n).map(|k| format!("c{k}")).collect();
    let w = WeightMatrix::identity(names.clone());
    let preds: Vec<Vec<usize>> = scores.iter().map(|r| (0..n).filter(|&k| r[k] >= 0.5).collect()).collect();
    c.bench_function("challenge_score_5000x24", |b| b.iter(|| black_box(challenge_score(&truth, &preds, &w).unwrap())));
    c.bench_function("macro_auc_5000x24", |b| b.iter(|| black_box(macro_auc(&scores, &truth, n).unwrap())));
    let th = vec![0.5; n];
    c.bench_function("eval_report_5000x24", |b| {
        b.iter(|| black_box(EvalReport::compute(&scores, &truth, &names, &th, Some(&w)).unwrap()))
    });
}

fn filtering(c: &mut Criterion) {
    let h = design_bandpass(3.0, 45.0, 500.0, 101);
    let x = values(5000, 0.9);
    c.bench_function("filtfilt_101_taps_5000_samples", |b| b.iter(|| black_box(filtfilt(&h, &x).unwrap())));
}

criterion_group!(benches, scoring, filtering);
criterion_main!(benches);
