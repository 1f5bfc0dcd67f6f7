//! Deterministic inputs shared by the benchmarks.

use tristage::harness::{Dataset, TrainConfig};
use tristage::signal::{synth_generate, SyntheticSpec};
use tristage::{Scalar, Tensor};

/// Smooth pseudo-random values in `[-1, 1]`; no RNG needed for timing.
pub fn values(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 * 0.7548776662 + phase) * 12.9898).sin()).collect()
}

pub fn tensor<T: Scalar>(shape: &[usize], phase: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &values(n, phase)).expect("shape matches length")
}

/// Synthetic recordings preprocessed with `cfg`'s pipeline.
pub fn dataset(cfg: &TrainConfig, n: usize, seconds: f64) -> Dataset {
    let spec = SyntheticSpec {
        n_recordings: n,
        leads: cfg.model.leads(),
        fs: cfg.pipeline.target_fs,
        duration_seconds: seconds,
        ..Default::default()
    };
    let recs = synth_generate(&spec).expect("valid synthetic spec");
    Dataset::from_recordings(spec.class_names(), &recs, &cfg.pipeline).expect("preprocessable recordings")
}

/// Random label sets and scores for `m` recordings over `n` classes.
pub fn labelled_scores(m: usize, n: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let v = values(m * n * 2, 0.3);
    let truth = (0..m).map(|r| (0..n).filter(|&k| v[r * n + k] > 0.3).collect()).collect();
    let scores = (0..m).map(|r| (0..n).map(|k| 0.5 + 0.5 * v[m * n + r * n + k]).collect()).collect();
    (truth, scores)
}
