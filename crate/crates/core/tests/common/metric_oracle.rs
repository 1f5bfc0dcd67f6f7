//! Straightforward reimplementations of the metrics used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub n: usize,
    pub truth: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

/// Random instance with at most 5 classes and 30 recordings. Scores are
/// drawn from a coarse grid so ties occur.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    let m = rng.random_range(1..=30);
    let set = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..n).filter(|_| rng.random_bool(0.35)).collect()
    };
    let truth: Vec<Vec<usize>> = (0..m).map(|_| set(&mut rng)).collect();
    let pred: Vec<Vec<usize>> = (0..m).map(|_| set(&mut rng)).collect();
    let scores = (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect())
        .collect();
    let w = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { rng.random_range(-1.0..1.0) }).collect())
        .collect();
    Instance { n, truth, pred, scores, w }
}

/// (tp, fp, fn, tn) per class.
pub fn counts(truth: &[Vec<usize>], pred: &[Vec<usize>], n: usize) -> Vec<[f64; 4]> {
    let mut out = vec![[0.0; 4]; n];
    for (t, p) in truth.iter().zip(pred) {
        let t: BTreeSet<usize> = t.iter().copied().collect();
        let p: BTreeSet<usize> = p.iter().copied().collect();
        let union = t.union(&p).count();
        let wgt = if union == 0 { 1.0 } else { 1.0 / union as f64 };
        for (k, c) in out.iter_mut().enumerate() {
            let slot = match (t.contains(&k), p.contains(&k)) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            c[slot] += wgt;
        }
    }
    out
}

pub fn fbeta(c: [f64; 4], beta: f64) -> f64 {
    let num = (1.0 + beta * beta) * c[0];
    let den = num + c[1] + beta * beta * c[2];
    if den == 0.0 { 0.0 } else { num / den }
}

pub fn gbeta(c: [f64; 4], beta: f64) -> f64 {
    let den = c[0] + c[1] + beta * c[2];
    if den == 0.0 { 0.0 } else { c[0] / den }
}

pub fn confusion(truth: &[Vec<usize>], pred: &[Vec<usize>], n: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for (t, p) in truth.iter().zip(pred) {
        let all: BTreeSet<usize> = t.iter().chain(p).copied().collect();
        for &i in p {
            for &j in t {
                a[i][j] += 1.0 / all.len() as f64;
            }
        }
    }
    a
}

pub fn score(a: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            s += w[i][j] * a[i][j];
        }
    }
    s
}

pub fn normalized(truth: &[Vec<usize>], pred: &[Vec<usize>], w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    let none: Vec<Vec<usize>> = vec![vec![]; truth.len()];
    let s = score(&confusion(truth, pred, n), w);
    let lo = score(&confusion(truth, &none, n), w);
    let hi = score(&confusion(truth, truth, n), w);
    if hi == lo { 0.0 } else { (s - lo) / (hi - lo) }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
pub fn auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}
