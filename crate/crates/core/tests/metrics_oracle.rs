mod common;

use common::metric_oracle as oracle;
use tristage::metrics::{
    challenge_confusion, challenge_score, fbeta, gbeta, macro_auc, per_class_counts, WeightMatrix, BETA,
};
use tristage::Tensor;

const TOL: f64 = 1e-9;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("c{k}")).collect()
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    for seed in 0..200 {
        let inst = oracle::instance(seed);
        let n = inst.n;

        let got = per_class_counts(&inst.truth, &inst.pred, n).unwrap();
        let want = oracle::counts(&inst.truth, &inst.pred, n);
        for (g, w) in got.iter().zip(&want) {
            let g4 = [g.tp, g.fp, g.fn_, g.tn];
            for k in 0..4 {
                assert!((g4[k] - w[k]).abs() < TOL, "seed {seed}");
            }
            assert!((fbeta(g, BETA) - oracle::fbeta(*w, BETA)).abs() < TOL);
            assert!((gbeta(g, BETA) - oracle::gbeta(*w, BETA)).abs() < TOL);
        }

        let a = challenge_confusion(&inst.truth, &inst.pred, n).unwrap();
        let a_ref = oracle::confusion(&inst.truth, &inst.pred, n);
        for i in 0..n {
            for j in 0..n {
                assert!((a.data()[i * n + j] - a_ref[i][j]).abs() < TOL, "seed {seed}");
            }
        }

        let flat: Vec<f64> = inst.w.iter().flatten().copied().collect();
        let wm = WeightMatrix::new(names(n), Tensor::from_f64(&[n, n], &flat).unwrap()).unwrap();
        let s = challenge_score(&inst.truth, &inst.pred, &wm).unwrap();
        assert!((s.raw - oracle::score(&a_ref, &inst.w)).abs() < TOL, "seed {seed}");
        assert!((s.normalized - oracle::normalized(&inst.truth, &inst.pred, &inst.w)).abs() < TOL, "seed {seed}");

        let r = macro_auc(&inst.scores, &inst.truth, n).unwrap();
        let mut scored = Vec::new();
        for k in 0..n {
            let col: Vec<f64> = inst.scores.iter().map(|row| row[k]).collect();
            let pos: Vec<bool> = inst.truth.iter().map(|t| t.contains(&k)).collect();
            let want = oracle::auc(&col, &pos);
            match (r.per_class[k], want) {
                (Some(g), Some(w)) => {
                    assert!((g - w).abs() < TOL, "seed {seed}");
                    scored.push(w);
                }
                (None, None) => assert!(r.skipped.contains(&k)),
                other => panic!("seed {seed} class {k}: {other:?}"),
            }
        }
        match r.macro_auc {
            Some(m) => assert!((m - scored.iter().sum::<f64>() / scored.len() as f64).abs() < TOL),
            None => assert!(scored.is_empty()),
        }
    }
}
